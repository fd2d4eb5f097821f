use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer `{0}` is not in the model's layer catalog")]
    UnknownLayer(String),

    #[error("DeepLift rescale does not support layer `{layer}` ({kind}) between the attribution layer and the output")]
    UnsupportedOp { layer: String, kind: &'static str },

    #[error("target class {class} out of range for a model with {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("class {class}: only {found} images predicted as this class (minimum {min})")]
    InsufficientSamples { class: usize, found: usize, min: usize },

    #[error("no activation cells retained after attribution filtering")]
    EmptyActivations,

    #[error("NMF input has a negative entry {value} at ({row}, {col})")]
    NegativeInput { row: usize, col: usize, value: f64 },

    #[error("NMF rank {n} exceeds min(rows, cols) = {max}")]
    Rank { n: usize, max: usize },

    #[error("NMF produced an all-zero basis row {0}")]
    DegenerateBasis(usize),

    #[error("crop index build failed: {0}")]
    Build(String),

    #[error("contrast {class_a} vs {class_b}: no activation cell lies on the class-{class_a} side of the hyperplane")]
    DegenerateContrast { class_a: usize, class_b: usize },

    #[error("hyperplane normal has zero norm")]
    DegenerateHyperplane,

    #[error("patch {patch_h}x{patch_w} does not fit into image {image_h}x{image_w}")]
    PatchSize { patch_h: usize, patch_w: usize, image_h: usize, image_w: usize },

    #[error("fixture model reached only {accuracy:.3} train accuracy (floor {floor:.2}); train for more epochs")]
    Fixture { accuracy: f64, floor: f64 },

    #[error("invalid attribution method `{0}` (expected grad_x_act | deeplift | smoothgrad:<inner>:<n>:<sigma>)")]
    ParseMethod(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing path {}", .0.display())]
    MissingPath(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("npy: {0}")]
    Npy(String),
}

pub type Result<T> = std::result::Result<T, Error>;
