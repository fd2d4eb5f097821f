//! Turning a concept basis into crop visualizations, and the stitching
//! self-check: stack each concept's best crop and ask the model what it sees.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::concepts::{extract_class_concepts, ConceptBasis, ConceptConfig};
use crate::crop_index::{CropIndex, CropRecord, Exclusion};
use crate::dataset::{crop, stack_vertical, to_rgb_image, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, softmax_rows, LayerId, ModelHandle, ResizeApplied};
use crate::persist;

pub const DEFAULT_M: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualizedCrop {
    /// Row in the crop index.
    pub index: usize,
    pub record: CropRecord,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVisualization {
    pub concept_index: usize,
    /// Best first.
    pub crops: Vec<VisualizedCrop>,
    /// Fewer than `m` crops survived the exclusion filter.
    pub short: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchResult {
    pub softmax_pred_target: f64,
    pub majority_class: usize,
    pub passed: bool,
    /// `(class, probability)`, most probable first.
    pub top5: Vec<(usize, f64)>,
    pub resize: ResizeApplied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub class_id: usize,
    pub layer: LayerId,
    pub n: usize,
    pub m: usize,
    pub exclusion: Exclusion,
    pub config_fingerprint: String,
    pub visualizations: Vec<ConceptVisualization>,
    pub stitch: StitchResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub concepts: ConceptConfig,
    pub m: usize,
    pub exclusion: Exclusion,
}

impl ExplainConfig {
    pub fn new(layer: impl Into<String>) -> Self {
        ExplainConfig { concepts: ConceptConfig::new(layer), m: DEFAULT_M, exclusion: Exclusion::default() }
    }
}

/// The `m` nearest index crops for every concept of `basis`.
pub fn visualize_concepts(
    basis: &ConceptBasis,
    index: &CropIndex,
    m: usize,
    exclusion: Exclusion,
) -> Result<Vec<ConceptVisualization>> {
    if index.manifest.layer.name != basis.meta.layer.name {
        return Err(Error::Invalid(format!(
            "crop index is for layer `{}`, concepts are for `{}`",
            index.manifest.layer.name, basis.meta.layer.name
        )));
    }
    basis
        .basis
        .outer_iter()
        .enumerate()
        .map(|(concept_index, v)| {
            let top = index.topk_crops(v, m, exclusion, basis.class_id())?;
            Ok(ConceptVisualization {
                concept_index,
                crops: top
                    .hits
                    .iter()
                    .map(|h| VisualizedCrop { index: h.index, record: index.record(h.index).clone(), cosine: h.cosine })
                    .collect(),
                short: top.short,
            })
        })
        .collect()
}

fn crop_pixels(dataset: &Dataset, rec: &CropRecord) -> Result<Array3<f64>> {
    let item = dataset
        .get(&rec.source_id)
        .ok_or_else(|| Error::Invalid(format!("crop source `{}` is not in the dataset", rec.source_id)))?;
    Ok(crop(item.pixels.view(), rec.bbox))
}

/// Top-1 crop of each concept, stacked top to bottom in concept order.
/// Pixels are copied unchanged from the source images.
pub fn stitch_image(vis: &[ConceptVisualization], dataset: &Dataset) -> Result<Array3<f64>> {
    let parts = vis
        .iter()
        .map(|v| {
            let first = v
                .crops
                .first()
                .ok_or_else(|| Error::Invalid(format!("concept {} has no crops to stitch", v.concept_index)))?;
            crop_pixels(dataset, &first.record)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Err(Error::Invalid("nothing to stitch".into()));
    }
    stack_vertical(&parts)
}

/// Classifies a raw `[0, 1]` image after normalization and the model's
/// resize policy.
pub fn stitching_test(model: &ModelHandle, stitched: &Array3<f64>, target: usize) -> Result<StitchResult> {
    model.check_class(target)?;
    let (x, resize) = model.prepare(model.normalize(stitched.view()));
    let probs = softmax_rows(&model.forward_full(&x.insert_axis(Axis(0)))?);
    let row = probs.row(0).to_vec();
    let majority_class = argmax(&row);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(StitchResult {
        softmax_pred_target: row[target],
        majority_class,
        passed: majority_class == target,
        top5: order.iter().take(5).map(|&c| (c, row[c])).collect(),
        resize,
    })
}

/// An `n x m` grid of crops, one concept per row. Missing cells stay grey.
pub fn render_grid(vis: &[ConceptVisualization], dataset: &Dataset, m: usize, side: usize) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel((m * side) as u32, (vis.len() * side) as u32, Rgb([128, 128, 128]));
    for (r, v) in vis.iter().enumerate() {
        for (c, vc) in v.crops.iter().take(m).enumerate() {
            let tile = to_rgb_image(crop_pixels(dataset, &vc.record)?.view());
            let (tw, th) = (tile.width().min(side as u32), tile.height().min(side as u32));
            for y in 0..th {
                for x in 0..tw {
                    img.put_pixel((c * side) as u32 + x, (r * side) as u32 + y, *tile.get_pixel(x, y));
                }
            }
        }
    }
    Ok(img)
}

/// Everything `explain` produces for one class.
#[derive(Clone, Debug)]
pub struct ExplainOutput {
    pub explanation: Explanation,
    pub basis: ConceptBasis,
    pub stitched: Array3<f64>,
}

/// Extracts concepts for `class_id`, visualizes them from `index` and runs
/// the stitching test.
pub fn explain_class(
    model: &ModelHandle,
    dataset: &Dataset,
    index: &CropIndex,
    class_id: usize,
    cfg: &ExplainConfig,
) -> Result<ExplainOutput> {
    let basis = extract_class_concepts(model, dataset, class_id, &cfg.concepts)?;
    explain_basis(model, dataset, index, basis, cfg.m, cfg.exclusion)
}

/// Visualization and stitching for an already extracted basis.
pub fn explain_basis(
    model: &ModelHandle,
    dataset: &Dataset,
    index: &CropIndex,
    basis: ConceptBasis,
    m: usize,
    exclusion: Exclusion,
) -> Result<ExplainOutput> {
    let visualizations = visualize_concepts(&basis, index, m, exclusion)?;
    let stitched = stitch_image(&visualizations, dataset)?;
    let stitch = stitching_test(model, &stitched, basis.class_id())?;
    let explanation = Explanation {
        class_id: basis.class_id(),
        layer: basis.meta.layer.clone(),
        n: basis.n(),
        m,
        exclusion,
        config_fingerprint: basis.meta.config_fingerprint.clone(),
        visualizations,
        stitch,
    };
    Ok(ExplainOutput { explanation, basis, stitched })
}

impl ExplainOutput {
    /// Writes `explanation.json`, `concepts.{npy,json}`, `grid.png` and
    /// `stitched.png` into `dir`.
    pub fn save(&self, dir: &Path, dataset: &Dataset, crop_side: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        persist::write_json(&dir.join("explanation.json"), &self.explanation)?;
        self.basis.save(dir, "concepts")?;
        render_grid(&self.explanation.visualizations, dataset, self.explanation.m, crop_side)?
            .save(dir.join("grid.png"))?;
        to_rgb_image(self.stitched.view()).save(dir.join("stitched.png"))?;
        Ok(())
    }
}
