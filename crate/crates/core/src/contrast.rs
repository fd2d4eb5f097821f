//! Pairwise class contrast: a linear probe separating the attributed cells
//! of two classes, concepts on class A's side of it, and the shifting and
//! patch-insertion tests.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, channel_mean_score, AttributionMethod};
use crate::concepts::{collect_class_images, factorize, CellProvenance, ConceptBasis, ConceptSource};
use crate::dataset::{to_rgb_image, Dataset};
use crate::error::{Error, Result};
use crate::model::{resize_bilinear, softmax_rows, LayerId, ModelHandle};
use crate::nmf::NmfOptions;
use crate::persist;

pub const PROBE_EPOCHS: usize = 100;
pub const PROBE_LR: f64 = 0.01;
/// Cells below this fraction of their image's best attribution are dropped.
pub const PIXEL_THRESHOLD: f64 = 0.25;
pub const OFFSET_COUNT: usize = 10;
/// Largest offset as a multiple of the mean class-B cell norm.
pub const OFFSET_SCALE: f64 = 3.0;

/// Raw activation cells of one class that passed the attribution threshold.
#[derive(Clone, Debug)]
pub struct ActivationBank {
    pub class_id: usize,
    pub layer: LayerId,
    /// `(P, C)` unscaled activations.
    pub vectors: Array2<f64>,
    pub provenance: Vec<CellProvenance>,
    pub image_count: usize,
    /// Retained cells over all cells of the collected images.
    pub retained_fraction: f64,
}

/// Per image, keeps the cells whose channel-mean attribution is at least
/// `threshold` times the image's maximum. Images whose maximum is not
/// positive contribute nothing.
pub fn threshold_cells(
    acts: &Array4<f64>,
    scores: &Array3<f64>,
    source_ids: &[String],
    threshold: f64,
) -> Result<(Array2<f64>, Vec<CellProvenance>)> {
    let (b, c, h, w) = acts.dim();
    if scores.dim() != (b, h, w) || source_ids.len() != b {
        return Err(Error::Shape(format!(
            "activations {:?}, scores {:?}, {} ids",
            acts.dim(),
            scores.dim(),
            source_ids.len()
        )));
    }
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for bi in 0..b {
        let img = scores.index_axis(Axis(0), bi);
        let max = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            continue;
        }
        for ((i, j), &score) in img.indexed_iter() {
            if score >= threshold * max {
                rows.extend((0..c).map(|ci| acts[[bi, ci, i, j]]));
                provenance.push(CellProvenance { source_id: source_ids[bi].clone(), cell_row: i, cell_col: j, score });
            }
        }
    }
    let matrix = Array2::from_shape_vec((provenance.len(), c), rows).unwrap();
    Ok((matrix, provenance))
}

/// Collects the thresholded, unscaled activation cells of images predicted
/// as `class_id`.
#[allow(clippy::too_many_arguments)]
pub fn collect_hyperplane_pixels(
    model: &ModelHandle,
    dataset: &Dataset,
    class_id: usize,
    layer: &str,
    method: &AttributionMethod,
    max_images: usize,
    min_images: usize,
    seed: u64,
) -> Result<ActivationBank> {
    let layer = model.layer(layer)?.clone();
    let batch = collect_class_images(model, dataset, class_id, max_images, min_images)?;
    let acts = model.forward_to_layer(&layer.name, &batch.images)?;
    let raw = attribute(method, model, &layer.name, &batch, class_id, seed)?;
    let map = channel_mean_score(&raw, class_id, &layer.name, method.clone());
    let (vectors, provenance) = threshold_cells(&acts, &map.values, &batch.source_ids, PIXEL_THRESHOLD)?;
    if provenance.is_empty() {
        return Err(Error::InsufficientSamples { class: class_id, found: 0, min: 1 });
    }
    let total = map.values.len();
    let retained_fraction = provenance.len() as f64 / total as f64;
    log::info!(
        "class {class_id} at {}: kept {} of {total} cells ({:.3})",
        layer.name,
        provenance.len(),
        retained_fraction
    );
    Ok(ActivationBank { class_id, layer, vectors, provenance, image_count: batch.len(), retained_fraction })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: usize,
    pub lr: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub count_a: usize,
    pub count_b: usize,
}

/// Linear probe `sigmoid(w.x + b)`, trained toward 1 on class A cells and
/// 0 on class B cells, so `w` points from B to A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub class_a: usize,
    pub class_b: usize,
    pub w: Vec<f64>,
    pub b: f64,
    pub train_stats: TrainStats,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Hyperplane {
    pub fn w(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.w[..])
    }

    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        self.w().dot(&x) + self.b
    }

    pub fn prob(&self, x: ArrayView1<f64>) -> f64 {
        sigmoid(self.decision(x))
    }

    /// Writes `<stem>.bin` (`w` then `b`, little-endian f64) and a JSON
    /// sidecar with the classes, stats and fingerprint.
    pub fn save(&self, dir: &Path, stem: &str, config_fingerprint: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity((self.w.len() + 1) * 8);
        for v in self.w.iter().chain(std::iter::once(&self.b)) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        persist::write_json(
            &dir.join(format!("{stem}.json")),
            &ProbeSidecar {
                class_a: self.class_a,
                class_b: self.class_b,
                dim: self.w.len(),
                stats: self.train_stats.clone(),
                config_fingerprint: config_fingerprint.to_string(),
            },
        )
    }

    /// Loads a cached probe; `None` if absent or trained under another
    /// configuration.
    pub fn load(dir: &Path, stem: &str, config_fingerprint: &str) -> Result<Option<Self>> {
        let side = dir.join(format!("{stem}.json"));
        let bin = dir.join(format!("{stem}.bin"));
        if !side.exists() || !bin.exists() {
            return Ok(None);
        }
        let meta: ProbeSidecar = persist::read_json(&side)?;
        if meta.config_fingerprint != config_fingerprint {
            return Ok(None);
        }
        let bytes = std::fs::read(bin)?;
        if bytes.len() != (meta.dim + 1) * 8 {
            return Err(Error::Shape(format!(
                "probe file holds {} bytes, expected {}",
                bytes.len(),
                (meta.dim + 1) * 8
            )));
        }
        let mut vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let b = vals.pop().unwrap();
        Ok(Some(Hyperplane { class_a: meta.class_a, class_b: meta.class_b, w: vals, b, train_stats: meta.stats }))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProbeSidecar {
    class_a: usize,
    class_b: usize,
    dim: usize,
    stats: TrainStats,
    config_fingerprint: String,
}

/// Full-batch gradient descent on mean binary cross-entropy, zero
/// initialization, fixed epochs and learning rate.
pub fn train_hyperplane<'a>(
    bank_a: ArrayView2<'a, f64>,
    bank_b: ArrayView2<'a, f64>,
    class_a: usize,
    class_b: usize,
) -> Result<Hyperplane> {
    if bank_a.nrows() == 0 || bank_b.nrows() == 0 {
        return Err(Error::Invalid("both activation banks must be non-empty".into()));
    }
    if bank_a.ncols() != bank_b.ncols() {
        return Err(Error::Shape(format!("bank dimensions differ: {} vs {}", bank_a.ncols(), bank_b.ncols())));
    }
    let x = ndarray::concatenate(Axis(0), &[bank_a, bank_b]).unwrap();
    let y = Array1::from_shape_fn(x.nrows(), |i| if i < bank_a.nrows() { 1.0 } else { 0.0 });
    let n = x.nrows() as f64;
    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    for _ in 0..PROBE_EPOCHS {
        let resid = (x.dot(&w) + b).mapv(sigmoid) - &y;
        let gw = x.t().dot(&resid) / n;
        let gb = resid.sum() / n;
        w.scaled_add(-PROBE_LR, &gw);
        b -= PROBE_LR * gb;
    }
    let p = (x.dot(&w) + b).mapv(sigmoid);
    let correct = p.iter().zip(y.iter()).filter(|(&p, &y)| (p >= 0.5) == (y == 1.0)).count();
    let loss = p
        .iter()
        .zip(y.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::Invalid("probe training diverged".into()));
    }
    Ok(Hyperplane {
        class_a,
        class_b,
        w: w.to_vec(),
        b,
        train_stats: TrainStats {
            epochs: PROBE_EPOCHS,
            lr: PROBE_LR,
            final_accuracy: correct as f64 / n,
            final_loss: loss,
            count_a: bank_a.nrows(),
            count_b: bank_b.nrows(),
        },
    })
}

/// Keeps cells with `z = w.x + b > 0`, each scaled by `z`.
pub fn contrast_cells(acts: &Array4<f64>, plane: &Hyperplane) -> Result<Array2<f64>> {
    let (bn, c, h, w) = acts.dim();
    if c != plane.w.len() {
        return Err(Error::Shape(format!("activations have {c} channels, probe has {}", plane.w.len())));
    }
    let mut rows = Vec::new();
    let mut kept = 0;
    for bi in 0..bn {
        for i in 0..h {
            for j in 0..w {
                let x = acts.slice(s![bi, .., i, j]);
                let z = plane.decision(x);
                if z > 0.0 {
                    rows.extend(x.iter().map(|v| v * z));
                    kept += 1;
                }
            }
        }
    }
    Ok(Array2::from_shape_vec((kept, c), rows).unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub layer: String,
    pub n: usize,
    pub method: AttributionMethod,
    pub max_images: usize,
    pub min_images: usize,
    pub nmf: NmfOptions,
    pub seed: u64,
}

impl ContrastConfig {
    pub fn new(layer: impl Into<String>) -> Self {
        let c = crate::concepts::ConceptConfig::new(layer);
        ContrastConfig {
            layer: c.layer,
            n: c.n,
            method: c.method,
            max_images: c.max_images,
            min_images: c.min_images,
            nmf: c.nmf,
            seed: c.seed,
        }
    }
}

/// Concepts of `plane.class_a` that speak for A against B.
pub fn contrast_concepts(
    model: &ModelHandle,
    dataset: &Dataset,
    plane: &Hyperplane,
    cfg: &ContrastConfig,
) -> Result<ConceptBasis> {
    let layer = model.layer(&cfg.layer)?.clone();
    let batch = collect_class_images(model, dataset, plane.class_a, cfg.max_images, cfg.min_images)?;
    let acts = model.forward_to_layer(&layer.name, &batch.images)?;
    let matrix = contrast_cells(&acts, plane)?;
    if matrix.nrows() == 0 {
        return Err(Error::DegenerateContrast { class_a: plane.class_a, class_b: plane.class_b });
    }
    factorize(
        &matrix,
        plane.class_a,
        layer,
        ConceptSource::Contrast { versus: plane.class_b },
        batch.len(),
        cfg.n,
        cfg.seed,
        cfg.nmf,
        persist::fingerprint(&(cfg, &model.fingerprint(), plane.class_a, plane.class_b, &plane.w, plane.b)),
    )
}

/// Ten evenly spaced offsets up to three times the mean L2 norm of the
/// activation cells in `acts`.
pub fn offset_schedule(acts: &Array4<f64>) -> Vec<f64> {
    let (b, _, h, w) = acts.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                total += acts.slice(s![bi, .., i, j]).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
    }
    let mean = total / (b * h * w).max(1) as f64;
    let top = OFFSET_SCALE * mean;
    (1..=OFFSET_COUNT).map(|k| k as f64 / OFFSET_COUNT as f64 * top).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub class_a: usize,
    pub class_b: usize,
    pub layer: String,
    pub image_count: usize,
    pub offsets: Vec<f64>,
    /// Mean class-A softmax at each offset.
    pub pred_curve: Vec<f64>,
    pub default_pred: f64,
    pub shifted_pred: f64,
    pub best_offset: f64,
}

/// Moves every activation cell of `images` along the unit probe normal by
/// each offset and records the mean class-A softmax of the resumed pass.
pub fn shifting_test(
    model: &ModelHandle,
    layer: &str,
    plane: &Hyperplane,
    images: &Array4<f64>,
    offsets: &[f64],
) -> Result<ShiftResult> {
    model.check_class(plane.class_a)?;
    if offsets.is_empty() {
        return Err(Error::Invalid("at least one offset is required".into()));
    }
    if images.dim().0 == 0 {
        return Err(Error::Invalid("no images to shift".into()));
    }
    let norm = plane.w().dot(&plane.w()).sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateHyperplane);
    }
    let acts = model.forward_to_layer(layer, images)?;
    if acts.dim().1 != plane.w.len() {
        return Err(Error::Shape(format!(
            "layer `{layer}` has {} channels, probe has {}",
            acts.dim().1,
            plane.w.len()
        )));
    }
    let unit = plane.w().mapv(|v| v / norm);
    let mean_a = |a: &Array4<f64>| -> Result<f64> {
        let p = softmax_rows(&model.forward_from_layer(layer, a)?);
        Ok(p.column(plane.class_a).mean().unwrap())
    };
    let default_pred = mean_a(&acts)?;
    let mut pred_curve = Vec::with_capacity(offsets.len());
    for &t in offsets {
        let mut shifted = acts.clone();
        for (ci, mut ch) in shifted.axis_iter_mut(Axis(1)).enumerate() {
            let d = t * unit[ci];
            ch.mapv_inplace(|v| v + d);
        }
        pred_curve.push(mean_a(&shifted)?);
    }
    let (best, &shifted_pred) =
        pred_curve.iter().enumerate().fold((0, &pred_curve[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    Ok(ShiftResult {
        class_a: plane.class_a,
        class_b: plane.class_b,
        layer: layer.to_string(),
        image_count: images.dim().0,
        offsets: offsets.to_vec(),
        pred_curve,
        default_pred,
        shifted_pred,
        best_offset: offsets[best],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionReport {
    pub classes: Vec<usize>,
    pub image_count: usize,
    /// Patch side per image; `None` means a third of the shorter side.
    pub patch_side: Option<usize>,
    /// Mean softmax per entry of `classes`.
    pub original: Vec<f64>,
    pub inserted: Vec<f64>,
    pub black: Vec<f64>,
}

/// Side of the default patch for an `h x w` image.
pub fn default_patch_side(h: usize, w: usize) -> usize {
    h.min(w) / 3
}

/// Normalized copies of `image` with `patch` (raw, resized to `side`) and
/// with normalized zeros written into the bottom-right `side x side` box.
pub fn insert_patch(
    model: &ModelHandle,
    image: &Array3<f64>,
    patch: &Array3<f64>,
    side: usize,
) -> Result<(Array3<f64>, Array3<f64>, Array3<f64>)> {
    let (_, h, w) = image.dim();
    if side > h || side > w {
        return Err(Error::PatchSize { patch_h: side, patch_w: side, image_h: h, image_w: w });
    }
    let original = model.normalize(image.view());
    let mut inserted = original.clone();
    let mut black = original.clone();
    if side > 0 {
        let p = if patch.dim() == (3, side, side) { patch.clone() } else { resize_bilinear(patch.view(), side, side) };
        let p = model.normalize(p.view());
        inserted.slice_mut(s![.., h - side.., w - side..]).assign(&p);
        black.slice_mut(s![.., h - side.., w - side..]).fill(0.0);
    }
    Ok((original, inserted, black))
}

/// Mean class probabilities for original, patched and blacked-out images.
pub fn patch_insertion_test(
    model: &ModelHandle,
    images: &[Array3<f64>],
    patch: &Array3<f64>,
    patch_side: Option<usize>,
    classes: &[usize],
) -> Result<InsertionReport> {
    for &c in classes {
        model.check_class(c)?;
    }
    if images.is_empty() {
        return Err(Error::Invalid("no images for the insertion test".into()));
    }
    if patch.dim().0 != 3 {
        return Err(Error::Shape("patch must have 3 channels".into()));
    }
    let mut sums = [vec![0.0; classes.len()], vec![0.0; classes.len()], vec![0.0; classes.len()]];
    for img in images {
        let (_, h, w) = img.dim();
        let side = patch_side.unwrap_or_else(|| default_patch_side(h, w));
        let (o, i, b) = insert_patch(model, img, patch, side)?;
        for (acc, x) in sums.iter_mut().zip([o, i, b]) {
            let x = model.prepare(x).0.insert_axis(Axis(0));
            let p = softmax_rows(&model.forward_full(&x)?);
            for (k, &c) in classes.iter().enumerate() {
                acc[k] += p[[0, c]];
            }
        }
    }
    let n = images.len() as f64;
    let [original, inserted, black] = sums.map(|v| v.into_iter().map(|s| s / n).collect::<Vec<_>>());
    Ok(InsertionReport { classes: classes.to_vec(), image_count: images.len(), patch_side, original, inserted, black })
}

/// Writes `insertion.json` and before/after PNGs of the first image.
pub fn save_insertion(
    dir: &Path,
    model: &ModelHandle,
    report: &InsertionReport,
    first: &Array3<f64>,
    patch: &Array3<f64>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    persist::write_json(&dir.join("insertion.json"), report)?;
    let (_, h, w) = first.dim();
    let side = report.patch_side.unwrap_or_else(|| default_patch_side(h, w));
    let (o, i, b) = insert_patch(model, first, patch, side)?;
    for (name, x) in [("original", o), ("inserted", i), ("black", b)] {
        let raw = model.denormalize(x.view()).mapv(|v| v.clamp(0.0, 1.0));
        to_rgb_image(raw.view()).save(dir.join(format!("{name}.png")))?;
    }
    Ok(())
}
