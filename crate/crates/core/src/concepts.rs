//! Per-class concept extraction: collect images predicted as the class,
//! weight their hidden-layer cells by positive attribution, and factorize
//! the weighted cells with NMF.

use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, channel_mean_score, AttributionMap, AttributionMethod};
use crate::dataset::{Dataset, DatasetItem};
use crate::error::{Error, Result};
use crate::model::{ImageBatch, LayerId, ModelHandle};
use crate::nmf::{nmf_fit, NmfOptions};
use crate::persist;

pub const DEFAULT_MAX_IMAGES: usize = 500;
pub const DEFAULT_MIN_IMAGES: usize = 50;
pub const DEFAULT_N: usize = 4;

/// Where one row of an activation matrix came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub source_id: String,
    pub cell_row: usize,
    pub cell_col: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct ScoredActivations {
    /// `(P, C)`, non-negative.
    pub matrix: Array2<f64>,
    pub provenance: Vec<CellProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub final_rel_error: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

/// How the factorized cells were selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConceptSource {
    /// Cells weighted by positive attribution toward the class.
    Attribution { method: AttributionMethod },
    /// Cells weighted by `max(w.x + b, 0)` of a probe against `versus`.
    Contrast { versus: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub class_id: usize,
    pub layer: LayerId,
    pub n: usize,
    pub source: ConceptSource,
    pub image_count: usize,
    pub retained_cells: usize,
    pub solver: SolverDiagnostics,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBasis {
    pub meta: BasisMeta,
    /// `(n, C)` non-negative concept vectors.
    pub basis: Array2<f64>,
}

impl ConceptBasis {
    pub fn class_id(&self) -> usize {
        self.meta.class_id
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    /// Writes `<stem>.npy` (basis) and `<stem>.json` (metadata).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        persist::write_npy(&dir.join(format!("{stem}.npy")), self.basis.view())?;
        persist::write_json(&dir.join(format!("{stem}.json")), &self.meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: BasisMeta = persist::read_json(&dir.join(format!("{stem}.json")))?;
        let basis = persist::read_npy(&dir.join(format!("{stem}.npy")))?;
        if basis.nrows() != meta.n {
            return Err(Error::Shape(format!("basis file has {} rows, sidecar says n = {}", basis.nrows(), meta.n)));
        }
        Ok(ConceptBasis { meta, basis })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub layer: String,
    pub n: usize,
    pub method: AttributionMethod,
    pub max_images: usize,
    pub min_images: usize,
    pub nmf: NmfOptions,
    pub seed: u64,
}

impl ConceptConfig {
    pub fn new(layer: impl Into<String>) -> Self {
        ConceptConfig {
            layer: layer.into(),
            n: DEFAULT_N,
            method: AttributionMethod::default(),
            max_images: DEFAULT_MAX_IMAGES,
            min_images: DEFAULT_MIN_IMAGES,
            nmf: NmfOptions::default(),
            seed: 0,
        }
    }
}

/// Normalizes dataset items into one batch.
pub fn batch_of(model: &ModelHandle, items: &[&DatasetItem]) -> Result<ImageBatch> {
    let imgs: Vec<_> = items.iter().map(|it| model.normalize(it.pixels.view())).collect();
    ImageBatch::from_images(&imgs, items.iter().map(|it| it.id.clone()).collect())
}

/// The first `max_images` images, in dataset order, whose majority class is
/// `class_id`. Ground-truth labels are not consulted.
pub fn collect_class_images(
    model: &ModelHandle,
    dataset: &Dataset,
    class_id: usize,
    max_images: usize,
    min_images: usize,
) -> Result<ImageBatch> {
    model.check_class(class_id)?;
    if max_images == 0 {
        return Err(Error::Invalid("max_images must be at least 1".into()));
    }
    let mut picked: Vec<&DatasetItem> = Vec::new();
    for chunk in dataset.items().chunks(64) {
        let refs: Vec<&DatasetItem> = chunk.iter().collect();
        let preds = model.predict(&batch_of(model, &refs)?.images)?;
        for (item, pred) in chunk.iter().zip(preds) {
            if pred == class_id && picked.len() < max_images {
                picked.push(item);
            }
        }
        if picked.len() >= max_images {
            break;
        }
    }
    if picked.len() < min_images.max(1) {
        return Err(Error::InsufficientSamples { class: class_id, found: picked.len(), min: min_images.max(1) });
    }
    batch_of(model, &picked)
}

/// Keeps cells with positive attribution, each scaled by its attribution.
pub fn score_and_filter_activations(
    acts: &Array4<f64>,
    attrib: &AttributionMap,
    source_ids: &[String],
) -> Result<ScoredActivations> {
    let (b, c, h, w) = acts.dim();
    if attrib.values.dim() != (b, h, w) || source_ids.len() != b {
        return Err(Error::Shape(format!(
            "activations {:?}, attribution {:?}, {} ids",
            acts.dim(),
            attrib.values.dim(),
            source_ids.len()
        )));
    }
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let score = attrib.values[[bi, i, j]];
                if score > 0.0 {
                    rows.extend((0..c).map(|ci| acts[[bi, ci, i, j]] * score));
                    provenance.push(CellProvenance {
                        source_id: source_ids[bi].clone(),
                        cell_row: i,
                        cell_col: j,
                        score,
                    });
                }
            }
        }
    }
    if provenance.is_empty() {
        return Err(Error::EmptyActivations);
    }
    let matrix = Array2::from_shape_vec((provenance.len(), c), rows).unwrap();
    Ok(ScoredActivations { matrix, provenance })
}

/// Attribution-weighted cells of the images predicted as `class_id`,
/// together with the number of images they came from.
pub fn class_scored_activations(
    model: &ModelHandle,
    dataset: &Dataset,
    class_id: usize,
    cfg: &ConceptConfig,
) -> Result<(ScoredActivations, usize)> {
    let layer = model.layer(&cfg.layer)?.clone();
    let batch = collect_class_images(model, dataset, class_id, cfg.max_images, cfg.min_images)?;
    let acts = model.forward_to_layer(&layer.name, &batch.images)?;
    let raw = attribute(&cfg.method, model, &layer.name, &batch, class_id, cfg.seed)?;
    let map = channel_mean_score(&raw, class_id, &layer.name, cfg.method.clone());
    let scored = score_and_filter_activations(&acts, &map, &batch.source_ids)?;
    log::debug!("class {class_id}: {} images, {} cells retained", batch.len(), scored.matrix.nrows());
    Ok((scored, batch.len()))
}

/// NMF over already scored cells; `cfg` must be the configuration that
/// produced them.
pub fn concepts_from_scored(
    model: &ModelHandle,
    scored: &ScoredActivations,
    image_count: usize,
    class_id: usize,
    cfg: &ConceptConfig,
) -> Result<ConceptBasis> {
    factorize(
        &scored.matrix,
        class_id,
        model.layer(&cfg.layer)?.clone(),
        ConceptSource::Attribution { method: cfg.method.clone() },
        image_count,
        cfg.n,
        cfg.seed,
        cfg.nmf,
        persist::fingerprint(&(cfg, &model.fingerprint(), class_id)),
    )
}

/// Runs collection, scoring and NMF for one class.
pub fn extract_class_concepts(
    model: &ModelHandle,
    dataset: &Dataset,
    class_id: usize,
    cfg: &ConceptConfig,
) -> Result<ConceptBasis> {
    let (scored, images) = class_scored_activations(model, dataset, class_id, cfg)?;
    concepts_from_scored(model, &scored, images, class_id, cfg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn factorize(
    matrix: &Array2<f64>,
    class_id: usize,
    layer: LayerId,
    source: ConceptSource,
    image_count: usize,
    n: usize,
    seed: u64,
    nmf: NmfOptions,
    config_fingerprint: String,
) -> Result<ConceptBasis> {
    let fit = nmf_fit(matrix.view(), n, seed, nmf)?;
    Ok(ConceptBasis {
        meta: BasisMeta {
            class_id,
            layer,
            n,
            source,
            image_count,
            retained_cells: matrix.nrows(),
            solver: SolverDiagnostics {
                iterations: fit.iterations,
                final_rel_error: fit.final_rel_error,
                seed,
                max_iter: nmf.max_iter,
                tol: nmf.tol,
            },
            config_fingerprint,
        },
        basis: fit.basis,
    })
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_model, InputSize};
    use ndarray::{Array1, Array3};

    fn map(values: Array3<f64>) -> AttributionMap {
        AttributionMap { values, target_class: 0, layer: "l".into(), method: AttributionMethod::default() }
    }

    fn acts() -> Array4<f64> {
        Array4::from_shape_fn((2, 3, 2, 2), |(b, c, i, j)| (1 + b + c + i * 2 + j) as f64)
    }

    fn ids() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn all_negative_attribution_is_empty() {
        let r = score_and_filter_activations(&acts(), &map(Array3::from_elem((2, 2, 2), -1.0)), &ids());
        assert!(matches!(r, Err(Error::EmptyActivations)));
        let r = score_and_filter_activations(&acts(), &map(Array3::zeros((2, 2, 2))), &ids());
        assert!(matches!(r, Err(Error::EmptyActivations)));
    }

    #[test]
    fn unit_attribution_keeps_raw_cells() {
        let a = acts();
        let s = score_and_filter_activations(&a, &map(Array3::ones((2, 2, 2))), &ids()).unwrap();
        assert_eq!(s.matrix.nrows(), 8);
        for (row, p) in s.matrix.outer_iter().zip(&s.provenance) {
            let b = ids().iter().position(|x| *x == p.source_id).unwrap();
            for c in 0..3 {
                assert_eq!(row[c], a[[b, c, p.cell_row, p.cell_col]]);
            }
        }
    }

    #[test]
    fn single_cell_is_scaled() {
        let a = acts();
        let mut v = Array3::from_elem((2, 2, 2), -0.5);
        v[[1, 0, 1]] = 2.0;
        let s = score_and_filter_activations(&a, &map(v), &ids()).unwrap();
        assert_eq!(s.matrix.nrows(), 1);
        let expected: Vec<f64> = (0..3).map(|c| 2.0 * a[[1, c, 0, 1]]).collect();
        assert_eq!(s.matrix.row(0).to_vec(), expected);
        assert_eq!(s.provenance[0].source_id, "b");
    }

    fn toy_dataset(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| DatasetItem {
                id: format!("img{i:03}"),
                label: None,
                pixels: Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                    (((i * 13 + c * 7 + y * 3 + x * (i % 5 + 1)) % 17) as f64) / 16.0
                }),
            })
            .collect();
        Dataset::new(items).unwrap()
    }

    #[test]
    fn collected_images_are_predicted_as_class() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let ds = toy_dataset(90);
        let counts = {
            let refs: Vec<_> = ds.items().iter().collect();
            let preds = model.predict(&batch_of(&model, &refs).unwrap().images).unwrap();
            let mut c = [0usize; 3];
            preds.iter().for_each(|&p| c[p] += 1);
            c
        };
        let class = (0..3).max_by_key(|&k| counts[k]).unwrap();
        let batch = collect_class_images(&model, &ds, class, 5, 1).unwrap();
        assert_eq!(batch.len(), 5.min(counts[class]));
        let preds = model.predict(&batch.images).unwrap();
        assert!(preds.iter().all(|&p| p == class));
        let never = (0..3).find(|&k| counts[k] == 0);
        if let Some(k) = never {
            assert!(matches!(collect_class_images(&model, &ds, k, 5, 1), Err(Error::InsufficientSamples { .. })));
        }
        assert!(matches!(collect_class_images(&model, &ds, class, 500, 1000), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn extraction_is_deterministic_and_single_concept_is_dominant_direction() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let ds = toy_dataset(60);
        let refs: Vec<_> = ds.items().iter().collect();
        let preds = model.predict(&batch_of(&model, &refs).unwrap().images).unwrap();
        let class = preds[0];
        let mut cfg = ConceptConfig::new("block2");
        cfg.min_images = 1;
        cfg.n = 1;
        cfg.nmf = NmfOptions { max_iter: 2000, tol: 1e-12 };
        let a = extract_class_concepts(&model, &ds, class, &cfg).unwrap();
        let b = extract_class_concepts(&model, &ds, class, &cfg).unwrap();
        assert_eq!(a, b);

        // Rank-1 oracle: dominant right singular vector by power iteration.
        let batch = collect_class_images(&model, &ds, class, 500, 1).unwrap();
        let acts = model.forward_to_layer("block2", &batch.images).unwrap();
        let raw = attribute(&cfg.method, &model, "block2", &batch, class, 0).unwrap();
        let m = channel_mean_score(&raw, class, "block2", cfg.method.clone());
        let v = score_and_filter_activations(&acts, &m, &batch.source_ids).unwrap().matrix;
        let gram = v.t().dot(&v);
        let mut x = Array1::from_elem(gram.nrows(), 1.0);
        for _ in 0..500 {
            x = gram.dot(&x);
            let nrm = x.dot(&x).sqrt();
            x /= nrm;
        }
        let h = a.basis.row(0);
        let cos = h.dot(&x) / h.dot(&h).sqrt();
        assert!(cos > 0.999, "cosine to dominant direction {cos}");
    }

    #[test]
    fn basis_persistence_roundtrip() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let basis = ConceptBasis {
            meta: BasisMeta {
                class_id: 1,
                layer: model.layer("block1").unwrap().clone(),
                n: 2,
                source: ConceptSource::Contrast { versus: 2 },
                image_count: 3,
                retained_cells: 10,
                solver: SolverDiagnostics { iterations: 5, final_rel_error: 0.1, seed: 1, max_iter: 200, tol: 1e-4 },
                config_fingerprint: "abc".into(),
            },
            basis: Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 / 3.0),
        };
        let dir = tempfile::tempdir().unwrap();
        basis.save(dir.path(), "c1").unwrap();
        assert_eq!(ConceptBasis::load(dir.path(), "c1").unwrap(), basis);
    }
}
