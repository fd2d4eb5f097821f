//! Dataset-crop index: every image cut into a 3x3 grid, each crop embedded
//! by its spatial-mean activation at one layer, queried by exact cosine
//! similarity.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::unit_rows;
use crate::dataset::{crop, BBox, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, ImageBatch, LayerId, ModelHandle};
use crate::persist;

pub const GRID: usize = 3;

/// Which crops may be returned when visualizing a concept of class `target`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    None,
    /// The crop itself is not predicted as the target.
    CropNotTarget,
    /// Neither the crop nor its source image is predicted as the target.
    #[default]
    CropAndImageNotTarget,
}

impl Exclusion {
    pub fn admits(&self, rec: &CropRecord, target: usize) -> bool {
        match self {
            Exclusion::None => true,
            Exclusion::CropNotTarget => rec.crop_pred != target,
            Exclusion::CropAndImageNotTarget => rec.crop_pred != target && rec.image_pred != target,
        }
    }
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exclusion::None => "none",
            Exclusion::CropNotTarget => "crop",
            Exclusion::CropAndImageNotTarget => "strict",
        })
    }
}

impl FromStr for Exclusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Exclusion::None),
            "crop" | "crop_not_target" => Ok(Exclusion::CropNotTarget),
            "strict" | "crop_and_image_not_target" => Ok(Exclusion::CropAndImageNotTarget),
            _ => Err(Error::Invalid(format!("unknown exclusion mode `{s}` (none | crop | strict)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub source_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub bbox: BBox,
    pub crop_pred: usize,
    pub image_pred: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub model_id: String,
    pub model_fingerprint: String,
    pub layer: LayerId,
    pub crop_side: usize,
    pub dataset_fingerprint: String,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct CropIndex {
    pub manifest: IndexManifest,
    records: Vec<CropRecord>,
    /// `(N, C)` spatial-mean activations.
    embeddings: Array2<f64>,
    /// Row-normalized copy of `embeddings`; zero rows stay zero.
    unit: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub hits: Vec<Hit>,
    /// Fewer than `k` records passed the exclusion filter.
    pub short: bool,
}

/// Grid boxes for an `h x w` image: side `floor(min(h, w) / 3)`, cells
/// anchored at `floor(k * h / 3)` and `floor(k * w / 3)`.
pub fn grid_boxes(h: usize, w: usize) -> Vec<(usize, usize, BBox)> {
    let side = h.min(w) / GRID;
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        for c in 0..GRID {
            out.push((r, c, BBox { x: c * w / GRID, y: r * h / GRID, width: side, height: side }));
        }
    }
    out
}

impl CropIndex {
    pub fn from_parts(manifest: IndexManifest, records: Vec<CropRecord>, embeddings: Array2<f64>) -> Result<Self> {
        if records.len() != embeddings.nrows() || manifest.count != records.len() {
            return Err(Error::Shape(format!(
                "{} records, {} embedding rows, manifest count {}",
                records.len(),
                embeddings.nrows(),
                manifest.count
            )));
        }
        let unit = unit_rows(&embeddings);
        Ok(CropIndex { manifest, records, embeddings, unit })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CropRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &CropRecord {
        &self.records[i]
    }

    pub fn embedding(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn unit_embeddings(&self) -> &Array2<f64> {
        &self.unit
    }

    /// The `k` records most cosine-similar to `v` among those admitted by
    /// `exclusion`, best first; ties go to the lower record index.
    pub fn topk_crops(&self, v: ArrayView1<f64>, k: usize, exclusion: Exclusion, target: usize) -> Result<TopK> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if v.len() != self.unit.ncols() {
            return Err(Error::Shape(format!("query has {} channels, index has {}", v.len(), self.unit.ncols())));
        }
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Invalid("query vector must be non-zero and finite".into()));
        }
        let scores: Array1<f64> = self.unit.dot(&v) / norm;
        let mut cand: Vec<Hit> = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| exclusion.admits(&self.records[*i], target))
            .map(|(index, &cosine)| Hit { index, cosine })
            .collect();
        let order = |a: &Hit, b: &Hit| b.cosine.total_cmp(&a.cosine).then(a.index.cmp(&b.index));
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_by(order);
        let short = cand.len() < k;
        if short {
            log::warn!("only {} crops pass the {exclusion} filter for class {target}", cand.len());
        }
        Ok(TopK { hits: cand, short })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        persist::write_npy(&dir.join("embeddings.npy"), self.embeddings.view())?;
        persist::write_json(&dir.join("manifest.json"), &self.manifest)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("records.jsonl"))?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: IndexManifest = persist::read_json(&dir.join("manifest.json"))?;
        let embeddings = persist::read_npy(&dir.join("embeddings.npy"))?;
        let f = BufReader::new(fs::File::open(dir.join("records.jsonl"))?);
        let mut records = Vec::with_capacity(manifest.count);
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        CropIndex::from_parts(manifest, records, embeddings)
    }
}

/// Cuts every image into 9 crops, forwards each crop on its own (resized
/// first if the model has a fixed input size), and records its
/// spatial-mean embedding and predictions.
pub fn build_crop_index(model: &ModelHandle, dataset: &Dataset, layer: &str) -> Result<CropIndex> {
    let layer = model.layer(layer)?.clone();
    if dataset.is_empty() {
        return Err(Error::Build("dataset is empty".into()));
    }
    let channels = model.layer_channels(&layer.name)?;
    type Rows = Vec<(CropRecord, Vec<f64>)>;
    let per_image: Vec<Result<Rows>> = dataset
        .items()
        .par_iter()
        .map(|item| -> Result<Rows> {
            let (_, h, w) = item.pixels.dim();
            let boxes = grid_boxes(h, w);
            if boxes[0].2.width == 0 {
                return Err(Error::Build(format!("image `{}` ({h}x{w}) is too small for a 3x3 grid", item.id)));
            }
            let full = model.prepare(model.normalize(item.pixels.view())).0.insert_axis(Axis(0));
            let image_pred = model.predict(&full)?[0];
            let crops: Vec<_> = boxes
                .iter()
                .map(|(_, _, b)| model.prepare(model.normalize(crop(item.pixels.view(), *b).view())).0)
                .collect();
            let batch = ImageBatch::from_images(&crops, vec![item.id.clone(); crops.len()])?;
            let acts = model.forward_to_layer(&layer.name, &batch.images)?;
            let logits = model.forward_from_layer(&layer.name, &acts)?;
            let emb = acts
                .mean_axis(Axis(3))
                .and_then(|a| a.mean_axis(Axis(2)))
                .ok_or_else(|| Error::Build("empty activation map".into()))?;
            Ok(boxes
                .iter()
                .enumerate()
                .map(|(i, (r, c, b))| {
                    (
                        CropRecord {
                            source_id: item.id.clone(),
                            grid_row: *r,
                            grid_col: *c,
                            bbox: *b,
                            crop_pred: argmax(logits.row(i).as_slice().unwrap()),
                            image_pred,
                        },
                        emb.row(i).to_vec(),
                    )
                })
                .collect())
        })
        .collect();
    let mut records = Vec::with_capacity(dataset.len() * GRID * GRID);
    let mut flat = Vec::with_capacity(dataset.len() * GRID * GRID * channels);
    for rows in per_image {
        for (rec, emb) in rows? {
            records.push(rec);
            flat.extend(emb);
        }
    }
    let embeddings = Array2::from_shape_vec((records.len(), channels), flat).unwrap();
    let manifest = IndexManifest {
        model_id: model.model_id.clone(),
        model_fingerprint: model.fingerprint(),
        crop_side: records[0].bbox.width,
        layer,
        dataset_fingerprint: dataset.fingerprint(),
        count: records.len(),
    };
    CropIndex::from_parts(manifest, records, embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetItem;
    use crate::model::{toy_model, InputSize};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| DatasetItem {
                id: format!("d{i}"),
                label: None,
                pixels: Array3::from_shape_fn((3, 12, 13), |(c, y, x)| {
                    (((i * 11 + c * 5 + y * (1 + i % 3) + x) % 9) as f64) / 8.0
                }),
            })
            .collect();
        Dataset::new(items).unwrap()
    }

    fn random_index(n: usize, c: usize, seed: u64) -> CropIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array2::from_shape_fn((n, c), |(i, _)| if i % 97 == 5 { 0.0 } else { rng.gen::<f64>() });
        let records = (0..n)
            .map(|i| CropRecord {
                source_id: format!("s{}", i / 9),
                grid_row: (i % 9) / 3,
                grid_col: i % 3,
                bbox: BBox { x: 0, y: 0, width: 4, height: 4 },
                crop_pred: rng.gen_range(0..5),
                image_pred: rng.gen_range(0..5),
            })
            .collect();
        let layer = LayerId { name: "l".into(), post_relu: true, receptive_crop: 4 };
        let manifest = IndexManifest {
            model_id: "m".into(),
            model_fingerprint: "f".into(),
            layer,
            crop_side: 4,
            dataset_fingerprint: "x".into(),
            count: n,
        };
        CropIndex::from_parts(manifest, records, emb).unwrap()
    }

    /// Independent scan: cosine from raw embeddings, full sort.
    fn brute(index: &CropIndex, v: &Array1<f64>, k: usize, ex: Exclusion, t: usize) -> Vec<usize> {
        let vn = v.dot(v).sqrt();
        let mut all: Vec<(usize, f64)> = (0..index.len())
            .filter(|&i| ex.admits(index.record(i), t))
            .map(|i| {
                let e = index.embedding(i);
                let en = e.dot(&e).sqrt();
                let cos = if en == 0.0 { 0.0 } else { e.dot(v) / (en * vn) };
                (i, cos)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn grid_geometry() {
        let b = grid_boxes(224, 224);
        assert_eq!(b.len(), 9);
        assert_eq!(b[0].2.width, 74);
        assert_eq!(b[8].2, BBox { x: 149, y: 149, width: 74, height: 74 });
        for (_, _, bb) in grid_boxes(32, 40) {
            assert!(bb.x + bb.width <= 40 && bb.y + bb.height <= 32);
        }
    }

    #[test]
    fn build_counts_and_self_similarity() {
        let model = toy_model(InputSize::Flexible { reference: (12, 12) });
        let ds = dataset(5);
        let idx = build_crop_index(&model, &ds, "block2").unwrap();
        assert_eq!(idx.len(), 45);
        assert_eq!(idx.manifest.crop_side, 4);
        for i in 0..idx.len() {
            let u = idx.unit_embeddings().row(i);
            let n = u.dot(&u);
            if idx.embedding(i).iter().any(|&x| x != 0.0) {
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        let rec = idx.record(13).clone();
        let preds = model
            .predict(&model.normalize(ds.get(&rec.source_id).unwrap().pixels.view()).insert_axis(Axis(0)))
            .unwrap();
        assert_eq!(rec.image_pred, preds[0]);
    }

    #[test]
    fn identical_crops_share_embeddings() {
        let model = toy_model(InputSize::Flexible { reference: (12, 12) });
        let mut items = dataset(2).items().to_vec();
        items[1].pixels = items[0].pixels.clone();
        let ds = Dataset::new(items).unwrap();
        let idx = build_crop_index(&model, &ds, "block1").unwrap();
        for k in 0..9 {
            assert_eq!(idx.embedding(k), idx.embedding(9 + k));
        }
    }

    #[test]
    fn empty_dataset_fails() {
        let model = toy_model(InputSize::Flexible { reference: (12, 12) });
        let ds = Dataset::new(vec![]).unwrap();
        assert!(matches!(build_crop_index(&model, &ds, "block1"), Err(Error::Build(_))));
    }

    #[test]
    fn exact_match_is_first_with_cosine_one() {
        let idx = random_index(300, 6, 1);
        let v = idx.embedding(42).to_owned();
        let top = idx.topk_crops(v.view(), 1, Exclusion::None, 0).unwrap();
        assert_eq!(top.hits[0].index, 42);
        assert!((top.hits[0].cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exclusion_is_respected_and_short_results_flagged() {
        let idx = random_index(300, 6, 2);
        let v = Array1::from_elem(6, 1.0);
        let top = idx.topk_crops(v.view(), 20, Exclusion::CropNotTarget, 3).unwrap();
        assert!(top.hits.iter().all(|h| idx.record(h.index).crop_pred != 3));
        let strict = idx.topk_crops(v.view(), 20, Exclusion::CropAndImageNotTarget, 3).unwrap();
        assert!(strict.hits.iter().all(|h| idx.record(h.index).crop_pred != 3 && idx.record(h.index).image_pred != 3));
        let all = idx.topk_crops(v.view(), 10_000, Exclusion::CropNotTarget, 3).unwrap();
        assert!(all.short);
        assert!(!top.short);
        assert!(idx.topk_crops(Array1::zeros(6).view(), 1, Exclusion::None, 0).is_err());
        assert!(idx.topk_crops(v.view(), 0, Exclusion::None, 0).is_err());
    }

    #[test]
    fn persistence_is_bit_exact() {
        let idx = random_index(50, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = CropIndex::load(dir.path()).unwrap();
        assert_eq!(back.records(), idx.records());
        assert_eq!(back.manifest, idx.manifest);
        for (a, b) in idx.embeddings().iter().zip(back.embeddings().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn topk_equals_brute_force(seed in any::<u64>(), k in 1usize..12, t in 0usize..5, mode in 0usize..3) {
            let idx = random_index(400, 5, 77);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array1::from_shape_simple_fn(5, || rng.gen::<f64>() + 1e-3);
            let ex = [Exclusion::None, Exclusion::CropNotTarget, Exclusion::CropAndImageNotTarget][mode];
            let got: Vec<usize> = idx.topk_crops(v.view(), k, ex, t).unwrap().hits.iter().map(|h| h.index).collect();
            prop_assert_eq!(got, brute(&idx, &v, k, ex, t));
        }
    }
}
