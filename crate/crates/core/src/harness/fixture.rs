//! Desk-scale stand-in for a pretrained classifier: a synthetic
//! textured-shapes dataset and a small CNN trained on it with Adam.

use std::f64::consts::PI;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{from_rgb_image, Dataset, DatasetItem};
use crate::error::{Error, Result};
use crate::model::network::{LayerSpec, Network, ReluRule};
use crate::model::{softmax_rows, ImageBatch, InputSize, LayerId, ModelHandle, Normalization};

pub const FIXTURE_CLASSES: usize = 10;
pub const FIXTURE_SIDE: usize = 32;
pub const ACCURACY_FLOOR: f64 = 0.80;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Texture value in `[0, 1]` for pattern `kind` at pixel `(y, x)`.
fn pattern(kind: usize, y: f64, x: f64, period: f64, phase: f64) -> f64 {
    let f = 2.0 * PI / period;
    match kind {
        0 => 0.5 + 0.5 * (f * y + phase).sin(),
        1 => 0.5 + 0.5 * (f * x + phase).sin(),
        2 => 0.5 + 0.5 * (f * (x + y) / 2f64.sqrt() + phase).sin(),
        3 => {
            let s = (f * x + phase).sin() * (f * y + phase).sin();
            if s >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            let d = (f * x + phase).cos() * (f * y + phase).cos();
            if d > 0.4 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn inside(shape: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match shape {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        _ => dy.abs() + dx.abs() <= r * 1.2,
    }
}

/// One synthetic image of class `class` (`< 10`), quantized to 8 bits.
///
/// The class decides the texture of the foreground shape (pattern kind,
/// hue, stripe period); the shape itself, its placement, the background and
/// the noise are random.
pub fn synthetic_image(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let kind = class % 5;
    let hue = class as f64 / FIXTURE_CLASSES as f64 + rng.gen_range(-0.02..0.02);
    let bright = hsv(hue, 0.85, 0.95);
    let dark = hsv(hue, 0.9, 0.35);
    let period = if class < 5 { 4.0 } else { 6.0 } * side as f64 / 32.0 * rng.gen_range(0.9..1.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let shape = rng.gen_range(0..3);
    let s = side as f64;
    let r = s * rng.gen_range(0.32..0.45);
    let cy = rng.gen_range(s * 0.35..s * 0.65);
    let cx = rng.gen_range(s * 0.35..s * 0.65);
    let bg_level = rng.gen_range(0.3..0.7);
    let bg_tint = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let noise = Normal::new(0.0, 0.06).unwrap();
    let mut px = Array3::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let rgb = if inside(shape, fy, fx, cy, cx, r) {
                let t = pattern(kind, fy, fx, period, phase);
                [0, 1, 2].map(|c| dark[c] + t * (bright[c] - dark[c]))
            } else {
                [0, 1, 2].map(|c| bg_level + bg_tint[c])
            };
            for c in 0..3 {
                let v = (rgb[c] + noise.sample(rng)).clamp(0.0, 1.0);
                px[[c, y, x]] = (v * 255.0).round() / 255.0;
            }
        }
    }
    px
}

/// `per_class` images of each of the ten classes, interleaved by class so
/// that any prefix is roughly balanced. Ids are `s<index>`.
pub fn synthetic_shapes(per_class: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(per_class * FIXTURE_CLASSES);
    for i in 0..per_class {
        for class in 0..FIXTURE_CLASSES {
            let idx = i * FIXTURE_CLASSES + class;
            items.push(DatasetItem {
                id: format!("s{idx:05}"),
                label: Some(class),
                pixels: synthetic_image(class, side, &mut rng),
            });
        }
    }
    Dataset::new(items).expect("generated ids are unique")
}

/// Converts a folder of class sub-directories (`root/<class>/<image>`) into
/// a labeled dataset, resizing every image to `side x side`. Classes are
/// numbered in sorted directory-name order.
pub fn import_class_folders(root: &Path, side: usize) -> Result<(Dataset, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let mut classes: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut items = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = match image::open(&f) {
                Ok(i) => i,
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    continue;
                }
            };
            let img = img.resize_exact(side as u32, side as u32, FilterType::Triangle).to_rgb8();
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            items.push(DatasetItem { id: format!("{name}_{stem}"), label: Some(label), pixels: from_rgb_image(&img) });
        }
    }
    Ok((Dataset::new(items)?, classes))
}

/// The fixture classifier: three conv/ReLU blocks, global average pooling
/// and a linear head, with all three ReLU outputs cataloged.
pub fn fixture_architecture(num_classes: usize, side: usize) -> (Vec<LayerSpec>, Vec<LayerId>) {
    let conv = |name: &str, i, o| LayerSpec::Conv2d {
        name: name.into(),
        in_channels: i,
        out_channels: o,
        kernel: 3,
        padding: 1,
    };
    let arch = vec![
        conv("conv1", 3, 16),
        LayerSpec::Relu { name: "block1".into() },
        LayerSpec::AvgPool { name: "pool1".into(), size: 2 },
        conv("conv2", 16, 32),
        LayerSpec::Relu { name: "block2".into() },
        LayerSpec::AvgPool { name: "pool2".into(), size: 2 },
        conv("conv3", 32, 32),
        LayerSpec::Relu { name: "block3".into() },
        LayerSpec::GlobalAvgPool { name: "gap".into() },
        LayerSpec::Linear { name: "fc".into(), in_features: 32, out_features: num_classes },
    ];
    let catalog = ["block1", "block2", "block3"]
        .iter()
        .map(|n| LayerId { name: n.to_string(), post_relu: true, receptive_crop: side / 3 })
        .collect();
    (arch, catalog)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training stops early once train accuracy reaches this value.
    pub stop_accuracy: f64,
    pub model_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
            stop_accuracy: 0.97,
            model_id: "fixture-cnn".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_accuracy: f64,
    pub loss_trace: Vec<f64>,
    pub accuracy_trace: Vec<f64>,
}

fn labels_of(dataset: &Dataset) -> Result<(Vec<usize>, usize)> {
    let labels = dataset
        .items()
        .iter()
        .map(|it| it.label.ok_or_else(|| Error::Invalid(format!("item `{}` has no label", it.id))))
        .collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, classes))
}

fn normalized(model: &ModelHandle, dataset: &Dataset, idx: &[usize]) -> Result<Array4<f64>> {
    let imgs: Vec<_> = idx.iter().map(|&i| model.normalize(dataset.items()[i].pixels.view())).collect();
    Ok(ImageBatch::from_images(&imgs, vec![String::new(); imgs.len()])?.images)
}

/// Fraction of items whose majority class equals their label.
pub fn train_accuracy(model: &ModelHandle, dataset: &Dataset) -> Result<f64> {
    let (labels, _) = labels_of(dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0;
    for chunk in all.chunks(256) {
        let preds = model.predict(&normalized(model, dataset, chunk)?)?;
        correct += chunk.iter().zip(preds).filter(|(&i, p)| labels[i] == *p).count();
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network) -> Self {
        let zeros: Vec<_> = net.zero_grads().into_iter().map(|g| (g.weight, g.bias)).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, net: &mut Network, grads: &[crate::model::network::ParamGrad], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (w, b)) in net.params_mut().enumerate() {
            let g = &grads[k];
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            update(w, &g.weight, mw, vw, lr, c1, c2);
            update(b, &g.bias, mb, vb, lr, c1, c2);
        }
    }
}

fn update<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = Adam::B1 * *m + (1.0 - Adam::B1) * g;
        *v = Adam::B2 * *v + (1.0 - Adam::B2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Adam::EPS);
    });
}

/// Trains the fixture architecture on a labeled dataset with softmax
/// cross-entropy and Adam, failing if train accuracy ends below 0.8.
/// Deterministic for a fixed seed.
pub fn train_fixture_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelHandle, TrainReport)> {
    let (model, report) = fit_fixture_model(dataset, cfg)?;
    if report.final_accuracy < ACCURACY_FLOOR {
        return Err(Error::Fixture { accuracy: report.final_accuracy, floor: ACCURACY_FLOOR });
    }
    Ok((model, report))
}

/// The training loop without the accuracy floor.
pub fn fit_fixture_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelHandle, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let (labels, num_classes) = labels_of(dataset)?;
    let (_, h, w) = dataset.items()[0].pixels.dim();
    let (arch, catalog) = fixture_architecture(num_classes, h.min(w));
    let net = Network::init(&arch, cfg.seed)?;
    let mut model = ModelHandle::new(
        &cfg.model_id,
        arch.clone(),
        net,
        InputSize::Flexible { reference: (h, w) },
        num_classes,
        Normalization::default(),
        catalog.clone(),
    )?;
    let mut net = model.network().clone();
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report =
        TrainReport { epochs_run: 0, final_accuracy: 0.0, loss_trace: Vec::new(), accuracy_trace: Vec::new() };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = normalized(&model, dataset, chunk)?;
            let trace = net.forward_trace(&x, 0, net.len())?;
            let logits = trace.last().unwrap().clone().into_shape_with_order((chunk.len(), num_classes)).unwrap();
            let probs = softmax_rows(&logits);
            let mut g = probs.clone();
            for (r, &i) in chunk.iter().enumerate() {
                loss_sum -= probs[[r, labels[i]]].max(1e-300).ln();
                g[[r, labels[i]]] -= 1.0;
            }
            g /= chunk.len() as f64;
            let mut grads = net.zero_grads();
            let g4 = g.into_shape_with_order((chunk.len(), num_classes, 1, 1)).unwrap();
            net.backward_range(&trace, 0, g4, ReluRule::Gradient, Some(&mut grads))?;
            adam.step(&mut net, &grads, cfg.lr);
        }
        model = ModelHandle::new(
            &cfg.model_id,
            arch.clone(),
            net.clone(),
            InputSize::Flexible { reference: (h, w) },
            num_classes,
            Normalization::default(),
            catalog.clone(),
        )?;
        let acc = train_accuracy(&model, dataset)?;
        report.epochs_run = epoch + 1;
        report.final_accuracy = acc;
        report.loss_trace.push(loss_sum / dataset.len() as f64);
        report.accuracy_trace.push(acc);
        log::info!("epoch {}: loss {:.4}, train accuracy {:.3}", epoch + 1, loss_sum / dataset.len() as f64, acc);
        if acc >= cfg.stop_accuracy {
            break;
        }
    }
    Ok((model, report))
}

/// Mean over the batch axis of softmax outputs; handy for reports.
pub fn mean_softmax(model: &ModelHandle, x: &Array4<f64>) -> Result<Array1<f64>> {
    Ok(softmax_rows(&model.forward_full(x)?).mean_axis(Axis(0)).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_dataset_is_seeded_and_quantized() {
        let a = synthetic_shapes(2, 32, 5);
        let b = synthetic_shapes(2, 32, 5);
        assert_eq!(a.len(), 20);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), synthetic_shapes(2, 32, 6).fingerprint());
        let labels: Vec<_> = a.items().iter().take(10).map(|i| i.label.unwrap()).collect();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        for it in a.items() {
            assert!(it.pixels.iter().all(|&v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
        }
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap().fingerprint(), a.fingerprint());
    }

    #[test]
    fn class_folders_are_imported_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, name) in ["zebra", "apple"].iter().enumerate() {
            std::fs::create_dir_all(dir.path().join(name)).unwrap();
            let img = crate::dataset::to_rgb_image(synthetic_image(k, 20, &mut rng).view());
            img.save(dir.path().join(name).join("a.png")).unwrap();
        }
        let (ds, classes) = import_class_folders(dir.path(), 12).unwrap();
        assert_eq!(classes, vec!["apple", "zebra"]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.get("zebra_a").unwrap().label, Some(1));
        assert_eq!(ds.items()[0].pixels.dim(), (3, 12, 12));
    }

    #[test]
    fn short_training_is_deterministic() {
        let ds = synthetic_shapes(3, 16, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, stop_accuracy: 2.0, ..TrainConfig::default() };
        let run = |cfg: &TrainConfig| {
            let (m, r) = fit_fixture_model(&ds, cfg).unwrap();
            assert_eq!(r.epochs_run, 2);
            assert!(r.loss_trace.iter().all(|l| l.is_finite()));
            m.network().params()
        };
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn unlabeled_items_are_rejected() {
        let mut items = synthetic_shapes(1, 16, 1).items().to_vec();
        items[3].label = None;
        let ds = Dataset::new(items).unwrap();
        assert!(matches!(train_fixture_model(&ds, &TrainConfig::default()), Err(Error::Invalid(_))));
    }
}
