use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::network::{LayerSpec, Network, ReluRule};
use super::resize::resize_bilinear;
use crate::error::{Error, Result};
use crate::persist;

/// Images per forward chunk; outputs do not depend on it.
const CHUNK: usize = 64;

/// A split point in the model: activations are taken at the output of the
/// network layer with this name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub name: String,
    pub post_relu: bool,
    /// Side in input pixels of the square crop one grid cell corresponds to.
    pub receptive_crop: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InputSize {
    /// Any spatial size is accepted (global pooling head). `reference` is
    /// the nominal training size used to derive crop geometry.
    Flexible { reference: (usize, usize) },
    /// Inputs of another size are bilinearly resized by [`ModelHandle::prepare`].
    Fixed { height: usize, width: usize },
}

impl InputSize {
    pub fn reference(&self) -> (usize, usize) {
        match *self {
            InputSize::Flexible { reference } => reference,
            InputSize::Fixed { height, width } => (height, width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] }
    }
}

/// JSON adapter config. `weights` is resolved relative to the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub model_id: String,
    pub weights: PathBuf,
    pub input_size: InputSize,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub architecture: Vec<LayerSpec>,
    pub layers: Vec<LayerId>,
}

/// Normalized images plus their dataset identifiers.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub images: Array4<f64>,
    pub source_ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(images: Array4<f64>, source_ids: Vec<String>) -> Result<Self> {
        if images.dim().0 != source_ids.len() {
            return Err(Error::Shape(format!(
                "batch holds {} images but {} source ids",
                images.dim().0,
                source_ids.len()
            )));
        }
        Ok(ImageBatch { images, source_ids })
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    /// Stacks equally sized `(3, H, W)` normalized images.
    pub fn from_images(images: &[Array3<f64>], source_ids: Vec<String>) -> Result<Self> {
        if images.is_empty() {
            return ImageBatch::new(Array4::zeros((0, 3, 0, 0)), source_ids);
        }
        let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
        let stacked = concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("images differ in size: {e}")))?;
        ImageBatch::new(stacked, source_ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeApplied {
    None,
    Bilinear { from: (usize, usize), to: (usize, usize) },
}

/// Read-only handle over a layered classifier.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    pub model_id: String,
    pub input_size: InputSize,
    pub num_classes: usize,
    pub normalization: Normalization,
    architecture: Vec<LayerSpec>,
    catalog: Vec<LayerId>,
    network: Network,
    split: HashMap<String, usize>,
    channels: HashMap<String, usize>,
}

impl ModelHandle {
    pub fn new(
        model_id: impl Into<String>,
        architecture: Vec<LayerSpec>,
        network: Network,
        input_size: InputSize,
        num_classes: usize,
        normalization: Normalization,
        catalog: Vec<LayerId>,
    ) -> Result<Self> {
        let mut channels = HashMap::new();
        let mut cur = 3;
        for spec in &architecture {
            match spec {
                LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                    if *in_channels != cur {
                        return Err(Error::Config(format!(
                            "layer `{}` expects {in_channels} channels, previous layer yields {cur}",
                            spec.name()
                        )));
                    }
                    cur = *out_channels;
                }
                LayerSpec::Linear { in_features, out_features, .. } => {
                    if *in_features != cur {
                        return Err(Error::Config(format!(
                            "layer `{}` expects {in_features} features, previous layer yields {cur}",
                            spec.name()
                        )));
                    }
                    cur = *out_features;
                }
                _ => {}
            }
            channels.insert(spec.name().to_string(), cur);
        }
        if cur != num_classes {
            return Err(Error::Config(format!("network outputs {cur} values but num_classes is {num_classes}")));
        }
        if network.len() != architecture.len() {
            return Err(Error::Config("network does not match architecture".into()));
        }
        let mut split = HashMap::new();
        for l in &catalog {
            if l.receptive_crop == 0 {
                return Err(Error::Config(format!("layer `{}` has receptive_crop 0", l.name)));
            }
            let idx = network.position(&l.name).ok_or_else(|| Error::UnknownLayer(l.name.clone()))?;
            if split.insert(l.name.clone(), idx).is_some() {
                return Err(Error::Config(format!("layer `{}` cataloged twice", l.name)));
            }
        }
        Ok(ModelHandle {
            model_id: model_id.into(),
            input_size,
            num_classes,
            normalization,
            architecture,
            catalog,
            network,
            split,
            channels,
        })
    }

    pub fn load(config_path: &Path) -> Result<Self> {
        let cfg: AdapterConfig = persist::read_json(config_path)?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        let weights_path = base.join(&cfg.weights);
        let bytes = fs::read(&weights_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath(weights_path.clone()),
            _ => e.into(),
        })?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Config("weights file is not a whole number of f64".into()));
        }
        let params: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let network = Network::from_params(&cfg.architecture, &params)?;
        ModelHandle::new(
            cfg.model_id,
            cfg.architecture,
            network,
            cfg.input_size,
            cfg.num_classes,
            cfg.normalization,
            cfg.layers,
        )
    }

    /// Writes `<stem>.weights.bin` and `<stem>.json` into `dir`, returning the
    /// config path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let weights_name = format!("{stem}.weights.bin");
        let mut bytes = Vec::with_capacity(self.network.param_count() * 8);
        for v in self.network.params() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&weights_name), bytes)?;
        let cfg = self.config(PathBuf::from(weights_name));
        let path = dir.join(format!("{stem}.json"));
        persist::write_json(&path, &cfg)?;
        Ok(path)
    }

    /// Short hash over the model id, architecture and weights.
    pub fn fingerprint(&self) -> String {
        let mut bytes =
            serde_json::to_vec(&(&self.model_id, &self.architecture, &self.catalog)).expect("config serializes");
        for v in self.network.params() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        persist::fingerprint_bytes(&bytes)
    }

    pub fn config(&self, weights: PathBuf) -> AdapterConfig {
        AdapterConfig {
            model_id: self.model_id.clone(),
            weights,
            input_size: self.input_size,
            num_classes: self.num_classes,
            normalization: self.normalization,
            architecture: self.architecture.clone(),
            layers: self.catalog.clone(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn catalog(&self) -> &[LayerId] {
        &self.catalog
    }

    pub fn layer(&self, name: &str) -> Result<&LayerId> {
        self.catalog.iter().find(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Deepest cataloged layer.
    pub fn deepest_layer(&self) -> &LayerId {
        self.catalog.iter().max_by_key(|l| self.split[&l.name]).expect("catalog is non-empty")
    }

    /// Channel count of a cataloged layer's activations.
    pub fn layer_channels(&self, layer: &str) -> Result<usize> {
        self.split_index(layer)?;
        Ok(self.channels[layer])
    }

    fn split_index(&self, layer: &str) -> Result<usize> {
        self.split.get(layer).copied().ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::ClassOutOfRange { class, num_classes: self.num_classes });
        }
        Ok(())
    }

    /// Raw `[0, 1]` pixels to normalized model input.
    pub fn normalize(&self, raw: ArrayView3<f64>) -> Array3<f64> {
        let mut out = raw.to_owned();
        for c in 0..3 {
            let (m, sd) = (self.normalization.mean[c], self.normalization.std[c]);
            out.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / sd);
        }
        out
    }

    pub fn denormalize(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut out = x.to_owned();
        for c in 0..3 {
            let (m, sd) = (self.normalization.mean[c], self.normalization.std[c]);
            out.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * sd + m);
        }
        out
    }

    /// Applies the model's resize policy to one normalized image.
    pub fn prepare(&self, x: Array3<f64>) -> (Array3<f64>, ResizeApplied) {
        match self.input_size {
            InputSize::Flexible { .. } => (x, ResizeApplied::None),
            InputSize::Fixed { height, width } => {
                let (_, h, w) = x.dim();
                if (h, w) == (height, width) {
                    (x, ResizeApplied::None)
                } else {
                    (
                        resize_bilinear(x.view(), height, width),
                        ResizeApplied::Bilinear { from: (h, w), to: (height, width) },
                    )
                }
            }
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if let InputSize::Fixed { height, width } = self.input_size {
            if (h, w) != (height, width) {
                return Err(Error::Shape(format!("model takes {height}x{width} inputs, got {h}x{w}")));
            }
        }
        Ok(())
    }

    fn chunked<F>(&self, x: &Array4<f64>, f: F) -> Result<Array4<f64>>
    where
        F: Fn(&Array4<f64>) -> Result<Array4<f64>>,
    {
        let b = x.dim().0;
        if b <= CHUNK {
            return f(x);
        }
        let mut parts = Vec::new();
        for start in (0..b).step_by(CHUNK) {
            let end = (start + CHUNK).min(b);
            parts.push(f(&x.slice(s![start..end, .., .., ..]).to_owned())?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).unwrap())
    }

    /// Pre-softmax logits `(batch, num_classes)`.
    pub fn forward_full(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let out = self.chunked(x, |c| self.network.forward_range(c, 0, self.network.len()))?;
        Ok(to_logits(out))
    }

    pub fn forward_to_layer(&self, layer: &str, x: &Array4<f64>) -> Result<Array4<f64>> {
        let idx = self.split_index(layer)?;
        self.check_input(x)?;
        self.chunked(x, |c| self.network.forward_range(c, 0, idx + 1))
    }

    pub fn forward_from_layer(&self, layer: &str, acts: &Array4<f64>) -> Result<Array2<f64>> {
        let idx = self.split_index(layer)?;
        self.check_acts(layer, acts)?;
        let out = self.chunked(acts, |c| self.network.forward_range(c, idx + 1, self.network.len()))?;
        Ok(to_logits(out))
    }

    fn check_acts(&self, layer: &str, acts: &Array4<f64>) -> Result<()> {
        let expected = self.channels[layer];
        if acts.dim().1 != expected {
            return Err(Error::Shape(format!(
                "layer `{layer}` has {expected} channels, activations have {}",
                acts.dim().1
            )));
        }
        Ok(())
    }

    /// `d logit[target] / d acts` through the tail after `layer`.
    pub fn logit_gradient(&self, layer: &str, acts: &Array4<f64>, target: usize) -> Result<Array4<f64>> {
        self.tail_backward(layer, acts, None, target)
    }

    /// DeepLift-rescale multipliers of `logit[target]` with respect to the
    /// activations at `layer`, against reference activations of equal shape.
    pub fn deeplift_multipliers(
        &self,
        layer: &str,
        acts: &Array4<f64>,
        reference: &Array4<f64>,
        target: usize,
    ) -> Result<Array4<f64>> {
        if acts.dim() != reference.dim() {
            return Err(Error::Shape(format!(
                "reference activations {:?} differ from activations {:?}",
                reference.dim(),
                acts.dim()
            )));
        }
        self.tail_backward(layer, acts, Some(reference), target)
    }

    fn tail_backward(
        &self,
        layer: &str,
        acts: &Array4<f64>,
        reference: Option<&Array4<f64>>,
        target: usize,
    ) -> Result<Array4<f64>> {
        let idx = self.split_index(layer)?;
        self.check_class(target)?;
        self.check_acts(layer, acts)?;
        let start = idx + 1;
        let end = self.network.len();
        let run = |a: &Array4<f64>, r: Option<&Array4<f64>>| -> Result<Array4<f64>> {
            let trace = self.network.forward_trace(a, start, end)?;
            let mut g = Array4::zeros(trace.last().unwrap().raw_dim());
            g.slice_mut(s![.., target, .., ..]).fill(1.0);
            match r {
                None => self.network.backward_range(&trace, start, g, ReluRule::Gradient, None),
                Some(r) => {
                    let rtrace = self.network.forward_trace(r, start, end)?;
                    self.network.backward_range(&trace, start, g, ReluRule::Rescale { reference: &rtrace }, None)
                }
            }
        };
        let b = acts.dim().0;
        if b <= CHUNK {
            return run(acts, reference);
        }
        let mut parts = Vec::new();
        for s0 in (0..b).step_by(CHUNK) {
            let e = (s0 + CHUNK).min(b);
            let a = acts.slice(s![s0..e, .., .., ..]).to_owned();
            let r = reference.map(|r| r.slice(s![s0..e, .., .., ..]).to_owned());
            parts.push(run(&a, r.as_ref())?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).unwrap())
    }

    /// Majority class per image.
    pub fn predict(&self, x: &Array4<f64>) -> Result<Vec<usize>> {
        let logits = self.forward_full(x)?;
        Ok(logits.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())).collect())
    }

    /// Softmax probabilities `(batch, num_classes)`.
    pub fn predict_proba(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.forward_full(x)?))
    }
}

fn to_logits(out: Array4<f64>) -> Array2<f64> {
    let (b, k, _, _) = out.dim();
    out.into_shape_with_order((b, k)).unwrap()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

#[cfg(test)]
pub(crate) use tests::toy_model;
