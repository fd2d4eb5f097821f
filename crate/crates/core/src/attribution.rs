//! Hidden-layer attribution of a class logit: gradient x activation,
//! DeepLift (rescale rule) and SmoothGrad averaging, plus the channel-mean
//! reduction to one signed score per spatial cell.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageBatch, ModelHandle};
use crate::seed::rng_for;

pub const SMOOTHGRAD_SAMPLES: usize = 20;
pub const SMOOTHGRAD_SIGMA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
#[derive(Default)]
pub enum AttributionMethod {
    #[default]
    GradTimesActivation,
    DeepLiftRescale,
    /// Mean of `inner` over noisy copies of the (normalized) input.
    SmoothGrad {
        inner: Box<AttributionMethod>,
        samples: usize,
        sigma: f64,
    },
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributionMethod::GradTimesActivation => f.write_str("grad_x_act"),
            AttributionMethod::DeepLiftRescale => f.write_str("deeplift"),
            AttributionMethod::SmoothGrad { inner, samples, sigma } => {
                write!(f, "smoothgrad:{inner}:{samples}:{sigma}")
            }
        }
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ParseMethod(s.to_string());
        match s {
            "grad_x_act" => return Ok(AttributionMethod::GradTimesActivation),
            "deeplift" => return Ok(AttributionMethod::DeepLiftRescale),
            "smoothgrad" => {
                return Ok(AttributionMethod::SmoothGrad {
                    inner: Box::new(AttributionMethod::GradTimesActivation),
                    samples: SMOOTHGRAD_SAMPLES,
                    sigma: SMOOTHGRAD_SIGMA,
                })
            }
            _ => {}
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["smoothgrad", inner, n, sigma] => {
                let inner: AttributionMethod = inner.parse().map_err(|_| bad())?;
                if matches!(inner, AttributionMethod::SmoothGrad { .. }) {
                    return Err(bad());
                }
                let samples: usize = n.parse().map_err(|_| bad())?;
                let sigma: f64 = sigma.parse().map_err(|_| bad())?;
                if samples == 0 || !(sigma >= 0.0) {
                    return Err(bad());
                }
                Ok(AttributionMethod::SmoothGrad { inner: Box::new(inner), samples, sigma })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for AttributionMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttributionMethod> for String {
    fn from(m: AttributionMethod) -> String {
        m.to_string()
    }
}

/// Signed per-cell attribution, `(batch, h, w)`.
#[derive(Clone, Debug)]
pub struct AttributionMap {
    pub values: Array3<f64>,
    pub target_class: usize,
    pub layer: String,
    pub method: AttributionMethod,
}

/// The all-white image (1.0 per channel) after normalization.
pub fn white_baseline(model: &ModelHandle, height: usize, width: usize) -> Array3<f64> {
    model.normalize(Array3::ones((3, height, width)).view())
}

/// `d logit[target] / d act * act` at `layer`, `(batch, C, h, w)`.
pub fn grad_times_activation(
    model: &ModelHandle,
    layer: &str,
    images: &Array4<f64>,
    target: usize,
) -> Result<Array4<f64>> {
    let acts = model.forward_to_layer(layer, images)?;
    let grad = model.logit_gradient(layer, &acts, target)?;
    Ok(grad * &acts)
}

/// DeepLift rescale attribution of `logit[target](x) - logit[target](baseline)`
/// to the activations at `layer`. `baseline` is one normalized image of the
/// same size as the inputs; `None` means the white image.
pub fn deeplift_rescale(
    model: &ModelHandle,
    layer: &str,
    images: &Array4<f64>,
    target: usize,
    baseline: Option<&Array3<f64>>,
) -> Result<Array4<f64>> {
    let (b, _, h, w) = images.dim();
    let default;
    let baseline = match baseline {
        Some(x) => x,
        None => {
            default = white_baseline(model, h, w);
            &default
        }
    };
    if baseline.dim() != (3, h, w) {
        return Err(Error::Shape(format!("baseline {:?} does not match input (3, {h}, {w})", baseline.dim())));
    }
    let acts = model.forward_to_layer(layer, images)?;
    let base_one = model.forward_to_layer(layer, &baseline.view().insert_axis(Axis(0)).to_owned())?;
    let base = base_one
        .broadcast(acts.raw_dim())
        .ok_or_else(|| Error::Shape("baseline activations do not broadcast".into()))?
        .to_owned();
    debug_assert_eq!(base.dim().0, b);
    let mult = model.deeplift_multipliers(layer, &acts, &base, target)?;
    Ok(mult * (acts - base))
}

/// Mean of `inner` over `samples` copies of each image with `N(0, sigma^2)`
/// noise added in normalized input space. Each image draws from its own
/// stream seeded by `(seed, source_id)`.
#[allow(clippy::too_many_arguments)]
pub fn smoothgrad(
    inner: &AttributionMethod,
    model: &ModelHandle,
    layer: &str,
    batch: &ImageBatch,
    target: usize,
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<Array4<f64>> {
    if samples == 0 {
        return Err(Error::Invalid("smoothgrad needs at least one sample".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("smoothgrad sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return attribute(inner, model, layer, batch, target, seed);
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rngs: Vec<_> = batch.source_ids.iter().map(|id| rng_for(seed, id)).collect();
    let mut acc: Option<Array4<f64>> = None;
    for _ in 0..samples {
        let mut noisy = batch.images.clone();
        for (mut img, rng) in noisy.outer_iter_mut().zip(rngs.iter_mut()) {
            img.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        let noisy = ImageBatch::new(noisy, batch.source_ids.clone())?;
        let a = attribute(inner, model, layer, &noisy, target, seed)?;
        match acc.as_mut() {
            None => acc = Some(a),
            Some(s) => *s += &a,
        }
    }
    Ok(acc.unwrap() / samples as f64)
}

/// Raw `(batch, C, h, w)` attribution for any method.
pub fn attribute(
    method: &AttributionMethod,
    model: &ModelHandle,
    layer: &str,
    batch: &ImageBatch,
    target: usize,
    seed: u64,
) -> Result<Array4<f64>> {
    model.check_class(target)?;
    match method {
        AttributionMethod::GradTimesActivation => grad_times_activation(model, layer, &batch.images, target),
        AttributionMethod::DeepLiftRescale => deeplift_rescale(model, layer, &batch.images, target, None),
        AttributionMethod::SmoothGrad { inner, samples, sigma } => {
            smoothgrad(inner, model, layer, batch, target, *samples, *sigma, seed)
        }
    }
}

/// Mean over the channel axis. No clamping; consumers apply their own rule.
pub fn channel_mean_score(
    raw: &Array4<f64>,
    target_class: usize,
    layer: &str,
    method: AttributionMethod,
) -> AttributionMap {
    let values = raw.mean_axis(Axis(1)).unwrap_or_else(|| Array3::zeros((raw.dim().0, raw.dim().2, raw.dim().3)));
    AttributionMap { values, target_class, layer: layer.to_string(), method }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::{LayerSpec, Network};
    use crate::model::{toy_model, InputSize, LayerId, Normalization};
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(b: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 3, h, w), || rng.gen_range(-2.0..2.0))
    }

    fn batch(x: Array4<f64>) -> ImageBatch {
        let ids = (0..x.dim().0).map(|i| format!("img{i}")).collect();
        ImageBatch::new(x, ids).unwrap()
    }

    /// conv -> relu ("feat") -> GAP -> linear, with the linear head set by hand.
    fn linear_head_model(head: &[[f64; 4]; 2]) -> ModelHandle {
        let arch = vec![
            LayerSpec::Conv2d { name: "conv".into(), in_channels: 3, out_channels: 4, kernel: 3, padding: 1 },
            LayerSpec::Relu { name: "feat".into() },
            LayerSpec::GlobalAvgPool { name: "gap".into() },
            LayerSpec::Linear { name: "fc".into(), in_features: 4, out_features: 2 },
        ];
        let mut net = Network::init(&arch, 3).unwrap();
        let (w, b) = net.params_mut().nth(1).unwrap();
        for (k, row) in head.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                w[[k, c]] = *v;
            }
        }
        *b = Array1::from(vec![0.3, -0.2]);
        ModelHandle::new(
            "linear-head",
            arch,
            net,
            InputSize::Flexible { reference: (6, 6) },
            2,
            Normalization::default(),
            vec![LayerId { name: "feat".into(), post_relu: true, receptive_crop: 2 }],
        )
        .unwrap()
    }

    #[test]
    fn method_strings_roundtrip() {
        for s in ["grad_x_act", "deeplift", "smoothgrad:deeplift:20:0.25", "smoothgrad:grad_x_act:3:0"] {
            let m: AttributionMethod = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        let m: AttributionMethod = "smoothgrad".parse().unwrap();
        assert_eq!(m.to_string(), "smoothgrad:grad_x_act:20:0.25");
        for bad in ["", "ig", "smoothgrad:x:1:1", "smoothgrad:deeplift:0:1", "smoothgrad:deeplift:2:-1"] {
            assert!(bad.parse::<AttributionMethod>().is_err(), "{bad}");
        }
    }

    #[test]
    fn linear_head_matches_closed_form() {
        let head = [[0.5, -1.25, 2.0, 0.75], [1.0, 1.0, -0.5, 0.0]];
        let model = linear_head_model(&head);
        let x = images(2, 5, 6, 1);
        let acts = model.forward_to_layer("feat", &x).unwrap();
        let hw = 30.0;
        for (target, row) in head.iter().enumerate() {
            let attr = grad_times_activation(&model, "feat", &x, target).unwrap();
            for ((b, c, i, j), &v) in attr.indexed_iter() {
                let expected = row[c] * acts[[b, c, i, j]] / hw;
                assert!((v - expected).abs() <= 1e-5, "{v} vs {expected}");
            }
        }
    }

    #[test]
    fn zero_activations_give_zero_attribution() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let acts = Array4::<f64>::zeros((1, 6, 3, 3));
        let g = model.logit_gradient("block2", &acts, 1).unwrap();
        assert!((g * &acts).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let x = images(1, 8, 8, 4);
        let eps = 1e-3;
        for layer in ["block1", "block2"] {
            let acts = model.forward_to_layer(layer, &x).unwrap();
            for target in 0..3 {
                let g = model.logit_gradient(layer, &acts, target).unwrap();
                let (_, c, h, w) = acts.dim();
                let mut rng = ChaCha8Rng::seed_from_u64(target as u64);
                for _ in 0..5 {
                    let idx = (0, rng.gen_range(0..c), rng.gen_range(0..h), rng.gen_range(0..w));
                    let mut up = acts.clone();
                    up[idx] += eps;
                    let l0 = model.forward_from_layer(layer, &acts).unwrap()[[0, target]];
                    let l1 = model.forward_from_layer(layer, &up).unwrap()[[0, target]];
                    let predicted = g[idx] * eps;
                    let rel = (l1 - l0 - predicted).abs() / predicted.abs().max(1e-12);
                    assert!(rel <= 1e-2 || (l1 - l0 - predicted).abs() < 1e-12, "{layer} {idx:?}: {rel}");
                }
            }
        }
    }

    #[test]
    fn deeplift_without_tail_nonlinearity_is_gradient_times_delta() {
        let model = linear_head_model(&[[0.5, -1.0, 2.0, 0.1], [0.3, 0.2, -0.4, 1.0]]);
        let x = images(3, 6, 6, 2);
        let attr = deeplift_rescale(&model, "feat", &x, 0, None).unwrap();
        let acts = model.forward_to_layer("feat", &x).unwrap();
        let base = white_baseline(&model, 6, 6).insert_axis(Axis(0));
        let base_acts = model.forward_to_layer("feat", &base).unwrap();
        let g = model.logit_gradient("feat", &acts, 0).unwrap();
        for ((b, c, i, j), &v) in attr.indexed_iter() {
            let expected = g[[b, c, i, j]] * (acts[[b, c, i, j]] - base_acts[[0, c, i, j]]);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn deeplift_completeness() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let x = images(4, 8, 8, 7);
        let base = white_baseline(&model, 8, 8);
        let l_x = model.forward_full(&x).unwrap();
        let l_b = model.forward_full(&base.view().insert_axis(Axis(0)).to_owned()).unwrap();
        for target in 0..3 {
            let attr = deeplift_rescale(&model, "block1", &x, target, None).unwrap();
            for b in 0..4 {
                let total = attr.index_axis(Axis(0), b).sum();
                let delta = l_x[[b, target]] - l_b[[0, target]];
                assert!((total - delta).abs() / delta.abs() <= 1e-4, "{total} vs {delta}");
            }
        }
    }

    #[test]
    fn deeplift_of_baseline_is_zero() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let base = white_baseline(&model, 8, 8).insert_axis(Axis(0)).to_owned();
        let attr = deeplift_rescale(&model, "block1", &base, 2, None).unwrap();
        assert!(attr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothgrad_sigma_zero_is_inner() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let b = batch(images(2, 8, 8, 3));
        let inner = grad_times_activation(&model, "block2", &b.images, 1).unwrap();
        let sg = smoothgrad(&AttributionMethod::GradTimesActivation, &model, "block2", &b, 1, 20, 0.0, 9).unwrap();
        assert_eq!(inner, sg);
    }

    #[test]
    fn smoothgrad_single_sample_is_inner_on_perturbed_input() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let b = batch(images(2, 8, 8, 5));
        let sg = smoothgrad(&AttributionMethod::DeepLiftRescale, &model, "block1", &b, 0, 1, 0.3, 42).unwrap();
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut noisy = b.images.clone();
        for (mut img, id) in noisy.outer_iter_mut().zip(&b.source_ids) {
            let mut rng = rng_for(42, id);
            img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let direct = deeplift_rescale(&model, "block1", &noisy, 0, None).unwrap();
        assert_eq!(sg, direct);
    }

    #[test]
    fn smoothgrad_variance_shrinks_with_samples() {
        let model = toy_model(InputSize::Flexible { reference: (8, 8) });
        let b = batch(images(1, 8, 8, 8));
        let m = AttributionMethod::GradTimesActivation;
        let spread = |n: usize| {
            let runs: Vec<Array4<f64>> =
                (0..40).map(|s| smoothgrad(&m, &model, "block2", &b, 0, n, 0.5, 1000 + s).unwrap()).collect();
            let mean = runs.iter().fold(Array4::<f64>::zeros(runs[0].raw_dim()), |a, r| a + r) / runs.len() as f64;
            runs.iter().map(|r| (r - &mean).mapv(|v| v * v).sum()).sum::<f64>() / runs.len() as f64
        };
        let ratio = spread(1) / spread(8);
        assert!((4.0..16.0).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn channel_mean_cases() {
        let k = Array4::from_elem((2, 3, 2, 2), 1.5);
        let m = channel_mean_score(&k, 0, "l", AttributionMethod::default());
        assert!(m.values.iter().all(|&v| v == 1.5));
        let mut sym = Array4::zeros((1, 2, 3, 3));
        sym.index_axis_mut(Axis(1), 0).fill(1.0);
        sym.index_axis_mut(Axis(1), 1).fill(-1.0);
        let m = channel_mean_score(&sym, 0, "l", AttributionMethod::default());
        assert!(m.values.iter().all(|&v| v == 0.0));
        let raw = images(3, 5, 4, 12).into_shape_with_order((3, 5, 4, 3)).unwrap();
        let m = channel_mean_score(&raw, 0, "l", AttributionMethod::default());
        for b in 0..3 {
            for i in 0..4 {
                for j in 0..3 {
                    let brute: f64 = (0..5).map(|c| raw[[b, c, i, j]]).sum::<f64>() / 5.0;
                    assert!((m.values[[b, i, j]] - brute).abs() <= 1e-7);
                }
            }
        }
    }
}
