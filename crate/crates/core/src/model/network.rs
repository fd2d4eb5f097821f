//! A small sequential convolutional network with an explicit forward trace
//! and a backward pass that can run either plain gradients or the DeepLift
//! rescale rule through its ReLUs.
//!
//! Every tensor is `(batch, channels, height, width)`; fully connected layers
//! consume and produce `(batch, features, 1, 1)`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { name: String, in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    Relu { name: String },
    AvgPool { name: String, size: usize },
    MaxPool { name: String, size: usize },
    GlobalAvgPool { name: String },
    Linear { name: String, in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::AvgPool { name, .. }
            | LayerSpec::MaxPool { name, .. }
            | LayerSpec::GlobalAvgPool { name }
            | LayerSpec::Linear { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub enum Op {
    Conv2d(Conv2d),
    Relu,
    AvgPool(usize),
    MaxPool(usize),
    GlobalAvgPool,
    Linear(Linear),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::AvgPool(_) => "avg_pool",
            Op::MaxPool(_) => "max_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear(_) => "linear",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub op: Op,
}

/// How the backward pass treats ReLU layers.
#[derive(Clone, Copy)]
pub enum ReluRule<'a> {
    /// Ordinary derivative, `1[x > 0]`.
    Gradient,
    /// DeepLift rescale: `(relu(x) - relu(x0)) / (x - x0)` against a
    /// reference trace covering the same layer range.
    Rescale { reference: &'a [Array4<f64>] },
}

/// Weight/bias gradients for one parameterized layer.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
}

const RESCALE_EPS: f64 = 1e-10;

impl Network {
    /// Builds a network with He-normal weights and zero biases.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let op = match spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, padding, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    Op::Conv2d(Conv2d {
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        padding: *padding,
                        weight: Array2::from_shape_simple_fn((*out_channels, fan_in), || normal.sample(&mut rng)),
                        bias: Array1::zeros(*out_channels),
                    })
                }
                LayerSpec::Linear { in_features, out_features, .. } => {
                    let normal = Normal::new(0.0, (1.0 / *in_features as f64).sqrt()).unwrap();
                    Op::Linear(Linear {
                        weight: Array2::from_shape_simple_fn((*out_features, *in_features), || normal.sample(&mut rng)),
                        bias: Array1::zeros(*out_features),
                    })
                }
                LayerSpec::Relu { .. } => Op::Relu,
                LayerSpec::AvgPool { size, .. } => Op::AvgPool(*size),
                LayerSpec::MaxPool { size, .. } => Op::MaxPool(*size),
                LayerSpec::GlobalAvgPool { .. } => Op::GlobalAvgPool,
            };
            layers.push(Layer { name: spec.name().to_string(), op });
        }
        let net = Network { layers };
        net.check_names()?;
        Ok(net)
    }

    /// Builds a network and fills its parameters from a flat vector in
    /// layer order (weight row-major, then bias).
    pub fn from_params(specs: &[LayerSpec], params: &[f64]) -> Result<Self> {
        let mut net = Network::init(specs, 0)?;
        let expected = net.param_count();
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "weights file holds {} values, architecture needs {expected}",
                params.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in net.params_mut() {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = params[offset];
                offset += 1;
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = Network { layers };
        net.check_names()?;
        Ok(net)
    }

    fn check_names(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name `{}`", l.name)));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.op {
                Op::Conv2d(c) => c.weight.len() + c.bias.len(),
                Op::Linear(c) => c.weight.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Flat parameter vector, the inverse of [`Network::from_params`].
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let (w, b) = match &l.op {
                Op::Conv2d(c) => (&c.weight, &c.bias),
                Op::Linear(c) => (&c.weight, &c.bias),
                _ => continue,
            };
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&mut Array2<f64>, &mut Array1<f64>)> {
        self.layers.iter_mut().filter_map(|l| match &mut l.op {
            Op::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Op::Linear(c) => Some((&mut c.weight, &mut c.bias)),
            _ => None,
        })
    }

    /// Zeroed gradient buffers matching [`Network::params_mut`] order.
    pub fn zero_grads(&self) -> Vec<ParamGrad> {
        self.layers
            .iter()
            .filter_map(|l| match &l.op {
                Op::Conv2d(c) => Some((c.weight.raw_dim(), c.bias.len())),
                Op::Linear(c) => Some((c.weight.raw_dim(), c.bias.len())),
                _ => None,
            })
            .map(|(wd, bl)| ParamGrad { weight: Array2::zeros(wd), bias: Array1::zeros(bl) })
            .collect()
    }

    /// Runs layers `start..end` and returns only the output.
    pub fn forward_range(&self, x: &Array4<f64>, start: usize, end: usize) -> Result<Array4<f64>> {
        let mut cur = x.to_owned();
        for layer in &self.layers[start..end] {
            cur = forward_op(&layer.op, &cur, &layer.name)?;
        }
        Ok(cur)
    }

    /// Runs layers `start..end`, returning the input of every layer followed
    /// by the final output (`end - start + 1` tensors).
    pub fn forward_trace(&self, x: &Array4<f64>, start: usize, end: usize) -> Result<Vec<Array4<f64>>> {
        let mut trace = Vec::with_capacity(end - start + 1);
        trace.push(x.to_owned());
        for layer in &self.layers[start..end] {
            let next = forward_op(&layer.op, trace.last().unwrap(), &layer.name)?;
            trace.push(next);
        }
        Ok(trace)
    }

    /// Propagates `grad_out` from the output of layer `start + trace.len() - 2`
    /// back to the input of layer `start`. Parameter gradients are summed
    /// into `grads` (indexed over all parameterized layers) when given.
    pub fn backward_range(
        &self,
        trace: &[Array4<f64>],
        start: usize,
        grad_out: Array4<f64>,
        rule: ReluRule<'_>,
        mut grads: Option<&mut [ParamGrad]>,
    ) -> Result<Array4<f64>> {
        let end = start + trace.len() - 1;
        let mut param_slot: Vec<Option<usize>> = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            if matches!(l.op, Op::Conv2d(_) | Op::Linear(_)) {
                param_slot.push(Some(k));
                k += 1;
            } else {
                param_slot.push(None);
            }
        }
        let mut g = grad_out;
        for idx in (start..end).rev() {
            let layer = &self.layers[idx];
            let input = &trace[idx - start];
            g = match &layer.op {
                Op::Relu => match rule {
                    ReluRule::Gradient => {
                        let mut out = g;
                        ndarray::Zip::from(&mut out).and(input).for_each(|o, &x| {
                            if x <= 0.0 {
                                *o = 0.0;
                            }
                        });
                        out
                    }
                    ReluRule::Rescale { reference } => {
                        let x0 = &reference[idx - start];
                        let mut out = g;
                        ndarray::Zip::from(&mut out).and(input).and(x0).for_each(|o, &x, &r| {
                            let dx = x - r;
                            let m = if dx.abs() > RESCALE_EPS {
                                (x.max(0.0) - r.max(0.0)) / dx
                            } else if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            };
                            *o *= m;
                        });
                        out
                    }
                },
                Op::MaxPool(size) => {
                    if let ReluRule::Rescale { .. } = rule {
                        return Err(Error::UnsupportedOp { layer: layer.name.clone(), kind: layer.op.kind() });
                    }
                    maxpool_backward(input, &g, *size)
                }
                Op::AvgPool(size) => avgpool_backward(input.dim(), &g, *size),
                Op::GlobalAvgPool => {
                    let (b, c, h, w) = input.dim();
                    let scale = 1.0 / (h * w) as f64;
                    let mut out = Array4::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let v = g[[bi, ci, 0, 0]] * scale;
                            out.slice_mut(s![bi, ci, .., ..]).fill(v);
                        }
                    }
                    out
                }
                Op::Linear(lin) => {
                    let x2 = flatten_features(input, &layer.name)?;
                    let g2 = flatten_features(&g, &layer.name)?;
                    if let Some(gs) = grads.as_deref_mut() {
                        let slot = &mut gs[param_slot[idx].unwrap()];
                        slot.weight += &g2.t().dot(&x2);
                        slot.bias += &g2.sum_axis(Axis(0));
                    }
                    let gin = g2.dot(&lin.weight);
                    let (b, c) = gin.dim();
                    gin.into_shape_with_order((b, c, 1, 1)).unwrap()
                }
                Op::Conv2d(conv) => {
                    let slot = param_slot[idx].unwrap();
                    conv_backward(conv, input, &g, grads.as_deref_mut().map(|gs| &mut gs[slot]))
                }
            };
        }
        Ok(g)
    }
}

fn flatten_features(x: &Array4<f64>, name: &str) -> Result<Array2<f64>> {
    let (b, c, h, w) = x.dim();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!(
            "linear layer `{name}` expects (batch, features, 1, 1), got ({b}, {c}, {h}, {w})"
        )));
    }
    Ok(x.to_shape((b, c)).unwrap().to_owned())
}

fn forward_op(op: &Op, x: &Array4<f64>, name: &str) -> Result<Array4<f64>> {
    let (b, c, h, w) = x.dim();
    match op {
        Op::Relu => Ok(x.mapv(|v| v.max(0.0))),
        Op::AvgPool(size) | Op::MaxPool(size) => {
            let (oh, ow) = (h / size, w / size);
            if oh == 0 || ow == 0 {
                return Err(Error::Shape(format!(
                    "pooling layer `{name}` with window {size} received spatial size {h}x{w}"
                )));
            }
            let is_max = matches!(op, Op::MaxPool(_));
            let mut out = Array4::zeros((b, c, oh, ow));
            let norm = 1.0 / (size * size) as f64;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let win = x.slice(s![bi, ci, oy * size..(oy + 1) * size, ox * size..(ox + 1) * size]);
                            out[[bi, ci, oy, ox]] = if is_max {
                                win.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                win.sum() * norm
                            };
                        }
                    }
                }
            }
            Ok(out)
        }
        Op::GlobalAvgPool => {
            if h == 0 || w == 0 {
                return Err(Error::Shape(format!("`{name}` received an empty spatial map")));
            }
            let mut out = Array4::zeros((b, c, 1, 1));
            for bi in 0..b {
                for ci in 0..c {
                    out[[bi, ci, 0, 0]] = x.slice(s![bi, ci, .., ..]).mean().unwrap();
                }
            }
            Ok(out)
        }
        Op::Linear(lin) => {
            let x2 = flatten_features(x, name)?;
            if x2.ncols() != lin.weight.ncols() {
                return Err(Error::Shape(format!(
                    "linear layer `{name}` expects {} features, got {}",
                    lin.weight.ncols(),
                    x2.ncols()
                )));
            }
            let y = x2.dot(&lin.weight.t()) + &lin.bias;
            let k = y.ncols();
            Ok(y.into_shape_with_order((b, k, 1, 1)).unwrap())
        }
        Op::Conv2d(conv) => {
            if c != conv.in_channels {
                return Err(Error::Shape(format!(
                    "conv layer `{name}` expects {} channels, got {c}",
                    conv.in_channels
                )));
            }
            let oh = (h + 2 * conv.padding + 1).saturating_sub(conv.kernel);
            let ow = (w + 2 * conv.padding + 1).saturating_sub(conv.kernel);
            if oh == 0 || ow == 0 {
                return Err(Error::Shape(format!(
                    "conv layer `{name}` received spatial size {h}x{w}, too small for kernel {}",
                    conv.kernel
                )));
            }
            let per_image: Vec<Array3<f64>> = (0..b)
                .into_par_iter()
                .map(|bi| {
                    let col = im2col(x.index_axis(Axis(0), bi), conv.kernel, conv.padding);
                    let mut y = conv.weight.dot(&col);
                    y += &conv.bias.view().insert_axis(Axis(1));
                    y.into_shape_with_order((conv.out_channels, oh, ow)).unwrap()
                })
                .collect();
            let mut out = Array4::zeros((b, conv.out_channels, oh, ow));
            for (bi, y) in per_image.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), bi).assign(&y);
            }
            Ok(out)
        }
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut col = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, oh * ow), col).unwrap()
}

fn col2im(col: &Array2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let col = col.as_standard_layout();
    let cs = col.as_slice().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).unwrap()
}

fn conv_backward(
    conv: &Conv2d,
    input: &Array4<f64>,
    grad_out: &Array4<f64>,
    grads: Option<&mut ParamGrad>,
) -> Array4<f64> {
    let (b, c, h, w) = input.dim();
    let (_, oc, oh, ow) = grad_out.dim();
    type ImageGrads = (Array3<f64>, Option<(Array2<f64>, Array1<f64>)>);
    let per_image: Vec<ImageGrads> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g = grad_out.index_axis(Axis(0), bi).to_shape((oc, oh * ow)).unwrap().to_owned();
            let dcol = conv.weight.t().dot(&g);
            let gin = col2im(&dcol, c, h, w, conv.kernel, conv.padding);
            let pg = grads.is_some().then(|| {
                let col = im2col(input.index_axis(Axis(0), bi), conv.kernel, conv.padding);
                (g.dot(&col.t()), g.sum_axis(Axis(1)))
            });
            (gin, pg)
        })
        .collect();
    let mut out = Array4::zeros((b, c, h, w));
    let mut grads = grads;
    // Reduction runs in batch order so parameter gradients do not depend on
    // the worker count.
    for (bi, (gin, pg)) in per_image.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&gin);
        if let (Some(slot), Some((gw, gb))) = (grads.as_deref_mut(), pg) {
            slot.weight += &gw;
            slot.bias += &gb;
        }
    }
    out
}

fn avgpool_backward(in_dim: (usize, usize, usize, usize), g: &Array4<f64>, size: usize) -> Array4<f64> {
    let (b, c, _, _) = in_dim;
    let (_, _, oh, ow) = g.dim();
    let norm = 1.0 / (size * size) as f64;
    let mut out = Array4::zeros(in_dim);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = g[[bi, ci, oy, ox]] * norm;
                    out.slice_mut(s![bi, ci, oy * size..(oy + 1) * size, ox * size..(ox + 1) * size]).fill(v);
                }
            }
        }
    }
    out
}

fn maxpool_backward(input: &Array4<f64>, g: &Array4<f64>, size: usize) -> Array4<f64> {
    let (b, c, _, _) = input.dim();
    let (_, _, oh, ow) = g.dim();
    let mut out = Array4::zeros(input.raw_dim());
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * size, ox * size);
                    for y in oy * size..(oy + 1) * size {
                        for x in ox * size..(ox + 1) * size {
                            if input[[bi, ci, y, x]] > input[[bi, ci, best.0, best.1]] {
                                best = (y, x);
                            }
                        }
                    }
                    out[[bi, ci, best.0, best.1]] += g[[bi, ci, oy, ox]];
                }
            }
        }
    }
    out
}
