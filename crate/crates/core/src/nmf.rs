//! Non-negative matrix factorization `V ~ W H` by Lee-Seung multiplicative
//! updates on the Frobenius objective.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfOptions {
    pub max_iter: usize,
    /// Stop once the relative error improves by less than this fraction.
    pub tol: f64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions { max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL }
    }
}

#[derive(Clone, Debug)]
pub struct NmfFit {
    /// `(n, C)` basis vectors, one concept per row.
    pub basis: Array2<f64>,
    /// `(P, n)` per-row coefficients.
    pub embeddings: Array2<f64>,
    pub iterations: usize,
    /// `||V - WH||_F / ||V||_F` after the last iteration.
    pub final_rel_error: f64,
    /// Relative error at initialization followed by one entry per iteration.
    pub error_trace: Vec<f64>,
}

/// Factorizes non-negative `v` (`P x C`) into `n` components.
///
/// `W` rows are initialized from a hash of the matching row of `v` and the
/// seed, `H` from the seed alone, both uniform in `(0, 1]` scaled by
/// `sqrt(mean(v) / n)`. Permuting the rows of `v` therefore permutes `W`
/// and leaves `H` unchanged up to summation order.
pub fn nmf_fit(v: ArrayView2<f64>, n: usize, seed: u64, opts: NmfOptions) -> Result<NmfFit> {
    let (p, c) = v.dim();
    for ((r, col), &x) in v.indexed_iter() {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::NegativeInput { row: r, col, value: x });
        }
    }
    if n == 0 || n > p.min(c) {
        return Err(Error::Rank { n, max: p.min(c) });
    }
    let mean = v.mean().unwrap_or(0.0);
    if mean <= 0.0 {
        return Err(Error::Invalid("cannot factorize an all-zero matrix".into()));
    }
    let scale = (mean / n as f64).sqrt();

    let mut h_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Array2::from_shape_simple_fn((n, c), || (1.0 - h_rng.gen::<f64>()) * scale);
    let mut w = Array2::zeros((p, n));
    for (row, mut w_row) in v.outer_iter().zip(w.outer_iter_mut()) {
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, row));
        w_row.iter_mut().for_each(|x| *x = (1.0 - rng.gen::<f64>()) * scale);
    }

    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel_error = |w: &Array2<f64>, h: &Array2<f64>| {
        let approx = w.dot(h);
        let mut s = 0.0;
        Zip::from(&v).and(&approx).for_each(|&a, &b| s += (a - b) * (a - b));
        s.sqrt() / v_norm
    };

    let mut trace = vec![rel_error(&w, &h)];
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        // H <- H * (W^T V) / (W^T W H)
        let num = w.t().dot(&v);
        let den = w.t().dot(&w).dot(&h);
        multiplicative_step(&mut h, &num, &den);
        // W <- W * (V H^T) / (W H H^T)
        let num = v.dot(&h.t());
        let den = w.dot(&h.dot(&h.t()));
        multiplicative_step(&mut w, &num, &den);

        iterations += 1;
        let err = rel_error(&w, &h);
        let prev = *trace.last().unwrap();
        trace.push(err);
        if prev - err < opts.tol * prev {
            break;
        }
    }

    if let Some(r) = h.axis_iter(Axis(0)).position(|row| row.iter().all(|&x| x == 0.0)) {
        return Err(Error::DegenerateBasis(r));
    }
    Ok(NmfFit { basis: h, embeddings: w, iterations, final_rel_error: *trace.last().unwrap(), error_trace: trace })
}

fn multiplicative_step(x: &mut Array2<f64>, num: &Array2<f64>, den: &Array2<f64>) {
    Zip::from(x).and(num).and(den).for_each(|x, &n, &d| {
        if d > 0.0 {
            *x *= n / d;
        }
    });
}

fn row_seed(seed: u64, row: ArrayView1<f64>) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for x in row.iter() {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
