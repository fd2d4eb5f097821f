//! Pairwise contrast runs on a workspace: probe training with an on-disk
//! cache, contrast explanations and shifting sweeps.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::concepts::collect_class_images;
use crate::contrast::{
    collect_hyperplane_pixels, contrast_concepts, offset_schedule, shifting_test, train_hyperplane, ContrastConfig,
    Hyperplane, ShiftResult,
};
use crate::error::{Error, Result};
use crate::explain::{explain_basis, ExplainOutput};
use crate::persist;
use crate::seed::rng_for;

use super::plot;
use super::suite::write_csv;
use super::workspace::Workspace;

/// For every class in `classes`, up to `per_class` distinct other classes
/// drawn without replacement from a seeded stream.
pub fn sample_contrast_pairs(classes: &[usize], per_class: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng_for(seed, "contrast-pairs");
    let mut out = Vec::new();
    for &a in classes {
        let mut others: Vec<usize> = classes.iter().copied().filter(|&b| b != a).collect();
        others.shuffle(&mut rng);
        out.extend(others.into_iter().take(per_class).map(|b| (a, b)));
    }
    out
}

impl Workspace {
    pub fn contrast_config(&self, layer: &str, n: usize) -> ContrastConfig {
        let c = self.config.concept_config(layer, n, self.config.max_images);
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

    fn probe_fingerprint(&self, a: usize, b: usize, layer: &str) -> String {
        let c = &self.config;
        persist::fingerprint(&(
            self.model.fingerprint(),
            self.dataset.fingerprint(),
            layer,
            &c.method,
            c.max_images,
            c.min_images,
            c.seed,
            a,
            b,
        ))
    }

    /// The probe separating `a` (label 1) from `b` (label 0) at `layer`,
    /// loaded from `out_dir/probes` when an identical configuration was
    /// trained before.
    pub fn probe(&self, a: usize, b: usize, layer: &str) -> Result<Hyperplane> {
        if a == b {
            return Err(Error::Invalid(format!("cannot contrast class {a} with itself")));
        }
        let dir = self.config.out_dir.join("probes").join(layer);
        let stem = format!("probe_{a}_{b}");
        let fp = self.probe_fingerprint(a, b, layer);
        if let Some(h) = Hyperplane::load(&dir, &stem, &fp)? {
            return Ok(h);
        }
        let c = &self.config;
        let min = c.min_images.min(c.max_images);
        let bank =
            |k| collect_hyperplane_pixels(&self.model, &self.dataset, k, layer, &c.method, c.max_images, min, c.seed);
        let (bank_a, bank_b) = (bank(a)?, bank(b)?);
        let h = train_hyperplane(bank_a.vectors.view(), bank_b.vectors.view(), a, b)?;
        log::info!(
            "probe {a} vs {b} at {layer}: accuracy {:.3} on {}+{} cells",
            h.train_stats.final_accuracy,
            h.train_stats.count_a,
            h.train_stats.count_b
        );
        h.save(&dir, &stem, &fp)?;
        Ok(h)
    }

    /// Contrast concepts of `a` against `b`, visualized and stitch-tested
    /// like an ordinary explanation.
    pub fn contrast_explanation(
        &self,
        a: usize,
        b: usize,
        layer: &str,
        n: usize,
    ) -> Result<(Hyperplane, ExplainOutput)> {
        let plane = self.probe(a, b, layer)?;
        let basis = contrast_concepts(&self.model, &self.dataset, &plane, &self.contrast_config(layer, n))?;
        let index = self.index(layer)?;
        let out = explain_basis(&self.model, &self.dataset, &index, basis, self.config.m, self.config.exclusion)?;
        Ok((plane, out))
    }

    /// Shifting test of the probe `a` vs `b` on images predicted as `b`,
    /// with the default offset schedule.
    pub fn shift(&self, a: usize, b: usize, layer: &str) -> Result<ShiftResult> {
        let plane = self.probe(a, b, layer)?;
        let c = &self.config;
        let batch = collect_class_images(&self.model, &self.dataset, b, c.max_images, c.min_images.min(c.max_images))?;
        let acts = self.model.forward_to_layer(layer, &batch.images)?;
        shifting_test(&self.model, layer, &plane, &batch.images, &offset_schedule(&acts))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub class_a: usize,
    pub class_b: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub default_pred: Option<f64>,
    pub shifted_pred: Option<f64>,
    pub best_offset: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub layer: String,
    pub pairs: Vec<(usize, usize)>,
    pub evaluated: usize,
    /// Pairs whose best shifted prediction beats the unshifted one, over
    /// all requested pairs.
    pub improved_fraction: f64,
    pub mean_default_pred: f64,
    pub mean_shifted_pred: f64,
}

/// Runs the shifting test for every pair, recording failures per pair.
/// Writes `shift.json`, `shift.csv`, `curves.json` and `curves.png` when
/// `out` is given.
pub fn shift_suite(
    ws: &Workspace,
    pairs: &[(usize, usize)],
    layer: &str,
    out: Option<&Path>,
) -> Result<(ShiftSummary, Vec<ShiftResult>)> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut results = Vec::new();
    for &(a, b) in pairs {
        match ws.shift(a, b, layer) {
            Ok(r) => {
                rows.push(ShiftRow {
                    class_a: a,
                    class_b: b,
                    ok: true,
                    error: None,
                    default_pred: Some(r.default_pred),
                    shifted_pred: Some(r.shifted_pred),
                    best_offset: Some(r.best_offset),
                });
                results.push(r);
            }
            Err(e) => {
                log::warn!("shift {a} vs {b}: {e}");
                rows.push(ShiftRow {
                    class_a: a,
                    class_b: b,
                    ok: false,
                    error: Some(e.to_string()),
                    default_pred: None,
                    shifted_pred: None,
                    best_offset: None,
                });
            }
        }
    }
    let mean = |f: fn(&ShiftResult) -> f64| {
        if results.is_empty() {
            0.0
        } else {
            results.iter().map(f).sum::<f64>() / results.len() as f64
        }
    };
    let improved = results.iter().filter(|r| r.shifted_pred > r.default_pred).count();
    let summary = ShiftSummary {
        layer: layer.to_string(),
        pairs: pairs.to_vec(),
        evaluated: results.len(),
        improved_fraction: if pairs.is_empty() { 0.0 } else { improved as f64 / pairs.len() as f64 },
        mean_default_pred: mean(|r| r.default_pred),
        mean_shifted_pred: mean(|r| r.shifted_pred),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        persist::write_json(&dir.join("shift.json"), &summary)?;
        persist::write_json(&dir.join("curves.json"), &results)?;
        write_csv(&dir.join("shift.csv"), &rows)?;
        let series: Vec<Vec<(f64, f64)>> = results
            .iter()
            .map(|r| {
                std::iter::once((0.0, r.default_pred))
                    .chain(r.offsets.iter().copied().zip(r.pred_curve.iter().copied()))
                    .collect()
            })
            .collect();
        plot::line_plot(&series, (0.0, 1.0)).save(dir.join("curves.png"))?;
    }
    Ok((summary, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_seeded_distinct_and_never_self() {
        let classes: Vec<usize> = (0..10).collect();
        let p = sample_contrast_pairs(&classes, 3, 4);
        assert_eq!(p.len(), 30);
        assert_eq!(p, sample_contrast_pairs(&classes, 3, 4));
        assert_ne!(p, sample_contrast_pairs(&classes, 3, 5));
        for a in 0..10 {
            let mut bs: Vec<_> = p.iter().filter(|x| x.0 == a).map(|x| x.1).collect();
            assert!(!bs.contains(&a));
            bs.sort();
            bs.dedup();
            assert_eq!(bs.len(), 3);
        }
        assert_eq!(sample_contrast_pairs(&[1, 2], 5, 0), vec![(1, 2), (2, 1)]);
    }
}
