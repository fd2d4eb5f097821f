//! Per-class explanation suites and the sweeps built from them.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{class_scored_activations, concepts_from_scored, ScoredActivations};
use crate::error::{Error, Result};
use crate::explain::{explain_basis, ExplainOutput, Explanation};
use crate::persist;

use super::plot;
use super::workspace::Workspace;

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellParams {
    pub layer: String,
    pub n: usize,
    pub max_images: usize,
}

impl CellParams {
    pub fn dir_name(&self) -> String {
        format!("{}_n{}_s{}", self.layer, self.n, self.max_images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub softmax_pred_target: Option<f64>,
    pub majority_class: Option<usize>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: String,
    pub n: usize,
    pub max_images: usize,
    pub classes: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub passed: usize,
    /// Mean target softmax over the classes that produced an explanation.
    pub average_pred: f64,
    /// `passed / classes`; classes that failed count as not passed.
    pub match_rate: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub layers: Vec<String>,
    pub n_values: Vec<usize>,
    pub sample_counts: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub rows: Vec<ClassRow>,
    pub cell: SweepCell,
    pub explanations: Vec<Explanation>,
}

type Scored = std::result::Result<Arc<(ScoredActivations, usize)>, String>;

/// Scored activations keyed by `(layer, class, max_images)`, shared across
/// the cells of a sweep since they do not depend on `n`.
#[derive(Default)]
pub struct ScoreCache {
    inner: Mutex<HashMap<(String, usize, usize), Scored>>,
}

impl ScoreCache {
    fn get(&self, ws: &Workspace, cell: &CellParams, class: usize) -> Scored {
        let key = (cell.layer.clone(), class, cell.max_images);
        if let Some(v) = self.inner.lock().unwrap().get(&key) {
            return v.clone();
        }
        let cfg = ws.config.concept_config(&cell.layer, cell.n, cell.max_images);
        let v = class_scored_activations(&ws.model, &ws.dataset, class, &cfg).map(Arc::new).map_err(|e| e.to_string());
        self.inner.lock().unwrap().insert(key, v.clone());
        v
    }
}

/// Aggregates per-class rows into a sweep cell.
pub fn aggregate(cell: &CellParams, rows: &[ClassRow], runtime_s: f64) -> SweepCell {
    let preds: Vec<f64> = rows.iter().filter_map(|r| r.softmax_pred_target).collect();
    let passed = rows.iter().filter(|r| r.passed).count();
    SweepCell {
        layer: cell.layer.clone(),
        n: cell.n,
        max_images: cell.max_images,
        classes: rows.len(),
        evaluated: preds.len(),
        failed: rows.len() - preds.len(),
        passed,
        average_pred: if preds.is_empty() { 0.0 } else { preds.iter().sum::<f64>() / preds.len() as f64 },
        match_rate: if rows.is_empty() { 0.0 } else { passed as f64 / rows.len() as f64 },
        runtime_s,
    }
}

fn explain_one(ws: &Workspace, cell: &CellParams, class: usize, cache: &ScoreCache) -> Result<ExplainOutput> {
    let scored = cache.get(ws, cell, class).map_err(Error::Invalid)?;
    let cfg = ws.config.concept_config(&cell.layer, cell.n, cell.max_images);
    let basis = concepts_from_scored(&ws.model, &scored.0, scored.1, class, &cfg)?;
    let index = ws.index(&cell.layer)?;
    explain_basis(&ws.model, &ws.dataset, &index, basis, ws.config.m, ws.config.exclusion)
}

/// Explains and stitch-tests every configured class for one cell. Failures
/// of single classes are recorded in the rows, never propagated. When `out`
/// is given, per-class artifacts go to `out/class_<k>/` and the cell
/// summary to `out/cell.json` and `out/classes.csv`.
pub fn run_class_suite(
    ws: &Workspace,
    cell: &CellParams,
    out: Option<&Path>,
    cache: &ScoreCache,
) -> Result<SuiteResult> {
    let start = Instant::now();
    let index = ws.index(&cell.layer)?;
    let classes = ws.classes();
    let results: Vec<(ClassRow, Option<Explanation>)> = classes
        .par_iter()
        .map(|&class| match explain_one(ws, cell, class, cache) {
            Ok(o) => {
                if let Some(dir) = out {
                    let d = dir.join(format!("class_{class:04}"));
                    if let Err(e) = o.save(&d, &ws.dataset, index.manifest.crop_side) {
                        log::warn!("could not write artifacts for class {class}: {e}");
                    }
                }
                let s = &o.explanation.stitch;
                (
                    ClassRow {
                        class_id: class,
                        ok: true,
                        error: None,
                        softmax_pred_target: Some(s.softmax_pred_target),
                        majority_class: Some(s.majority_class),
                        passed: s.passed,
                    },
                    Some(o.explanation),
                )
            }
            Err(e) => {
                log::warn!("class {class} at {}: {e}", cell.dir_name());
                (
                    ClassRow {
                        class_id: class,
                        ok: false,
                        error: Some(e.to_string()),
                        softmax_pred_target: None,
                        majority_class: None,
                        passed: false,
                    },
                    None,
                )
            }
        })
        .collect();
    let (rows, explanations): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let explanations: Vec<Explanation> = explanations.into_iter().flatten().collect();
    let summary = aggregate(cell, &rows, start.elapsed().as_secs_f64());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        persist::write_json(&dir.join("cell.json"), &summary)?;
        write_csv(&dir.join("classes.csv"), &rows)?;
    }
    Ok(SuiteResult { rows, cell: summary, explanations })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run_cells(ws: &Workspace, cells: &[CellParams], out: &Path) -> Result<Vec<SweepCell>> {
    let cache = ScoreCache::default();
    let mut done = Vec::with_capacity(cells.len());
    for cell in cells {
        let r = run_class_suite(ws, cell, Some(&out.join(cell.dir_name())), &cache)?;
        log::info!("{}: average pred {:.3}, match rate {:.3}", cell.dir_name(), r.cell.average_pred, r.cell.match_rate);
        done.push(r.cell);
    }
    Ok(done)
}

/// Every `(layer, n)` combination, layer-major.
pub fn grid_search(ws: &Workspace, layers: &[String], n_values: &[usize], out: &Path) -> Result<SweepReport> {
    if layers.is_empty() || n_values.is_empty() {
        return Err(Error::Config("grid search needs at least one layer and one n".into()));
    }
    let cells: Vec<CellParams> = layers
        .iter()
        .flat_map(|l| {
            n_values.iter().map(move |&n| CellParams { layer: l.clone(), n, max_images: ws.config.max_images })
        })
        .collect();
    let report = SweepReport {
        axis: "layer_n".into(),
        layers: layers.to_vec(),
        n_values: n_values.to_vec(),
        sample_counts: vec![ws.config.max_images],
        cells: run_cells(ws, &cells, out)?,
    };
    write_sweep(out, &report)?;
    Ok(report)
}

/// One cell per image budget at a fixed layer and `n`.
pub fn sample_count_sweep(ws: &Workspace, layer: &str, n: usize, counts: &[usize], out: &Path) -> Result<SweepReport> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config("sample counts must be non-empty and positive".into()));
    }
    let cells: Vec<CellParams> =
        counts.iter().map(|&c| CellParams { layer: layer.to_string(), n, max_images: c }).collect();
    let report = SweepReport {
        axis: "samples".into(),
        layers: vec![layer.to_string()],
        n_values: vec![n],
        sample_counts: counts.to_vec(),
        cells: run_cells(ws, &cells, out)?,
    };
    write_sweep(out, &report)?;
    Ok(report)
}

/// `sweep.json`, `sweep.csv` and line plots of both metrics.
pub fn write_sweep(out: &Path, report: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    persist::write_json(&out.join("sweep.json"), report)?;
    write_csv(&out.join("sweep.csv"), &report.cells)?;
    let x_of = |c: &SweepCell| {
        if report.axis == "samples" {
            c.max_images as f64
        } else {
            c.n as f64
        }
    };
    for (name, metric) in [
        ("match_rate", (|c: &SweepCell| c.match_rate) as fn(&SweepCell) -> f64),
        ("average_pred", |c: &SweepCell| c.average_pred),
    ] {
        let series: Vec<Vec<(f64, f64)>> = report
            .layers
            .iter()
            .map(|l| report.cells.iter().filter(|c| &c.layer == l).map(|c| (x_of(c), metric(c))).collect())
            .collect();
        plot::line_plot(&series, (0.0, 1.0)).save(out.join(format!("{name}.png")))?;
    }
    Ok(())
}
