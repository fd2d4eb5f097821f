use std::path::PathBuf;
use std::sync::OnceLock;

use conceptx::crop_index::Exclusion;
use conceptx::dataset::Dataset;
use conceptx::explain::Explanation;
use conceptx::harness::fixture::{fit_fixture_model, synthetic_shapes, TrainConfig};
use conceptx::harness::quiz::{make_intruder_quiz, save_quiz};
use conceptx::harness::suite::{grid_search, run_class_suite, sample_count_sweep, CellParams, ScoreCache, SweepCell};
use conceptx::harness::{ExperimentConfig, Workspace};
use conceptx::model::ModelHandle;
use conceptx::persist;

fn fixture() -> &'static (ModelHandle, Dataset) {
    static F: OnceLock<(ModelHandle, Dataset)> = OnceLock::new();
    F.get_or_init(|| {
        let ds = synthetic_shapes(30, 32, 3);
        let (model, _) = fit_fixture_model(&ds, &TrainConfig::default()).unwrap();
        (model, ds)
    })
}

fn workspace(out: PathBuf) -> Workspace {
    let (model, ds) = fixture().clone();
    let mut cfg = ExperimentConfig::new(PathBuf::new(), PathBuf::new(), out);
    cfg.min_images = 5;
    cfg.max_images = 40;
    cfg.m = 4;
    Workspace::from_parts(cfg, model, ds)
}

#[test]
fn suite_aggregate_matches_per_class_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = workspace(dir.path().to_path_buf());
    ws.config.exclusion = Exclusion::None;
    let cell = CellParams { layer: "block3".into(), n: 3, max_images: 40 };
    let out = dir.path().join("suite");
    let r = run_class_suite(&ws, &cell, Some(&out), &ScoreCache::default()).unwrap();
    assert_eq!(r.rows.len(), 10);

    // Recompute from the per-class JSON files on disk.
    let mut preds = Vec::new();
    let mut passed = 0;
    for row in &r.rows {
        let path = out.join(format!("class_{:04}", row.class_id)).join("explanation.json");
        if row.ok {
            let e: Explanation = persist::read_json(&path).unwrap();
            assert_eq!(e.n, 3);
            assert_eq!(e.visualizations.len(), 3);
            preds.push(e.stitch.softmax_pred_target);
            passed += e.stitch.passed as usize;
            assert!(out.join(format!("class_{:04}", row.class_id)).join("stitched.png").exists());
        } else {
            assert!(!path.exists());
        }
    }
    let avg = preds.iter().sum::<f64>() / preds.len() as f64;
    assert!((r.cell.average_pred - avg).abs() < 1e-12);
    assert_eq!(r.cell.match_rate, passed as f64 / 10.0);
    let on_disk: SweepCell = persist::read_json(&out.join("cell.json")).unwrap();
    assert_eq!(on_disk.match_rate, r.cell.match_rate);
}

#[test]
fn grid_search_cells_and_construction_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path().to_path_buf());
    assert_eq!(ws.config.exclusion, Exclusion::CropAndImageNotTarget);
    let layers = vec!["block1".to_string(), "block3".to_string()];
    let report = grid_search(&ws, &layers, &[1, 2], &dir.path().join("grid")).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert_eq!(c.match_rate, c.passed as f64 / c.classes as f64);
        if c.n == 1 {
            assert_eq!(c.match_rate, 0.0, "{c:?}");
        }
    }
    assert!(dir.path().join("grid/sweep.csv").exists());
    assert!(dir.path().join("grid/match_rate.png").exists());

    // A single-cell sweep reports the same numbers as the suite itself.
    let single = grid_search(&ws, &layers[1..], &[2], &dir.path().join("one")).unwrap();
    let cell = CellParams { layer: "block3".into(), n: 2, max_images: ws.config.max_images };
    let direct = run_class_suite(&ws, &cell, None, &ScoreCache::default()).unwrap();
    assert_eq!(single.cells[0].match_rate, direct.cell.match_rate);
    assert_eq!(single.cells[0].average_pred, direct.cell.average_pred);
}

#[test]
fn deepest_layer_beats_first_layer_on_average_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = workspace(dir.path().to_path_buf());
    ws.config.exclusion = Exclusion::None;
    let layers = vec!["block1".to_string(), "block3".to_string()];
    let report = grid_search(&ws, &layers, &[4], &dir.path().join("grid")).unwrap();
    let first = &report.cells[0];
    let last = &report.cells[1];
    assert!(last.average_pred >= first.average_pred, "{first:?} vs {last:?}");
}

#[test]
fn sample_sweep_echoes_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path().to_path_buf());
    let counts = [10, 20, 30];
    let report = sample_count_sweep(&ws, "block3", 2, &counts, &dir.path().join("samples")).unwrap();
    assert_eq!(report.sample_counts, counts);
    assert_eq!(report.cells.len(), 3);
    for (c, &k) in report.cells.iter().zip(&counts) {
        assert_eq!(c.max_images, k);
        assert!(c.average_pred.is_finite() && c.match_rate.is_finite());
    }
}

#[test]
fn quiz_from_real_explanations() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = workspace(dir.path().to_path_buf());
    ws.config.exclusion = Exclusion::None;
    ws.config.m = 8;
    let cell = CellParams { layer: "block3".into(), n: 4, max_images: 40 };
    let r = run_class_suite(&ws, &cell, None, &ScoreCache::default()).unwrap();
    let (quiz, key) = make_intruder_quiz(&r.explanations, 50, 1).unwrap();
    assert_eq!(quiz.items.len(), 50);
    save_quiz(&dir.path().join("quiz"), &quiz, &key, &ws.dataset).unwrap();
    assert!(dir.path().join("quiz/items/item_049.png").exists());
    let back: conceptx::harness::quiz::AnswerKey = persist::read_json(&dir.path().join("quiz/answers.json")).unwrap();
    assert_eq!(back, key);
}

#[test]
fn probes_are_cached_and_contrast_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path().to_path_buf());
    let p1 = ws.probe(2, 5, "block3").unwrap();
    assert!(dir.path().join("probes/block3/probe_2_5.bin").exists());
    let p2 = ws.probe(2, 5, "block3").unwrap();
    assert_eq!(p1, p2);
    let (plane, out) = ws.contrast_explanation(2, 5, "block3", 3).unwrap();
    assert_eq!(plane, p1);
    assert_eq!(out.explanation.class_id, 2);
    assert!(out.basis.basis.iter().all(|&v| v >= 0.0));
    for row in out.basis.basis.outer_iter() {
        assert!(row.iter().any(|&v| v > 0.0));
    }
    let shift = ws.shift(2, 5, "block3").unwrap();
    assert_eq!(shift.offsets.len(), 10);
}
