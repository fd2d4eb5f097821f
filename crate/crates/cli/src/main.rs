use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use conceptx::attribution::AttributionMethod;
use conceptx::concepts::collect_class_images;
use conceptx::contrast::{patch_insertion_test, save_insertion};
use conceptx::crop_index::Exclusion;
use conceptx::dataset::load_image;
use conceptx::explain::explain_class;
use conceptx::harness::fixture::{import_class_folders, synthetic_shapes, train_fixture_model, TrainConfig};
use conceptx::harness::pairs::{sample_contrast_pairs, shift_suite};
use conceptx::harness::quiz::{make_intruder_quiz, save_quiz};
use conceptx::harness::suite::{grid_search, run_class_suite, sample_count_sweep, CellParams, ScoreCache};
use conceptx::harness::{ExperimentConfig, Workspace};
use conceptx::persist;

#[derive(Parser)]
#[command(name = "conceptx", version, about = "Concept explanations for image classifiers")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hidden layer to work on; defaults to the deepest cataloged layer.
    #[arg(long, global = true)]
    layer: Option<String>,
    /// Number of concepts.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// grad_x_act, deeplift, smoothgrad or smoothgrad:<inner>:<samples>:<sigma>.
    #[arg(long, global = true)]
    attrib: Option<AttributionMethod>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Crop index management.
    Index {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Extract, visualize and stitch-test the concepts of one class.
    Explain {
        class: usize,
        /// Crops shown per concept.
        #[arg(long)]
        m: Option<usize>,
        /// none, crop or strict.
        #[arg(long)]
        exclusion: Option<Exclusion>,
    },
    /// Stitching test for one class or all configured classes.
    Validate {
        class: Option<usize>,
        #[arg(long)]
        all: bool,
        /// Only use crops where neither crop nor image is predicted as the class.
        #[arg(long)]
        exclude_target: bool,
    },
    /// Concepts of class A that separate it from class B.
    Contrast { a: usize, b: usize },
    /// Shifting test along the A-vs-B probe. Without classes, runs seeded
    /// random pairs.
    Shift {
        a: Option<usize>,
        b: Option<usize>,
        #[arg(long)]
        pairs_per_class: Option<usize>,
    },
    /// Patch-insertion bias test on images predicted as `class`.
    InsertTest {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        class: usize,
        /// Classes to report; defaults to `class`.
        #[arg(long, value_delimiter = ',')]
        report: Vec<usize>,
        /// Patch side in pixels; defaults to a third of the shorter image side.
        #[arg(long)]
        side: Option<usize>,
        #[arg(long, default_value_t = 128)]
        count: usize,
    },
    /// Sweep over layers and numbers of concepts.
    GridSearch {
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        n_values: Vec<usize>,
    },
    /// Sweep over the number of images per class.
    SweepSamples {
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Intruder-detection quiz from the configured classes' explanations.
    Quiz {
        #[arg(long)]
        items: Option<usize>,
    },
    /// Desk-scale fixture.
    Fixture {
        #[command(subcommand)]
        cmd: FixtureCmd,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Build (or rebuild) the crop index of the selected layers.
    Build,
}

#[derive(Subcommand)]
enum FixtureCmd {
    /// Generate (or import) a dataset, train the fixture model and write a
    /// ready-to-use experiment config.
    Train(FixtureArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Import `<dir>/<class>/<image>` instead of generating shapes.
    #[arg(long)]
    import: Option<PathBuf>,
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required (create one with `conceptx fixture train`)")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = &cli.layer {
        cfg.layers = vec![l.clone()];
    }
    if let Some(n) = cli.n {
        cfg.n_values = vec![n];
    }
    if let Some(a) = &cli.attrib {
        cfg.method = a.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print(v: serde_json::Value) {
    use std::io::Write;
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).unwrap());
}

fn fixture_train(cli: &Cli, args: &FixtureArgs) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fixture"));
    let seed = cli.seed.unwrap_or(0);
    let dataset = match &args.import {
        Some(dir) => {
            let (ds, names) = import_class_folders(dir, args.side)?;
            persist::write_json(&out.join("classes.json"), &names)?;
            ds
        }
        None => synthetic_shapes(args.per_class, args.side, seed),
    };
    dataset.save(&out.join("dataset"))?;
    let cfg = TrainConfig { epochs: args.epochs, seed, ..TrainConfig::default() };
    let (model, report) = train_fixture_model(&dataset, &cfg)?;
    model.save(&out, "model")?;
    persist::write_json(&out.join("train_report.json"), &report)?;
    let mut exp = ExperimentConfig::new("model.json".into(), "dataset".into(), "runs".into());
    exp.seed = seed;
    exp.min_images = exp.min_images.min(args.per_class / 2).max(1);
    persist::write_json(&out.join("config.json"), &exp)?;
    print(json!({
        "config": out.join("config.json"),
        "images": dataset.len(),
        "epochs_run": report.epochs_run,
        "train_accuracy": report.final_accuracy,
    }));
    Ok(())
}

fn first_layer(ws: &Workspace) -> String {
    ws.layers().into_iter().next().unwrap()
}

fn first_n(ws: &Workspace) -> usize {
    ws.config.n_values.first().copied().unwrap_or(conceptx::concepts::DEFAULT_N)
}

fn run(cli: Cli) -> Result<()> {
    if let Cmd::Fixture { cmd: FixtureCmd::Train(args) } = &cli.cmd {
        return fixture_train(&cli, args);
    }
    let ws = Workspace::open(experiment(&cli)?)?;
    let out = ws.config.out_dir.clone();
    match &cli.cmd {
        Cmd::Fixture { .. } => unreachable!(),
        Cmd::Index { cmd: IndexCmd::Build } => {
            let mut built = Vec::new();
            for layer in ws.layers() {
                let ix = ws.rebuild_index(&layer)?;
                built.push(json!({"layer": layer, "crops": ix.len(), "dir": ws.index_dir(&layer)}));
            }
            print(json!(built));
        }
        Cmd::Explain { class, m, exclusion } => {
            let layer = first_layer(&ws);
            let index = ws.index(&layer)?;
            let mut cfg = conceptx::explain::ExplainConfig {
                concepts: ws.config.concept_config(&layer, first_n(&ws), ws.config.max_images),
                m: m.unwrap_or(ws.config.m),
                exclusion: exclusion.unwrap_or(ws.config.exclusion),
            };
            cfg.concepts.seed = ws.config.seed;
            let res = explain_class(&ws.model, &ws.dataset, &index, *class, &cfg)?;
            let dir = out.join("explain").join(format!("class_{class:04}"));
            res.save(&dir, &ws.dataset, index.manifest.crop_side)?;
            print(json!({"dir": dir, "stitch": res.explanation.stitch}));
        }
        Cmd::Validate { class, all, exclude_target } => {
            let mut ws = ws;
            ws.config.exclusion = if *exclude_target { Exclusion::CropAndImageNotTarget } else { Exclusion::None };
            match (class, all) {
                (Some(c), false) => ws.config.classes = Some(vec![*c]),
                (None, true) => {}
                _ => bail!("give either a class or --all"),
            }
            let cell = CellParams { layer: first_layer(&ws), n: first_n(&ws), max_images: ws.config.max_images };
            let dir = out.join("validate").join(cell.dir_name()).join(ws.config.exclusion.to_string());
            let r = run_class_suite(&ws, &cell, Some(&dir), &ScoreCache::default())?;
            print(json!({"dir": dir, "cell": r.cell, "classes": r.rows}));
        }
        Cmd::Contrast { a, b } => {
            let layer = first_layer(&ws);
            let (plane, res) = ws.contrast_explanation(*a, *b, &layer, first_n(&ws))?;
            let index = ws.index(&layer)?;
            let dir = out.join("contrast").join(format!("{a}_vs_{b}"));
            res.save(&dir, &ws.dataset, index.manifest.crop_side)?;
            persist::write_json(&dir.join("hyperplane.json"), &plane)?;
            print(
                json!({"dir": dir, "probe_accuracy": plane.train_stats.final_accuracy, "stitch": res.explanation.stitch}),
            );
        }
        Cmd::Shift { a, b, pairs_per_class } => {
            let layer = first_layer(&ws);
            let (pairs, dir) = match (a, b) {
                (Some(a), Some(b)) => (vec![(*a, *b)], out.join("shift").join(format!("{a}_vs_{b}"))),
                (None, None) => (
                    sample_contrast_pairs(
                        &ws.classes(),
                        pairs_per_class.unwrap_or(ws.config.contrast_targets),
                        ws.config.seed,
                    ),
                    out.join("shift").join("suite"),
                ),
                _ => bail!("give both classes or neither"),
            };
            let (summary, _) = shift_suite(&ws, &pairs, &layer, Some(&dir))?;
            print(json!({"dir": dir, "summary": summary}));
        }
        Cmd::InsertTest { patch, class, report, side, count } => {
            let patch_px = load_image(patch)?;
            let batch = collect_class_images(&ws.model, &ws.dataset, *class, *count, 1)?;
            let imgs: Vec<_> = batch.source_ids.iter().map(|id| ws.dataset.get(id).unwrap().pixels.clone()).collect();
            let classes = if report.is_empty() { vec![*class] } else { report.clone() };
            let r = patch_insertion_test(&ws.model, &imgs, &patch_px, *side, &classes)?;
            let dir = out.join("insert").join(format!("class_{class:04}"));
            save_insertion(&dir, &ws.model, &r, &imgs[0], &patch_px)?;
            print(json!({"dir": dir, "report": r}));
        }
        Cmd::GridSearch { layers, n_values } => {
            let layers = if layers.is_empty() {
                ws.model.catalog().iter().map(|l| l.name.clone()).collect()
            } else {
                layers.clone()
            };
            let ns = if n_values.is_empty() { (1..=10).collect() } else { n_values.clone() };
            let r = grid_search(&ws, &layers, &ns, &out.join("grid"))?;
            print(json!(r));
        }
        Cmd::SweepSamples { counts } => {
            let counts = if counts.is_empty() { ws.config.sample_counts.clone() } else { counts.clone() };
            let r = sample_count_sweep(&ws, &first_layer(&ws), first_n(&ws), &counts, &out.join("samples"))?;
            print(json!(r));
        }
        Cmd::Quiz { items } => {
            let cell = CellParams { layer: first_layer(&ws), n: first_n(&ws), max_images: ws.config.max_images };
            let r = run_class_suite(&ws, &cell, None, &ScoreCache::default())?;
            let (quiz, key) =
                make_intruder_quiz(&r.explanations, items.unwrap_or(ws.config.quiz_items), ws.config.seed)?;
            let dir = out.join("quiz");
            save_quiz(&dir, &quiz, &key, &ws.dataset)?;
            print(json!({"dir": dir, "items": quiz.items.len()}));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
