use std::path::Path;
use std::process::Command;

fn conceptx(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_conceptx")).args(args).env("RUST_LOG", "warn").output().unwrap();
    out
}

fn ok(args: &[&str]) -> String {
    let out = conceptx(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn fixture_to_reports_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let fx_s = fx.to_str().unwrap();
    ok(&["fixture", "train", "--out", fx_s, "--per-class", "30", "--seed", "2"]);
    let cfg = fx.join("config.json");
    let cfg_s = cfg.to_str().unwrap();

    let runs = [dir.path().join("a"), dir.path().join("b")];
    for r in &runs {
        let r = r.to_str().unwrap();
        ok(&["--config", cfg_s, "--out", r, "explain", "4", "--exclusion", "none"]);
        ok(&["--config", cfg_s, "--out", r, "contrast", "4", "6", "--n", "3"]);
        ok(&["--config", cfg_s, "--out", r, "quiz", "--items", "12"]);
    }
    for rel in [
        "explain/class_0004/explanation.json",
        "explain/class_0004/concepts.json",
        "contrast/4_vs_6/explanation.json",
        "contrast/4_vs_6/hyperplane.json",
        "quiz/quiz.json",
        "quiz/answers.json",
    ] {
        assert_eq!(read(&runs[0].join(rel)), read(&runs[1].join(rel)), "{rel}");
    }
    assert!(runs[0].join("explain/class_0004/grid.png").exists());

    let v: serde_json::Value =
        serde_json::from_str(&ok(&["--config", cfg_s, "--out", runs[0].to_str().unwrap(), "validate", "2"])).unwrap();
    assert_eq!(v["cell"]["classes"], 1);
    let s: serde_json::Value =
        serde_json::from_str(&ok(&["--config", cfg_s, "--out", runs[0].to_str().unwrap(), "shift", "1", "2"])).unwrap();
    assert_eq!(s["summary"]["pairs"][0][0], 1);
}

#[test]
fn missing_config_is_reported() {
    let out = conceptx(&["explain", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    let out = conceptx(&["--config", "/nonexistent/x.json", "explain", "1"]);
    assert!(!out.status.success());
}

#[test]
fn bad_attribution_name_is_rejected_by_the_parser() {
    let out = conceptx(&["--attrib", "lime", "explain", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lime"));
}
