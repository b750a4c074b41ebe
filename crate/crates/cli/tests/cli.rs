use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use xdesc_cli::files::Report;

fn xdesc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdesc"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = xdesc(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn report(path: &Path) -> Report {
    Report::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xdesc(dir.path(), &["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(xdesc(dir.path(), &["match", "--a", "x.xdsc"]).status.code(), Some(2));
    assert_eq!(xdesc(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn incompatible_naive_match_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--n", "20", "--out", "d"]);
    let out = xdesc(dir.path(), &["match", "--a", "d/brief.xdsc", "--b", "d/sift.xdsc"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible descriptor dimensions"), "{err}");
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdesc(
        dir.path(),
        &["encode", "--bank", "nope.xbnk", "--in", "a.xdsc", "--out", "b.xdsc"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a.xdsc") && err.contains("No such file"), "{err}");
}

#[test]
fn future_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--n", "20", "--out", "d"]);
    let path = dir.path().join("d/manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
    let out = xdesc(dir.path(), &["eval", "--data", "d/manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported schema_version 9"));
}

#[test]
fn naive_eval_reports_skipped_pairs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--n", "100", "--out", "d"]);
    ok(dir.path(), &["eval", "--data", "d/manifest.json", "--report", "r.json"]);
    let r = report(&dir.path().join("r.json"));
    let pairs = r.metrics["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 16);
    let skipped = pairs.iter().filter(|p| p["skipped"] == Value::Bool(true)).count();
    // brief against each of the three real-valued families, both directions.
    assert_eq!(skipped, 6);
    assert!(r.metrics["worst_same_recall"].as_f64().unwrap() > 0.9);
}

#[test]
fn scene_pipeline_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        std::fs::create_dir(&d).unwrap();
        ok(&d, &["gen", "--n", "300", "--out", "train"]);
        ok(
            &d,
            &["gen", "--n", "40", "--seed", "2", "--views", "4", "--out", "scene"],
        );
        ok(
            &d,
            &[
                "train-bank",
                "--data",
                "train/manifest.json",
                "--epochs",
                "1",
                "--hidden",
                "16",
                "--embed-dim",
                "16",
                "--seed",
                "5",
                "--out",
                "bank.xbnk",
                "--report",
                "r_bank.json",
            ],
        );
        ok(
            &d,
            &[
                "scenario",
                "--manifest",
                "scene/images.json",
                "--bank",
                "bank.xbnk",
                "--stats-out",
                "stats.json",
                "--report",
                "r_scn.json",
            ],
        );
        d
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["bank.xbnk", "stats.json", "scene/view_000.xdsc", "train/sift.xdsc"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let (ra, rb) = (report(&a.join("r_scn.json")), report(&b.join("r_scn.json")));
    assert_eq!(ra.metrics, rb.metrics);
    assert!(ra.timings.contains_key("total_s"));
    let hist: f64 = ra.metrics["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((hist - 100.0).abs() < 1e-6, "{hist}");
    assert_eq!(
        report(&a.join("r_bank.json")).metrics,
        report(&b.join("r_bank.json")).metrics
    );
}
