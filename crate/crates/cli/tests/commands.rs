use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attriflow"));
    c.env_remove("APC_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap()
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

/// Architecture fields without dedicated flags come from a config file.
const TINY_CONFIG: &str = r#"{
  "model": { "point_hidden_dim": 8, "point_feature_dim": 8, "head_hidden": 8, "zero_init_head": false },
  "train": { "alpha": 5.0, "epochs": 3 }
}"#;

const TINY_FLAGS: [&str; 14] = [
    "--points", "32", "--channels", "6,8,10", "--encoder-channels", "4,8", "--feature-dim", "16", "--code-dim", "4",
    "--k-neighbors", "4", "--batch-size", "4",
];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let run = root.path().join("run");
        let config = root.path().join("tiny.json");
        fs::write(&config, TINY_CONFIG).unwrap();
        ok(&["synth", "build", "--out", p(&data), "--train", "8", "--val", "4", "--test", "6", "--seed", "3", "--resolution", "32", "--points", "256"]);
        let mut args = vec!["train", "--data", p(&data), "--config", p(&config), "--epochs", "1", "--out", p(&run)];
        args.extend(TINY_FLAGS);
        ok(&args);
        Fixture { _root: root, data, run, config }
    })
}

#[test]
fn synth_build_writes_manifest_and_snapshot() {
    let f = fixture();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 6);
    let snap = snapshot(&f.data);
    assert_eq!(snap["command"], "synth build");
    assert_eq!(snap["dataset"]["seed"], 3);
    assert_eq!(snap["dataset"]["resolution"], 32);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let status = bin()
        .env("APC_SEED", "41")
        .args(["synth", "build", "--out", p(&out), "--train", "1", "--val", "1", "--test", "1", "--resolution", "32", "--points", "64"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(snapshot(&out)["dataset"]["seed"], 41);

    let out2 = dir.path().join("e");
    let status = bin()
        .env("APC_SEED", "41")
        .args(["synth", "build", "--out", p(&out2), "--seed", "2", "--train", "1", "--val", "1", "--test", "1", "--resolution", "32", "--points", "64"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(snapshot(&out2)["dataset"]["seed"], 2);
}

#[test]
fn train_merges_flags_over_config_file() {
    let f = fixture();
    let snap = snapshot(&f.run);
    assert_eq!(snap["command"], "train");
    // Flag beats file, file beats default.
    assert_eq!(snap["train"]["epochs"], 1);
    assert_eq!(snap["train"]["alpha"], 5.0);
    assert_eq!(snap["model"]["head_hidden"], 8);
    assert_eq!(snap["model"]["image_resolution"], 32);
    assert_eq!(snap["model"]["channels"], json!([6, 8, 10]));
    assert!(f.run.join("model.ckpt").is_file());
    let history: Value = serde_json::from_str(&fs::read_to_string(f.run.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 1);
}

#[test]
fn train_snapshot_reproduces_the_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--config", p(&f.run.join("config.json")), "--out", p(dir.path())]);
    assert_eq!(
        fs::read(dir.path().join("model.ckpt")).unwrap(),
        fs::read(f.run.join("model.ckpt")).unwrap()
    );
}

#[test]
fn eval_prints_family_csv() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let csv = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&f.data), "--split", "test", "--out", p(dir.path())]);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("family,"), "{csv}");
    assert!(lines.last().unwrap().starts_with("average,"), "{csv}");
    assert_eq!(fs::read_to_string(dir.path().join("eval_test.csv")).unwrap(), csv);
    assert_eq!(snapshot(dir.path())["metric"], "l1");
    // Same checkpoint, same numbers.
    assert_eq!(ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&f.data)]), csv);
}

fn test_image(f: &Fixture, index: usize) -> PathBuf {
    let manifest: Value = serde_json::from_str(&fs::read_to_string(f.data.join("manifest.json")).unwrap()).unwrap();
    f.data.join(manifest["test"][index]["image"].as_str().unwrap())
}

#[test]
fn sweep_exports_one_cloud_per_step() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let img = test_image(f, 0);
    ok(&["sweep", "--ckpt", p(&ckpt), "--image", p(&img), "--stage", "3", "--dim", "2", "--steps", "7", "--out", p(dir.path())]);
    let index: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index["files"].as_array().unwrap().len(), 7);
    assert_eq!(index["stage"], 3);
    for i in 0..7 {
        assert!(dir.path().join(format!("sweep_{i:02}.apc")).is_file());
    }
    assert_eq!(snapshot(dir.path())["values"].as_array().unwrap().len(), 7);

    let out = run(&["sweep", "--ckpt", p(&ckpt), "--image", p(&img), "--stage", "3", "--dim", "4", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn default_sweep_spans_three_test_deviations() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let img = test_image(f, 0);
    ok(&["sweep", "--ckpt", p(&ckpt), "--image", p(&img), "--stage", "2", "--dim", "1", "--data", p(&f.data), "--out", p(dir.path())]);
    let values: Vec<f64> = serde_json::from_value(snapshot(dir.path())["values"].clone()).unwrap();
    assert_eq!(values.len(), 7);
    // Symmetric about the captured value, unlike the fallback [-1, 1] grid.
    let mid = values[3];
    assert!((values[0] + values[6] - 2.0 * mid).abs() < 1e-9);
    assert!(values[6] > values[0]);
    assert_ne!((values[0], values[6]), (-1.0, 1.0));
}

#[test]
fn swap_all_equals_b() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let (a, b) = (test_image(f, 0), test_image(f, 1));
    ok(&["swap", "--ckpt", p(&ckpt), "--a", p(&a), "--b", p(&b), "--which", "all", "--out", p(dir.path())]);
    assert_eq!(fs::read(dir.path().join("swap.apc")).unwrap(), fs::read(dir.path().join("b.apc")).unwrap());
    ok(&["swap", "--ckpt", p(&ckpt), "--a", p(&a), "--b", p(&b), "--which", "none", "--out", p(dir.path())]);
    assert_eq!(fs::read(dir.path().join("swap.apc")).unwrap(), fs::read(dir.path().join("a.apc")).unwrap());
}

#[test]
fn report_writes_correlations() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("model.ckpt");
    let stdout = ok(&["report", "--ckpt", p(&ckpt), "--data", p(&f.data), "--permutations", "20", "--out", p(dir.path())]);
    assert!(stdout.contains("shuffled-label"));
    let csv = fs::read_to_string(dir.path().join("disentanglement.csv")).unwrap();
    // Header plus 3 stages of 4 dims.
    assert_eq!(csv.lines().count(), 1 + 12);
}

#[test]
fn ablate_runs_each_variant_and_compares() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--data", p(&f.data), "--config", p(&f.config), "--epochs", "1", "--variants", "full,only_mlp", "--seed", "1", "--out", p(dir.path())];
    args.extend(TINY_FLAGS);
    let table = ok(&args);
    assert!(table.contains("full") && table.contains("only_mlp"), "{table}");
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(dir.path().join("runs/full_s1.ckpt").is_file());
    assert!(dir.path().join("runs/only_mlp_s1.ckpt").is_file());
    assert_eq!(snapshot(dir.path())["seeds"], json!([1]));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["ablate", "--variants", "full,partial", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["swap", "--which", "z:0", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = run(&["eval", "--ckpt", p(&missing), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = run(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing data"));
}
