use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use patchdrop::config::RunConfig;
use patchdrop::data::Dataset;
use patchdrop::train::{classifier_accuracy, TrainState};

const SMALL: &str = "\
seed = 0
[synthetic]
train = 400
val = 100
test = 200
[pretrain]
epochs = 6
learning_rate = 0.003
batch_size = 32
[pt]
epochs = 15
learning_rate = 0.001
batch_size = 64
[ft1]
epochs = 2
learning_rate = 0.001
batch_size = 64
";

fn patchdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchdrop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = patchdrop(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str]) -> String {
    let out = patchdrop(args);
    assert!(!out.status.success(), "{args:?} should have failed");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn bad_invocations_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[pt]\nlearning_rate = -0.1\nalpha_start = 0.9\nalpha_end = 0.8\n[nowhere]\n").unwrap();

    assert_eq!(patchdrop(&["pretrain", "--bogus"]).status.code(), Some(2));
    let msg = stderr_of(&["--config", bad.to_str().unwrap(), "--out", out, "pretrain"]);
    assert!(msg.contains("learning_rate") && msg.contains("alpha_start") && msg.contains("nowhere"), "{msg}");
    let msg = stderr_of(&["--out", out, "train-policy"]);
    assert!(msg.contains("run pretrain first"), "{msg}");
    stderr_of(&["--config", "/nonexistent/config.toml", "--out", out, "pretrain"]);
}

#[test]
fn full_run_produces_artifacts_and_meets_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let out = run.to_str().unwrap();

    ok(&["--config", &cfg, "--out", out, "pretrain"]);
    let msg = stderr_of(&["--config", &cfg, "--out", out, "finetune", "--stage", "ft1"]);
    assert!(msg.contains("requires pt"), "{msg}");
    ok(&["--config", &cfg, "--out", out, "train-policy"]);

    // AllKeep evaluation reduces to the standalone HR classifier.
    ok(&["--config", &cfg, "--out", out, "eval", "--policy", "all-keep"]);
    let rows = csv_rows(&run.join("eval_all-keep.csv"));
    assert_eq!(rows.len(), 1);
    let state = TrainState::load(&run.join("state")).unwrap();
    let rc = RunConfig::load(&run.join("config.toml")).unwrap();
    let raw = patchdrop::data::generate_synthetic(&rc.synthetic).unwrap();
    let data = Dataset::prepare(&raw, rc.data.ds).unwrap();
    let hr_acc = classifier_accuracy(&state.hr, &data.test, false).unwrap();
    assert!((rows[0][1].parse::<f64>().unwrap() - hr_acc).abs() < 1e-6);

    ok(&["--config", &cfg, "--out", out, "eval"]);
    let metrics = fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    let learned: serde_json::Value = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["stage"] == "eval-pt-learned")
        .unwrap();
    assert!(learned["mean_S"].as_f64().unwrap() <= 4.0, "{learned}");
    assert!(learned["accuracy"].as_f64().unwrap() >= 0.95, "{learned}");

    ok(&["--config", &cfg, "--out", out, "compare"]);
    let rows = csv_rows(&run.join("compare.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["learned", "fixed-h", "fixed-v", "stochastic", "all-keep", "all-drop"]);

    ok(&["--config", &cfg, "--out", out, "finetune", "--stage", "ft1"]);

    for f in ["config.toml", "metrics.ndjson", "manifest.json", "checkpoints/pt/best/policy.pdnn", "state/hr.pdnn"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["code_version"].is_string());
    assert_eq!(manifest["commands"].as_array().unwrap().len(), 7);
    // The echoed config is complete and parses back to what ran.
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("[ft2]\nepochs = 100\nlearning_rate = 0.0001\nbatch_size = 128\nsigma = 5.0"));
    assert_eq!(rc, RunConfig::parse(SMALL).unwrap());

    let msg = stderr_of(&["--config", &cfg, "--out", out, "--seed", "5", "eval"]);
    assert!(msg.contains("seed"), "{msg}");
}

#[test]
fn runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dirs = ["a", "b"].map(|d| tmp.path().join(d));
    for d in &dirs {
        let out = d.to_str().unwrap();
        ok(&["--config", &cfg, "--out", out, "pretrain"]);
        ok(&["--config", &cfg, "--out", out, "train-policy"]);
    }
    for f in ["metrics.ndjson", "state/policy.pdnn", "state/hr.pdnn", "state/lr.pdnn", "config.toml"] {
        assert_eq!(fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn generated_data_reloads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["--config", &cfg, "--out", run.to_str().unwrap(), "gen-data"]);
    let (raw, spec) = patchdrop::data::load_synthetic(&run.join("data")).unwrap();
    let again = patchdrop::data::generate_synthetic(&spec).unwrap();
    assert_eq!(raw.train.labels, again.train.labels);
    assert_eq!(raw.test.images.data(), again.test.images.data());
}
