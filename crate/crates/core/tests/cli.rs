use std::path::Path;
use std::process::{Command, Output};

fn avmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avmix")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn train_help_succeeds() {
    let out = avmix(&["train", "--help"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("Usage"));
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-bundle");
    let out = avmix(&[
        "train",
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no-such-bundle"), "{}", text(&out.stderr));
}

#[test]
fn unknown_flag_fails_with_usage() {
    let out = avmix(&["train", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = avmix(&[
        "train",
        "--dataset",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--set",
        "optim.learning_rate=0.1",
    ]);
    assert!(!out.status.success());
}

fn run_ok(args: &[&str]) -> String {
    let out = avmix(args);
    assert!(out.status.success(), "{args:?}: {}", text(&out.stderr));
    text(&out.stdout)
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, run) = (p("data"), p("run"));
    run_ok(&[
        "gen-data",
        "--out",
        &data,
        "--per-class-unlabeled",
        "10",
        "--per-class-test",
        "2",
    ]);
    let train = run_ok(&[
        "train",
        "--dataset",
        &data,
        "--out",
        &run,
        "--seed",
        "1",
        "--set",
        "max_steps=2",
        "--set",
        "model.d_model=16",
        "--set",
        "model.layers=1",
        "--set",
        "model.heads=2",
    ]);
    assert!(train.contains("steps=2"), "{train}");
    for f in ["metrics.jsonl", "summary.json", "config.toml", "checkpoint"] {
        assert!(Path::new(&run).join(f).exists(), "{f} missing");
    }
    let checkpoint = Path::new(&run).join("checkpoint");
    let eval = run_ok(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--dataset",
        &data,
        "--segments",
        "5",
        "--crops",
        "3",
    ]);
    assert!(eval.contains("views=15"), "{eval}");
    let plots = p("plots");
    run_ok(&["plot", "--run", &run, "--out", &plots]);
    assert!(Path::new(&plots).join("losses.png").exists());
}
