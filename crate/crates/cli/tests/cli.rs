//! End-to-end runs of the `attrenhance` binary on a toy configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attrenhance::config::RunConfig;
use attrenhance::synthgen::load_manifest;
use attrenhance::trainloop::{train_classifier, Checkpoint};

const TOY: &[&str] = &[
    "data.train_count=8",
    "data.test_count=4",
    "classifier.channels=[4, 8]",
    "classifier.learning_rate=0.01",
    "classifier.batch_size=4",
    "classifier.epochs=2",
    "gan.width_divisor=64",
    "gan.batch_size=4",
    "gan.reconstruction.epochs=1",
    "gan.super_resolution.epochs=1",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attrenhance"));
    c.env_remove("ATTRENHANCE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn with_toy<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in TOY {
        args.push("--set");
        args.push(s);
    }
    args
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Dataset plus all three trained networks in `root/data` and `root/models`.
fn toy_models(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let models = root.join("models");
    ok(run(&with_toy(vec!["dataset", "build", "--out", p(&data)])));
    ok(run(&with_toy(vec!["train", "classifier", "--data", p(&data), "--out", p(&models)])));
    for which in ["reconstruction", "sr"] {
        ok(run(&with_toy(vec!["train", "gan", "--which", which, "--data", p(&data), "--out", p(&models)])));
    }
    (data, models)
}

#[test]
fn dataset_build_writes_manifest_schema_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(run(&with_toy(vec!["dataset", "build", "--out", p(&a)])));
    ok(run(&with_toy(vec!["dataset", "build", "--out", p(&b)])));
    for f in ["manifest.jsonl", "schema.json", "train.jsonl", "test_merged.jsonl", "config.resolved.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(fs::read_to_string(a.join("run.log")).unwrap().contains("done in"));

    let again = run(&with_toy(vec!["dataset", "build", "--out", p(&a)]));
    assert_eq!(again.status.code(), Some(1));
    ok(run(&with_toy(vec!["dataset", "build", "--out", p(&a), "--overwrite"])));
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 3\n[classifier]\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["dataset", "build", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classifier.learning_rat"));

    let out = run(&["dataset", "build", "--set", "data.height=150", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("nothing.jsonl");
    let out = run(&["report", "plot", "--history", p(&missing), "--out", p(&dir.path().join("x.svg"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["dataset", "build", "--out", p(&dir.path().join("e"))]).env("ATTRENHANCE_SEED", "x").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.jsonl");
    let out = run(&["train", "classifier", "--data", p(dir.path()), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["eval", "--models", p(dir.path()), "--manifest", p(&missing)]);
    assert_eq!(out.status.code(), Some(1), "missing classifier checkpoint is a configuration error");
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let mut cmd = bin();
    cmd.args(with_toy(vec!["dataset", "build", "--out", p(&out)])).env("ATTRENHANCE_SEED", "99");
    ok(cmd.output().unwrap());
    let snapshot = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("seed = 99"), "{snapshot}");
}

#[test]
fn full_workflow_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (data, models) = toy_models(&dir.path().join("one"));
    let (_, models2) = toy_models(&dir.path().join("two"));

    let snapshot = fs::read_to_string(models.join("config.resolved.toml")).unwrap();
    for f in ["classifier.aenh", "reconstruction-generator.aenh", "sr-discriminator.aenh", "history.jsonl", "sr-history.jsonl"] {
        assert_eq!(fs::read(models.join(f)).unwrap(), fs::read(models2.join(f)).unwrap(), "{f}");
    }
    let ckpt = Checkpoint::read(&models.join("classifier.aenh")).unwrap();
    assert!(snapshot.starts_with(&format!("# config hash {}", ckpt.config_hash)));
    assert_eq!(fs::read_to_string(models.join("history.jsonl")).unwrap().lines().count(), 2);

    let report = dir.path().join("eval/report.json");
    ok(run(&["eval", "--models", p(&models), "--manifest", p(&data.join("test_lowres.jsonl")), "--out", p(&report)]));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["mA", "accuracy", "precision", "recall", "f1"] {
        let v = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(dir.path().join("eval/report.config.resolved.toml").exists());

    let a = dir.path().join("pipe/a.json");
    let b = dir.path().join("pipe/b.json");
    for out in [&a, &b] {
        ok(run(&["pipeline", "run", "--models", p(&models), "--manifest", p(&data.join("test_merged.jsonl")), "--out", p(out)]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(json["counts"]["images"], 8);
    assert_eq!(json["counts"]["used_sr"], 4);

    let table = dir.path().join("table");
    ok(run(&["report", "restoration", "--models", p(&models), "--data", p(&data), "--out", p(&table)]));
    let csv = fs::read_to_string(table.join("restoration.csv")).unwrap();
    // Header, the clean row and six corrupted-versus-restored rows.
    assert_eq!(csv.lines().count(), 1 + 1 + 6, "{csv}");

    let svg = dir.path().join("plots/loss.svg");
    ok(run(&["report", "plot", "--history", p(&models.join("history.jsonl")), "--out", p(&svg)]));
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
    assert!(fs::read_to_string(svg.with_extension("csv")).unwrap().starts_with("epoch,"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(run(&with_toy(vec!["dataset", "build", "--out", p(&data)])));
    let full = dir.path().join("full");
    ok(run(&with_toy(vec!["train", "classifier", "--data", p(&data), "--out", p(&full)])));

    // Recreate the state of a run interrupted after epoch 1.
    let split = dir.path().join("split");
    fs::create_dir_all(&split).unwrap();
    let text = fs::read_to_string(full.join("config.resolved.toml")).unwrap();
    let config = RunConfig::from_toml_str(&text, &[]).unwrap();
    let train = load_manifest(&data.join("train.jsonl")).unwrap();
    let test = load_manifest(&data.join("test_clean.jsonl")).unwrap();
    let mut first = None;
    train_classifier(&train, Some(&test), &config, None, &mut |r, c| {
        if r.epoch == 1 {
            first = Some(c.clone());
        }
        Ok(())
    })
    .unwrap();
    first.unwrap().write(&split.join("classifier.aenh")).unwrap();
    let history = fs::read_to_string(full.join("history.jsonl")).unwrap();
    fs::write(split.join("history.jsonl"), format!("{}\n", history.lines().next().unwrap())).unwrap();

    let mut resume = with_toy(vec!["train", "classifier", "--data", p(&data), "--out", p(&split)]);
    resume.push("--resume");
    ok(run(&resume));
    for f in ["classifier.aenh", "history.jsonl"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }

    // A checkpoint written under another config is refused.
    resume.extend(["--set", "classifier.learning_rate=0.02"]);
    assert_eq!(run(&resume).status.code(), Some(2));
    let missing = dir.path().join("empty");
    let out = run(&["train", "classifier", "--data", p(&data), "--out", p(&missing), "--resume"]);
    assert_eq!(out.status.code(), Some(1));
}
