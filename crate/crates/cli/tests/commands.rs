use std::path::Path;
use std::process::{Command, Output};

use amformer_cli::{RunConfig, CONFIG_ECHO, OUTPUT_ROOT_ENV};

const SMALL: [&str; 8] = [
    "--set",
    "data.n_samples=1200",
    "--set",
    "data.classes=6",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=128",
];

fn amformer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amformer"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn gen_train_eval_round() {
    let root = tempfile::tempdir().unwrap();
    for cmd in [&["gen-data", "--out", "run"][..], &["train", "--out", "run"], &["eval", "--out", "run"]] {
        let out = amformer(root.path(), &with_small(cmd));
        assert_eq!(out.status.code(), Some(0), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let dir = root.path().join("run");
    for f in ["train.csv", "train.json", "test.csv", "test.json", "model.json", "train_report.jsonl", "metrics.json", CONFIG_ECHO] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // the final JSONL record carries the same evaluation
    let report = std::fs::read_to_string(dir.join("train_report.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(last["eval"]["accuracy"].as_f64(), Some(acc));
}

#[test]
fn echoed_config_reloads_and_reproduces() {
    let root = tempfile::tempdir().unwrap();
    let first = amformer(root.path(), &with_small(&["gen-data", "--out", "a", "--seed", "17"]));
    assert!(first.status.success());
    let echo = root.path().join("a").join(CONFIG_ECHO);
    let cfg = RunConfig::load(Some(&echo), &[]).unwrap();
    assert_eq!(cfg.seed, 17);
    assert_eq!(cfg.data.n_samples, 1200);
    let again = amformer(root.path(), &["--config", echo.to_str().unwrap(), "gen-data", "--out", "b"]);
    assert!(again.status.success());
    for f in ["train.csv", "test.csv", "train.json"] {
        assert_eq!(
            std::fs::read(root.path().join("a").join(f)).unwrap(),
            std::fs::read(root.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn validation_errors_exit_one() {
    let root = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--set", "model.bogus=1"][..],
        &["gen-data", "--set", "data.train_frac=1.5"],
        &["experiment", "nonsense"],
        &["no-such-command"],
        &["train", "--out", "missing-data"],
    ] {
        let out = amformer(root.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = amformer(root.path(), &["train", "--set", "model.bogus=1"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`model`") && err.contains("bogus"), "{err}");
}

#[test]
fn numeric_failures_exit_two() {
    let root = tempfile::tempdir().unwrap();
    assert!(amformer(root.path(), &with_small(&["gen-data", "--out", "r"])).status.success());
    let out = amformer(root.path(), &with_small(&["train", "--out", "r", "--set", "train.base_lr=1e200"]));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = amformer(root.path(), &["gradcheck", "--out", "g", "--set", "gradcheck.tolerance=1e-15"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_and_flopcount_write_csv() {
    let root = tempfile::tempdir().unwrap();
    let out = amformer(root.path(), &["gradcheck", "--out", "g"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS max_rel_err"));
    let csv = std::fs::read_to_string(root.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let out = amformer(root.path(), &["flopcount", "--out", "f"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(root.path().join("f/flopcount.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "N,N_p,prompt_ops,dense_ops,ratio");
    assert!(lines[3].starts_with("512,64,"));
    assert!(lines[3].ends_with(",0.125"));
}

#[test]
fn output_root_env_and_absolute_out() {
    let root = tempfile::tempdir().unwrap();
    let abs = tempfile::tempdir().unwrap();
    assert!(amformer(root.path(), &["flopcount"]).status.success());
    assert!(root.path().join("runs/flopcount.csv").exists());
    assert!(amformer(root.path(), &["flopcount", "--out", abs.path().to_str().unwrap()]).status.success());
    assert!(abs.path().join("flopcount.csv").exists());
}
