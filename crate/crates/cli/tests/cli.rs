//! Drives the `lander` binary on a tiny blob configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.num_classes=4",
    "data.train_per_class=12",
    "data.test_per_class=4",
    "data.image_size=8",
    "federation.num_clients=2",
    "federation.rounds=1",
    "model.width=4",
    "client.epochs=1",
    "client.batch_size=8",
    "generation.rounds=1",
    "generation.steps=2",
    "generation.batch_size=8",
    "generation.student_batch_size=8",
    "generation.latent_dim=16",
    "lte.dim=16",
];

fn lander(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lander"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn with_tiny<'a>(verb: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![verb];
    for s in TINY {
        args.extend(["--set", s]);
    }
    args.extend(extra);
    args
}

fn stdout_json(output: &Output) -> serde_json::Value {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    serde_json::from_slice(&output.stdout).unwrap()
}

fn run_into(dir: &Path, extra: &[&str]) -> serde_json::Value {
    let out = dir.to_str().unwrap();
    let mut args = with_tiny("run", &["--out", out]);
    args.extend(extra);
    stdout_json(&lander(&args))
}

#[test]
fn dry_run_reports_memory_size_without_training() {
    let output = lander(&[
        "generate",
        "--checkpoint",
        "missing.bin",
        "--dry-run",
        "--set",
        "generation.rounds=40",
        "--set",
        "generation.batch_size=256",
    ]);
    let plan = stdout_json(&output);
    assert_eq!(plan["memory_size"], 10240);
    assert_eq!(plan["rounds"], 40);
}

#[test]
fn unknown_key_fails_with_structured_error() {
    let output = lander(&["partition-preview", "--set", "federation.nonexistent=3"]);
    assert_eq!(output.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("federation.nonexistent"), "{err}");
}

#[test]
fn partition_preview_lists_every_client() {
    let output = lander(&with_tiny("partition-preview", &["--seed", "3"]));
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert_eq!(text.matches("client ").count(), 2 * 2);
    assert_eq!(text.matches("mean label entropy").count(), 2);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), b"").unwrap();
    let output = lander(&with_tiny("run", &["--out", dir.path().to_str().unwrap()]));
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("locked"));
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn run_eval_generate_and_report_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let lander_dir = root.path().join("lander");
    let finetune_dir = root.path().join("finetune");

    let summary = run_into(&lander_dir, &["--seed", "2"]);
    assert_eq!(summary["label"], "lander");
    assert_eq!(summary["seed"], 2);
    assert!(!lander_dir.join(".lock").exists());
    for file in ["config.lock", "metrics.json", "logs/rounds.csv", "ckpt/task_1.bin", "ckpt/task_2.bin", "memory/task_2.mem"] {
        assert!(lander_dir.join(file).exists(), "{file}");
    }
    let finetune = run_into(&finetune_dir, &["--seed", "2", "--set", "ablations=[\"finetune\"]"]);
    assert_eq!(finetune["label"], "finetune");

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(lander_dir.join("metrics.json")).unwrap()).unwrap();
    let config = lander_dir.join("config.lock");
    let checkpoint = lander_dir.join("ckpt/task_2.bin");
    let eval = stdout_json(&lander(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
    ]));
    assert_eq!(eval["task"], 2);
    assert_eq!(eval["task_accuracy"], metrics["per_task"][1]);
    assert_eq!(eval["union_accuracy"], metrics["acc"]);

    let generated = root.path().join("generated");
    let generate = stdout_json(&lander(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        lander_dir.join("ckpt/task_1.bin").to_str().unwrap(),
        "--out",
        generated.to_str().unwrap(),
    ]));
    assert_eq!(generate["samples"], 8);
    let regenerated = fs::read(generated.join("memory/task_2.mem")).unwrap();
    assert_eq!(regenerated, fs::read(lander_dir.join("memory/task_2.mem")).unwrap());

    let report_dir = root.path().join("report");
    let output = lander(&[
        "report",
        lander_dir.to_str().unwrap(),
        finetune_dir.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let table = fs::read_to_string(report_dir.join("table.txt")).unwrap();
    assert!(table.contains("lander") && table.contains("finetune"));
    let curves = fs::read_to_string(report_dir.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
}

#[test]
fn identical_sequential_runs_write_identical_metrics() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_into(&a, &["--sequential"]);
    run_into(&b, &["--sequential"]);
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}
