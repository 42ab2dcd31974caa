use std::path::Path;
use std::process::{Command, Output};

fn meshformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshformer")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshformer(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn flops_table_for_small_preset() {
    let dir = tempfile::tempdir().unwrap();
    let rows = stdout_json(&meshformer(&["flops", "--preset", "S", "--json"], dir.path()));
    let ratio = rows[0]["ratio_transformer"].as_f64().unwrap();
    assert!((ratio - 0.97).abs() <= 0.02, "{ratio}");
    let text = meshformer(&["flops", "--preset", "all"], dir.path());
    assert!(text.status.success());
    assert_eq!(String::from_utf8_lossy(&text.stdout).lines().count(), 5);
}

#[test]
fn runtime_errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshformer(&["eval", "--checkpoint", "missing", "--data", "missing"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("missing"));
    assert_eq!(err["kind"], "Io");

    std::fs::write(dir.path().join("bad.json"), r#"{"data": "x", "unknown_key": 1}"#).unwrap();
    let out = meshformer(&["train", "--config", "bad.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
}

#[test]
fn generate_train_evaluate_and_roll_out() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let gen = meshformer(
        &["gen-data", "--out", "data", "--trajectories", "3", "--nodes", "40", "--steps", "8", "--seed", "2"],
        cwd,
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    std::fs::write(
        cwd.join("run.json"),
        r#"{
            "data": "data",
            "eval_data": "data",
            "model": {"d": 8, "layers": 1, "heads": 2},
            "train": {"schedule": {"kind": "constant", "lr": 1e-3, "total_iters": 20}, "log_every": 5},
            "seed": 4
        }"#,
    )
    .unwrap();
    let record = stdout_json(&meshformer(&["train", "--config", "run.json", "--out", "out"], cwd));
    assert!(record["final_all_rollout_metric"].as_f64().unwrap().is_finite());
    for file in ["config.json", "loss.csv", "run_record.json", "checkpoint/meta.json"] {
        assert!(cwd.join("out").join(file).exists(), "{file}");
    }
    let csv = std::fs::read_to_string(cwd.join("out/loss.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss"));

    let metrics = stdout_json(&meshformer(&["eval", "--checkpoint", "out/checkpoint", "--data", "data"], cwd));
    let one = metrics["model"]["mean"]["one_step"].as_f64().unwrap();
    let one_e3 = metrics["model"]["mean"]["one_step_e3"].as_f64().unwrap();
    assert!((one * 1e3 - one_e3).abs() <= 1e-12 * one_e3.abs().max(1.0));

    let roll = meshformer(
        &["rollout", "--checkpoint", "out/checkpoint", "--data", "data", "--steps", "4", "--out", "pred"],
        cwd,
    );
    assert!(roll.status.success(), "{}", String::from_utf8_lossy(&roll.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cwd.join("pred/traj_0002/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["T"], 5);

    std::fs::write(cwd.join("spec.json"), r#"{"dilation": "dilation2"}"#).unwrap();
    let preview = meshformer(&["augment-preview", "--data", "data/traj_0000", "--spec", "spec.json"], cwd);
    assert!(preview.status.success());
    assert!(String::from_utf8_lossy(&preview.stdout).contains("dilation A^2"));
}

#[test]
fn pretrain_then_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert!(meshformer(&["gen-data", "--out", "data", "--trajectories", "2", "--nodes", "30", "--steps", "6"], cwd)
        .status
        .success());
    std::fs::write(
        cwd.join("pre.json"),
        r#"{"data": "data", "model": {"d": 8, "layers": 1, "heads": 2},
            "train": {"schedule": {"kind": "constant", "lr": 1e-3, "total_iters": 10}}}"#,
    )
    .unwrap();
    let pre = meshformer(&["pretrain", "--config", "pre.json", "--mask-fraction", "0.2", "--out", "pre"], cwd);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));
    assert!(cwd.join("pre/encoder/meta.json").exists());
    std::fs::write(
        cwd.join("tune.json"),
        r#"{"data": "data", "init_from": "pre/encoder", "model": {"d": 8, "layers": 1, "heads": 2},
            "train": {"schedule": {"kind": "constant", "lr": 1e-3, "total_iters": 10}}}"#,
    )
    .unwrap();
    stdout_json(&meshformer(&["train", "--config", "tune.json", "--out", "tune"], cwd));
}

#[test]
fn scaling_fit_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let mut csv = String::from("budget,d,L,P,steps,final_loss,all_rollout,realized_flops\n");
    for (c, best) in [(1e9, 1000.0), (1e10, 5623.0), (1e11, 31623.0)] {
        for p in [best / 10.0, best, best * 10.0] {
            let loss = if p == best { 0.1 } else { 0.5 };
            csv.push_str(&format!("{c},8,1,{},60,{loss},,{c}\n", p as usize));
        }
    }
    std::fs::write(cwd.join("runs.csv"), csv).unwrap();
    let fit = stdout_json(&meshformer(&["scaling-fit", "--runs", "runs.csv", "--out", "fit"], cwd));
    let a = fit["fit"]["exponent"].as_f64().unwrap();
    assert!((a - 0.75).abs() < 1e-3, "{a}");
    assert!(cwd.join("fit/fit.json").exists());

    assert!(meshformer(&["gen-data", "--out", "data", "--trajectories", "2", "--nodes", "20", "--steps", "5"], cwd)
        .status
        .success());
    std::fs::write(
        cwd.join("sweep.json"),
        r#"{"data": "data", "budgets": [3e7, 6e7],
            "grid": [{"d": 4, "layers": 1, "heads": 1}, {"d": 8, "layers": 1, "heads": 2}, {"d": 8, "layers": 2, "heads": 2}],
            "train": {"schedule": {"kind": "constant", "lr": 1e-3, "total_iters": 1}}}"#,
    )
    .unwrap();
    let out = meshformer(&["scaling-sweep", "--config", "sweep.json", "--out", "sweep", "--workers", "2"], cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(cwd.join("sweep/runs.csv")).unwrap();
    assert_eq!(rows.lines().count(), 7);
}
