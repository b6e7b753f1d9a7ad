//! End-to-end tests of the command-line surface: exit codes, artifact
//! layout, and bit-reproducibility of checkpoints and images.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inpaint"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

const TINY_CONFIG: &str = r#"
seed = 7

[schedule]
t_total = 20

[training]
steps = 40
lr = 0.02
batch = 2
corpus_size = 48
log_every = 10

[noise_opt]
tau_iter = 3
tau_round = 2

[guidance]
s_guide = 5
"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn missing_config_exits_with_config_code_and_names_path() {
    let out = run(&["train", "--config", "/nonexistent/nowhere.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("/nonexistent/nowhere.toml"), "stderr: {msg}");
}

#[test]
fn unknown_config_key_is_rejected_fail_closed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "definitely_not_a_key = 1\n").unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_arm_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run(&[
        "inpaint",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/ckpt.json",
        "--arm",
        "turbo",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_checkpoint_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run(&[
        "inpaint",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        dir.path().join("missing.json").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_is_reproducible_and_inpaint_arms_emit_distinct_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();

    // train twice with the same config and seed
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["train", "--config", cfg_s, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("checkpoint.json").exists());
        assert!(out_dir.join("loss_curve.csv").exists());
        assert!(out_dir.join("config.toml").exists());
    }
    let ck_a = std::fs::read(dir.path().join("a/checkpoint.json")).unwrap();
    let ck_b = std::fs::read(dir.path().join("b/checkpoint.json")).unwrap();
    assert_eq!(ck_a, ck_b, "same config + seed must give identical checkpoints");

    // loss curve has one row per logging interval plus the final step
    let curve = std::fs::read_to_string(dir.path().join("a/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4 + 1, "header + steps 0,10,20,30 + final");

    // all four arms on one scene emit distinct files
    let ck = dir.path().join("a/checkpoint.json");
    let arms_dir = dir.path().join("arms");
    for arm in ["base", "prino", "degu", "full"] {
        let out = run(&[
            "inpaint",
            "--config",
            cfg_s,
            "--checkpoint",
            ck.to_str().unwrap(),
            "--arm",
            arm,
            "--scene",
            "10002",
            "--trace",
            "--out",
            arms_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    for arm in ["base", "prino", "degu", "full"] {
        assert!(arms_dir.join(format!("output_{arm}.ppm")).exists());
    }
    assert!(arms_dir.join("input.ppm").exists());
    assert!(arms_dir.join("mask.ppm").exists());
    assert!(arms_dir.join("guidance_trace.csv").exists());

    // rerunning one arm reproduces the image bytes exactly
    let first = std::fs::read(arms_dir.join("output_full.ppm")).unwrap();
    let rerun_dir = dir.path().join("rerun");
    let out = run(&[
        "inpaint",
        "--config",
        cfg_s,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--arm",
        "full",
        "--scene",
        "10002",
        "--out",
        rerun_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let second = std::fs::read(rerun_dir.join("output_full.ppm")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn out_root_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let root = dir.path().join("custom-root");
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("INPAINT_OUT_ROOT", root.to_str().unwrap())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("train/checkpoint.json").exists());
}
