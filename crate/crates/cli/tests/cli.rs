//! End-to-end runs of the binary on a miniature experiment.

use std::path::Path;
use std::process::Command;

fn masklab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_masklab"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
        task = "addmul"
        seeds = [1, 2]
        [model]
        kind = "ffn"
        layers = [42, 32, 20]
        [optimizer]
        batch_size = 16
        [mask]
        beta = 16e-4
        samples_per_batch = 4
        [train]
        steps = 120
        [eval]
        samples = 256
        batch_size = 128
        [[stage]]
        name = "full"
        filter = "all"
        steps = 60
        [[stage]]
        name = "add"
        filter = "op=add"
        steps = 60
        [[assert]]
        metric = "accuracy/none/all"
        min = 0.0
        [[assert]]
        metric = "accuracy/full/all"
        max = 100.0
        "#,
    )
    .unwrap();
    path
}

#[test]
fn train_mask_eval_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("runs");

    let status = masklab()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "train failed");
    assert!(out.join("seed1/weights.mklb").exists());
    assert!(out.join("seed2/weights.mklb").exists());

    let status = masklab()
        .args(["mask", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "mask failed");

    // re-running mask is a no-op on the stored checkpoints
    let bytes_before = std::fs::read(out.join("seed1/weights.mklb")).unwrap();
    let status = masklab()
        .args(["mask", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let bytes_after = std::fs::read(out.join("seed1/weights.mklb")).unwrap();
    assert_eq!(bytes_before, bytes_after, "idempotent rerun must not rewrite artifacts");

    let output = masklab()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--assert")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("report.json").exists());
    assert!(out.join("accuracy.csv").exists());
    assert!(out.join("sharing_layers.csv").exists());
    assert!(out.join("behavior.csv").exists());

    // report re-render from JSON
    let render = dir.path().join("render");
    let status = masklab()
        .args(["report", "--in"])
        .arg(out.join("report.json"))
        .arg("--out")
        .arg(&render)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(render.join("accuracy.csv").exists());
}

#[test]
fn assert_flag_fails_on_impossible_bound() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("failing.toml");
    std::fs::write(
        &config_path,
        r#"
        task = "addmul"
        seeds = [1]
        [model]
        kind = "ffn"
        layers = [42, 16, 20]
        [optimizer]
        batch_size = 16
        [train]
        steps = 5
        [eval]
        samples = 128
        [[stage]]
        name = "full"
        filter = "all"
        steps = 5
        [[assert]]
        metric = "accuracy/none/all"
        min = 99.9
        "#,
    )
    .unwrap();
    let out = dir.path().join("runs");
    assert!(masklab()
        .args(["train", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(masklab()
        .args(["mask", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let output = masklab()
        .args(["eval", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .arg("--assert")
        .output()
        .unwrap();
    assert!(
        !output.status.success(),
        "--assert must exit nonzero when a bound fails"
    );
    assert!(String::from_utf8_lossy(&output.stderr).contains("assertion failed"));
}

#[test]
fn missing_checkpoint_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let output = masklab()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("nothing"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("train"));
}

#[test]
fn precision_64_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("runs64");
    let status = masklab()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--seed", "9", "--precision", "64", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    // a 64-bit checkpoint refuses to load as 32-bit
    let output = masklab()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--seed", "9", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("precision"));
}
