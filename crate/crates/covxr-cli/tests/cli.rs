//! End-to-end tests of the `covxr` binary: the full pipeline over a tiny
//! synthetic corpus, plus exit-code behavior on bad inputs.

use std::path::Path;
use std::process::{Command, Output};

fn covxr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_covxr"))
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes an 8-bit grayscale PNG whose brightness depends on the class.
fn write_image(path: &Path, positive: bool, variant: u32) {
    let side = 40u32;
    let mut img = image::GrayImage::new(side, side);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let base: u32 = if positive { 190 } else { 50 };
        let v = base + (x * 3 + y * 5 + variant * 7) % 40;
        p.0[0] = v.min(255) as u8;
    }
    img.save(path).unwrap();
}

fn make_raw_layout(root: &Path, n_pos: usize, n_neg: usize) {
    let pos = root.join("covid");
    let neg = root.join("normal");
    std::fs::create_dir_all(&pos).unwrap();
    std::fs::create_dir_all(&neg).unwrap();
    for i in 0..n_pos {
        write_image(&pos.join(format!("p{i:03}.png")), true, i as u32);
    }
    for i in 0..n_neg {
        write_image(&neg.join(format!("n{i:03}.png")), false, i as u32);
    }
}

fn write_config(path: &Path) {
    std::fs::write(
        path,
        "model.use_pretrained=false\n\
         model.input_size=16\n\
         model.head_width=8\n\
         model.dropout_rate=0.2\n\
         augment.target_size=16\n\
         augment.zoom_max=1.1\n\
         train.epochs=1\n\
         train.batch_size=4\n\
         train.learning_rate=0.001\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    make_raw_layout(&raw, 8, 10);
    let manifest = dir.path().join("train.csv");
    let config = dir.path().join("run.cfg");
    write_config(&config);
    let out_dir = dir.path().join("out");

    // prepare
    let out = covxr()
        .args(["prepare"])
        .arg(&raw)
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success(), "prepare failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("positive: 8"), "stdout: {text}");
    assert!(text.contains("negative: 10"), "stdout: {text}");
    assert!(manifest.exists());
    let rows = std::fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(rows, 19, "header plus 18 data rows");

    // train
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .args(["--seed", "11", "--out-dir"])
        .arg(&out_dir)
        .arg("train")
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("epoch 1/1"), "stdout: {text}");
    assert!(out_dir.join("run_config").exists());
    assert!(out_dir.join("history.jsonl").exists());
    let ckpt = out_dir.join("best.ckpt");
    assert!(ckpt.exists());
    let snapshot = std::fs::read_to_string(out_dir.join("run_config")).unwrap();
    assert!(snapshot.contains("seed=11"), "snapshot: {snapshot}");
    assert!(snapshot.contains("train.epochs=1"));
    let history_lines = std::fs::read_to_string(out_dir.join("history.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(history_lines, 1);

    // evaluate (reusing the training manifest as a stand-in test set)
    let eval_dir = dir.path().join("eval");
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&eval_dir)
        .arg("evaluate")
        .arg(&ckpt)
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
    let metrics_path = eval_dir.join("metrics.json");
    assert!(metrics_path.exists());
    assert!(eval_dir.join("confusion_matrix.png").exists());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).unwrap()).unwrap();
    for key in [
        "threshold",
        "n_samples",
        "confusion",
        "sensitivity",
        "specificity",
        "f1_paper",
        "f1_conventional",
        "accuracy",
    ] {
        assert!(metrics.get(key).is_some(), "metrics.json missing {key}");
    }
    assert_eq!(metrics["n_samples"], 18);
    for key in ["tp", "fn", "tn", "fp"] {
        assert!(metrics["confusion"].get(key).is_some());
    }

    // predict: exactly one line, `<path> <probability> <label>`
    let sample = raw.join("covid").join("p000.png");
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .arg("predict")
        .arg(&ckpt)
        .arg(&sample)
        .output()
        .unwrap();
    assert!(out.status.success(), "predict failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one output line, got: {text}");
    let fields: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(fields.len(), 3);
    assert!(fields[0].ends_with("p000.png"));
    let p: f64 = fields[1].parse().unwrap();
    assert!(p > 0.0 && p < 1.0, "probability {p}");
    assert!(fields[2] == "0" || fields[2] == "1");

    // saliency overlay + sidecar
    let overlay = dir.path().join("overlay.png");
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .arg("saliency")
        .arg(&ckpt)
        .arg(&sample)
        .arg(&overlay)
        .args(["--alpha", "0.4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "saliency failed: {}", stderr_of(&out));
    assert!(overlay.exists());
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("overlay.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["alpha"], 0.4);
    assert_eq!(sidecar["colormap"], "viridis");
    assert_eq!(sidecar["checkpoint_sha256"].as_str().unwrap().len(), 64);
    // overlay matches the original image size
    let img = image::open(&overlay).unwrap();
    assert_eq!((img.width(), img.height()), (40, 40));

    // report bundle from the history + metrics files
    let report_dir = dir.path().join("report");
    let out = covxr()
        .args(["--out-dir"])
        .arg(&report_dir)
        .arg("report")
        .arg(out_dir.join("history.jsonl"))
        .arg(&metrics_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "report failed: {}", stderr_of(&out));
    for name in [
        "metrics.json",
        "confusion_matrix.png",
        "curve_accuracy.png",
        "curve_precision.png",
        "curve_recall.png",
        "curve_loss.png",
    ] {
        let path = report_dir.join(name);
        assert!(path.exists(), "missing {name}");
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }
}

#[test]
fn prepare_rejects_unknown_class_directory() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    std::fs::create_dir_all(raw.join("mystery")).unwrap();
    write_image(&raw.join("mystery").join("x.png"), true, 0);
    let out = covxr()
        .arg("prepare")
        .arg(&raw)
        .arg(dir.path().join("m.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("mystery"));
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = covxr()
        .arg("train")
        .arg(dir.path().join("nope.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let img = dir.path().join("img.png");
    write_image(&img, false, 0);
    let out = covxr().arg("predict").arg(&ckpt).arg(&img).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "train.epoch=3\n").unwrap();
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .arg("train")
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_image_for_predict_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // a real checkpoint but a missing image
    let config = dir.path().join("run.cfg");
    write_config(&config);
    let raw = dir.path().join("raw");
    make_raw_layout(&raw, 3, 3);
    let manifest = dir.path().join("m.csv");
    let out_dir = dir.path().join("out");
    assert!(covxr()
        .arg("prepare")
        .arg(&raw)
        .arg(&manifest)
        .output()
        .unwrap()
        .status
        .success());
    assert!(covxr()
        .args(["--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(&out_dir)
        .arg("train")
        .arg(&manifest)
        .output()
        .unwrap()
        .status
        .success());
    let out = covxr()
        .args(["--config"])
        .arg(&config)
        .arg("predict")
        .arg(out_dir.join("best.ckpt"))
        .arg(dir.path().join("ghost.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}
