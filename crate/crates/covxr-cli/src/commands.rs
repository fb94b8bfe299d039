//! Subcommand implementations wiring the library pipeline stages together.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covxr::dataset::{self, DatasetManifest, Label, SampleRecord, View};
use covxr::model::weights::file_sha256;
use covxr::preprocess::preprocess_eval;
use covxr::saliency::{input_gradient_saliency, overlay, SaliencySidecar};
use covxr::train::{train, TrainConfig, TrainHistory};
use covxr::{
    build_classifier, eval, load_checkpoint, report, ImageBuffer,
};

use crate::config::RunConfig;
use crate::UsageError;

/// Directory names (lowercased) accepted as class folders.
const POSITIVE_DIRS: [&str; 6] = ["covid", "covid-19", "covid19", "positive", "pos", "1"];
const NEGATIVE_DIRS: [&str; 7] = ["normal", "negative", "neg", "non-covid", "noncovid", "healthy", "0"];

fn classify_dir(name: &str) -> Option<Label> {
    let lower = name.to_ascii_lowercase();
    if POSITIVE_DIRS.contains(&lower.as_str()) {
        Some(Label::Positive)
    } else if NEGATIVE_DIRS.contains(&lower.as_str()) {
        Some(Label::Negative)
    } else {
        None
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn synthesize_patient_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Convert a `<class>/<image>` directory layout into a manifest CSV.
pub fn cmd_prepare(raw_dir: &Path, out_manifest: &Path) -> Result<()> {
    if !raw_dir.is_dir() {
        bail!(UsageError(format!("{} is not a directory", raw_dir.display())));
    }
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut counts = [0usize; 2];
    let mut class_dirs = 0usize;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(raw_dir)
        .with_context(|| format!("cannot list {}", raw_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for entry in entries {
        if !entry.is_dir() {
            continue;
        }
        let name = entry
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Some(label) = classify_dir(&name) else {
            bail!(UsageError(format!(
                "unknown class directory {name:?}; accepted positive names: {POSITIVE_DIRS:?}, negative names: {NEGATIVE_DIRS:?}"
            )));
        };
        class_dirs += 1;
        let mut images: Vec<PathBuf> = walkdir::WalkDir::new(&entry)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| is_image(p))
            .collect();
        images.sort();
        for image_path in images {
            counts[label.as_u8() as usize] += 1;
            records.push(SampleRecord {
                patient_id: synthesize_patient_id(&image_path),
                image_path,
                label,
                view: View::Unknown,
            });
        }
    }
    if class_dirs == 0 {
        bail!(UsageError(format!(
            "{} contains no class directories (expected <class>/<image> layout)",
            raw_dir.display()
        )));
    }
    let manifest = DatasetManifest::new(records, "prepared");
    dataset::write_manifest(&manifest, out_manifest)
        .with_context(|| format!("cannot write manifest {}", out_manifest.display()))?;
    println!("negative: {}", counts[0]);
    println!("positive: {}", counts[1]);
    println!("wrote {} rows to {}", manifest.len(), out_manifest.display());
    Ok(())
}

/// Balance, split, build, and train; writes history, best checkpoint, and
/// the config snapshot into the output directory.
pub fn cmd_train(cfg: &RunConfig, train_manifest: &Path, out_dir: &Path) -> Result<()> {
    let manifest = dataset::load_manifest(train_manifest)?;
    let balanced = dataset::balance_classes(&manifest, cfg.seed)?;
    let (train_set, val_set) = dataset::split_train_val(&balanced, cfg.train_fraction, cfg.seed)?;
    println!(
        "balanced {} scans per class; split {} train / {} validation",
        balanced.len() / 2,
        train_set.len(),
        val_set.len()
    );
    let mut clf = build_classifier(&cfg.spec, cfg.use_pretrained, cfg.seed)?;
    cfg.write_snapshot(out_dir)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        checkpoint_dir: out_dir.to_path_buf(),
        augment: cfg.augment.clone(),
        threshold: cfg.threshold,
    };
    let total = cfg.epochs;
    let history = train(&mut clf, &train_set, &val_set, &train_cfg, |e| {
        println!(
            "epoch {}/{} train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            e.epoch, total, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    })?;
    println!(
        "best epoch {} (val accuracy {:.4}); checkpoint {}",
        history.best_epoch,
        history.entries[history.best_epoch - 1].val_accuracy,
        history
            .best_checkpoint_path
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    Ok(())
}

/// Score a test manifest with a checkpoint; writes metrics JSON and the
/// confusion plot.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, test_manifest: &Path, out_dir: &Path) -> Result<()> {
    let clf = load_checkpoint(checkpoint)?;
    let test = dataset::load_manifest(test_manifest)?;
    let mut aug = cfg.augment.clone();
    aug.target_size = clf.spec().input_size;
    let report_data = eval::evaluate(&clf, &test, &aug, cfg.threshold)?;
    cfg.write_snapshot(out_dir)?;
    let json_path = report::write_metrics_json(&report_data, &out_dir.join("metrics.json"))?;
    let plot_path = report::plot_confusion(&report_data.confusion, &out_dir.join("confusion_matrix.png"))?;
    println!(
        "n={} accuracy={:.4} sensitivity={:.4} specificity={:.4} f1={:.4}",
        report_data.n_samples,
        report_data.accuracy,
        report_data.sensitivity,
        report_data.specificity,
        report_data.f1_paper
    );
    println!("metrics: {}", json_path.display());
    println!("confusion plot: {}", plot_path.display());
    Ok(())
}

/// Score one image: prints `<path> <probability> <label>`.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, image_path: &Path) -> Result<()> {
    let clf = load_checkpoint(checkpoint)?;
    let raw = ImageBuffer::from_file(image_path)?;
    let mut aug = cfg.augment.clone();
    aug.target_size = clf.spec().input_size;
    let processed = preprocess_eval(&raw, &aug)?;
    let batch = covxr::imagebuf::stack_batch(std::slice::from_ref(&processed));
    let p = clf.predict_proba(&batch)?[0];
    let label = u8::from(p >= cfg.threshold);
    println!("{} {:.6} {}", image_path.display(), p, label);
    Ok(())
}

/// Write a saliency overlay PNG plus its metadata sidecar.
pub fn cmd_saliency(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    out_png: &Path,
    alpha: f64,
) -> Result<()> {
    let clf = load_checkpoint(checkpoint)?;
    let raw = ImageBuffer::from_file(image_path)?;
    let mut aug = cfg.augment.clone();
    aug.target_size = clf.spec().input_size;
    let processed = preprocess_eval(&raw, &aug)?;
    let map = input_gradient_saliency(&clf, &processed)?;
    let composite = overlay(&map, &raw, alpha)?;
    if let Some(parent) = out_png.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    composite.save_png(out_png)?;
    let sidecar_path = out_png.with_extension("json");
    let hash = file_sha256(checkpoint)
        .with_context(|| format!("cannot hash {}", checkpoint.display()))?;
    SaliencySidecar::new(alpha, hash)
        .save(&sidecar_path)
        .with_context(|| format!("cannot write {}", sidecar_path.display()))?;
    println!("overlay: {}", out_png.display());
    println!("sidecar: {}", sidecar_path.display());
    Ok(())
}

/// Regenerate the full report bundle from a history file and metrics JSON.
pub fn cmd_report(cfg: &RunConfig, history_path: &Path, eval_json: &Path, out_dir: &Path) -> Result<()> {
    let history = TrainHistory::from_jsonl_file(history_path)?;
    let eval_report = report::read_metrics_json(eval_json)?;
    cfg.write_snapshot(out_dir)?;
    let bundle = report::generate_bundle(&history, &eval_report, out_dir)?;
    println!("metrics: {}", bundle.metrics_json_path.display());
    for (metric, path) in &bundle.curves_image_paths {
        println!("curve {metric}: {}", path.display());
    }
    println!("confusion plot: {}", bundle.confusion_plot_path.display());
    Ok(())
}
