//! The training loop: Adam over binary cross-entropy with per-epoch
//! train/validation metric tracking and best-checkpoint selection.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batches, DatasetError, DatasetManifest};
use crate::model::{bce_loss, bce_loss_gradient, save_checkpoint, Classifier, ModelError};
use crate::nn::Adam;
use crate::preprocess::{augment_train, preprocess_eval, AugmentConfig, PreprocessError};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("train/validation sets overlap: {0}")]
    OverlappingSets(String),
    #[error("length mismatch: {left} labels vs {right} probabilities")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid history: {0}")]
    InvalidHistory(String),
}

/// Training-run settings. The defaults follow the published regime:
/// ten epochs of batch-64 Adam.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Augmentation applied during the training pass; evaluation passes use
    /// the deterministic chain with the same target size and means.
    pub augment: AugmentConfig,
    /// Decision threshold for the tracked accuracy/precision/recall.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 42,
            checkpoint_dir: PathBuf::from("checkpoints"),
            augment: AugmentConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        self.augment
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

/// Threshold metrics over one set of scored samples.
///
/// Ratios with a zero denominator are reported as 0.0 with the matching
/// `*_defined` flag cleared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Accuracy, precision, and recall at a threshold (prediction positive iff
/// probability >= threshold).
pub fn epoch_metrics(
    labels: &Array1<f64>,
    probs: &Array1<f64>,
    threshold: f64,
) -> Result<RateMetrics, TrainError> {
    if labels.len() != probs.len() {
        return Err(TrainError::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    if labels.is_empty() {
        return Err(TrainError::EmptySet("metric input"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&y, &p) in labels.iter().zip(probs.iter()) {
        let positive = p >= threshold;
        match (y >= 0.5, positive) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let n = labels.len() as f64;
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    Ok(RateMetrics {
        accuracy: (tp + tn) as f64 / n,
        precision: if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        },
        recall: if recall_defined {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        },
        precision_defined,
        recall_defined,
    })
}

/// One epoch's tracked surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub train_precision: f64,
    pub train_recall: f64,
    pub val_accuracy: f64,
    pub val_precision: f64,
    pub val_recall: f64,
}

/// Complete run record: the per-epoch metrics plus which epoch won.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<EpochMetrics>,
    /// Epoch with the highest validation accuracy (ties go to the earliest).
    pub best_epoch: usize,
    /// Where the best checkpoint was written, when training saved one.
    pub best_checkpoint_path: Option<PathBuf>,
}

impl TrainHistory {
    /// Validate entries (consecutive epochs from 1, rates in [0, 1]) and
    /// recompute the best epoch.
    pub fn from_entries(
        entries: Vec<EpochMetrics>,
        best_checkpoint_path: Option<PathBuf>,
    ) -> Result<Self, TrainError> {
        if entries.is_empty() {
            return Err(TrainError::InvalidHistory("no epochs recorded".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.epoch != i + 1 {
                return Err(TrainError::InvalidHistory(format!(
                    "epoch indices must be consecutive from 1; entry {i} has epoch {}",
                    e.epoch
                )));
            }
            for (name, v) in [
                ("train_accuracy", e.train_accuracy),
                ("train_precision", e.train_precision),
                ("train_recall", e.train_recall),
                ("val_accuracy", e.val_accuracy),
                ("val_precision", e.val_precision),
                ("val_recall", e.val_recall),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(TrainError::InvalidHistory(format!(
                        "{name} {v} outside [0, 1] at epoch {}",
                        e.epoch
                    )));
                }
            }
            if e.train_loss < 0.0
                || e.val_loss < 0.0
                || !e.train_loss.is_finite()
                || !e.val_loss.is_finite()
            {
                return Err(TrainError::InvalidHistory(format!(
                    "losses must be finite and nonnegative at epoch {}",
                    e.epoch
                )));
            }
        }
        let best_epoch = Self::best_epoch_of(&entries);
        Ok(Self {
            entries,
            best_epoch,
            best_checkpoint_path,
        })
    }

    fn best_epoch_of(entries: &[EpochMetrics]) -> usize {
        let mut best = 1;
        let mut best_acc = f64::NEG_INFINITY;
        for e in entries {
            if e.val_accuracy > best_acc {
                best_acc = e.val_accuracy;
                best = e.epoch;
            }
        }
        best
    }

    /// Parse a JSON-lines history file (one [`EpochMetrics`] per line).
    pub fn from_jsonl_file(path: &Path) -> Result<Self, TrainError> {
        let file = File::open(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| TrainError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EpochMetrics = serde_json::from_str(&line)
                .map_err(|e| TrainError::InvalidHistory(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Self::from_entries(entries, None)
    }
}

/// History file name written beside the checkpoints.
pub const HISTORY_FILE: &str = "history.jsonl";
/// Best-checkpoint file name.
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";

fn check_disjoint(
    train_set: &DatasetManifest,
    val_set: &DatasetManifest,
) -> Result<(), TrainError> {
    let train_paths: std::collections::HashSet<_> =
        train_set.records.iter().map(|r| &r.image_path).collect();
    if let Some(shared) = val_set
        .records
        .iter()
        .find(|r| train_paths.contains(&r.image_path))
    {
        return Err(TrainError::OverlappingSets(format!(
            "image {} appears in both sets",
            shared.image_path.display()
        )));
    }
    let train_patients = train_set.patient_ids();
    if let Some(shared) = val_set
        .records
        .iter()
        .find(|r| train_patients.contains(r.patient_id.as_str()))
    {
        return Err(TrainError::OverlappingSets(format!(
            "patient {} appears in both sets",
            shared.patient_id
        )));
    }
    Ok(())
}

/// Run the full training regime.
///
/// Each epoch makes one augmented pass over the training set (an Adam
/// update per batch), then scores the whole validation set with the
/// deterministic evaluation pipeline. The model with the best validation
/// accuracy is checkpointed into `cfg.checkpoint_dir` and per-epoch
/// metrics are appended to a JSON-lines file beside it. `on_epoch` fires
/// after every epoch with the fresh entry.
pub fn train(
    clf: &mut Classifier,
    train_set: &DatasetManifest,
    val_set: &DatasetManifest,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    check_disjoint(train_set, val_set)?;

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(|source| TrainError::Io {
        path: cfg.checkpoint_dir.clone(),
        source,
    })?;
    let history_path = cfg.checkpoint_dir.join(HISTORY_FILE);
    let mut history_file = File::create(&history_path).map_err(|source| TrainError::Io {
        path: history_path.clone(),
        source,
    })?;
    let best_path = cfg.checkpoint_dir.join(BEST_CHECKPOINT_FILE);

    let aug = cfg.augment.clone();
    let train_pipe = move |img: &crate::imagebuf::ImageBuffer, seed: u64| {
        augment_train(img, seed, &aug).map_err(|e| e.to_string())
    };
    let aug_eval = cfg.augment.clone();
    let eval_pipe = move |img: &crate::imagebuf::ImageBuffer, _seed: u64| {
        preprocess_eval(img, &aug_eval).map_err(|e| e.to_string())
    };

    let mut adam = Adam::new(cfg.learning_rate);
    let mut entries: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        // training pass
        let mut train_labels: Vec<f64> = Vec::with_capacity(train_set.len());
        let mut train_probs: Vec<f64> = Vec::with_capacity(train_set.len());
        let mut loss_sum = 0.0;
        let stream = batches(train_set, cfg.batch_size, cfg.seed, epoch, &train_pipe)?;
        for (step, batch) in stream.enumerate() {
            let batch = batch?;
            let step_seed = derive_seed(cfg.seed, &[5, epoch as u64, step as u64]);
            let cache = clf.forward_train(&batch.images, step_seed)?;
            let loss = bce_loss(&batch.labels, cache.probabilities())?;
            let dloss = bce_loss_gradient(&batch.labels, cache.probabilities())?;
            clf.backward_train(&cache, &dloss);
            adam.step(&mut clf.trainable_params_mut());
            loss_sum += loss * batch.labels.len() as f64;
            train_labels.extend(batch.labels.iter());
            train_probs.extend(cache.probabilities().iter());
        }
        let train_labels = Array1::from_vec(train_labels);
        let train_probs = Array1::from_vec(train_probs);
        let train_loss = loss_sum / train_set.len() as f64;
        let tm = epoch_metrics(&train_labels, &train_probs, cfg.threshold)?;

        // validation pass (inference mode, deterministic pipeline)
        clf.set_training_mode(false);
        let mut val_labels: Vec<f64> = Vec::with_capacity(val_set.len());
        let mut val_probs: Vec<f64> = Vec::with_capacity(val_set.len());
        let stream = batches(val_set, cfg.batch_size, cfg.seed, epoch, &eval_pipe)?;
        for batch in stream {
            let batch = batch?;
            let probs = clf.predict_proba(&batch.images)?;
            val_labels.extend(batch.labels.iter());
            val_probs.extend(probs.iter());
        }
        let val_labels = Array1::from_vec(val_labels);
        let val_probs = Array1::from_vec(val_probs);
        let val_loss = bce_loss(&val_labels, &val_probs)?;
        let vm = epoch_metrics(&val_labels, &val_probs, cfg.threshold)?;

        let entry = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            train_accuracy: tm.accuracy,
            train_precision: tm.precision,
            train_recall: tm.recall,
            val_accuracy: vm.accuracy,
            val_precision: vm.precision,
            val_recall: vm.recall,
        };

        let line = serde_json::to_string(&entry)
            .map_err(|e| TrainError::InvalidHistory(e.to_string()))?;
        writeln!(history_file, "{line}").map_err(|source| TrainError::Io {
            path: history_path.clone(),
            source,
        })?;

        if vm.accuracy > best_acc {
            best_acc = vm.accuracy;
            best_epoch = epoch;
            save_checkpoint(clf, &best_path)?;
        }

        on_epoch(&entry);
        entries.push(entry);
    }

    clf.set_training_mode(false);
    Ok(TrainHistory {
        entries,
        best_epoch,
        best_checkpoint_path: Some(best_path),
    })
}
