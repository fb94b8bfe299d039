//! Result-surface emission: metrics JSON, per-metric training curves, and
//! the confusion-matrix plot.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{ConfusionMatrix, EvalReport};
use crate::plot::{
    render_confusion_grid, render_line_chart, ConfusionGrid, LineChart, Series, TRAIN_COLOR,
    VAL_COLOR,
};
use crate::train::TrainHistory;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("history has no epochs")]
    EmptyHistory,
    #[error("cannot write to {path}: {source}")]
    UnwritableDirectory {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The files produced by one report run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub metrics_json_path: PathBuf,
    /// `(metric name, path)` for accuracy, precision, recall, and loss.
    pub curves_image_paths: Vec<(String, PathBuf)>,
    pub confusion_plot_path: PathBuf,
}

impl ReportBundle {
    /// Every listed file must exist and be non-empty.
    pub fn validate(&self) -> Result<(), ReportError> {
        let mut paths = vec![&self.metrics_json_path, &self.confusion_plot_path];
        paths.extend(self.curves_image_paths.iter().map(|(_, p)| p));
        for path in paths {
            let meta = std::fs::metadata(path).map_err(|source| {
                ReportError::UnwritableDirectory {
                    path: path.clone(),
                    source,
                }
            })?;
            if meta.len() == 0 {
                return Err(ReportError::UnwritableDirectory {
                    path: path.clone(),
                    source: std::io::Error::other("file is empty"),
                });
            }
        }
        Ok(())
    }
}

/// The four curve surfaces extracted from a history.
pub(crate) const CURVE_METRICS: [&str; 4] = ["accuracy", "precision", "recall", "loss"];

/// Per-metric (epoch, train, validation) triples handed to the renderer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CurveData {
    pub metric: String,
    pub epochs: Vec<usize>,
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

pub(crate) fn curve_data(history: &TrainHistory, metric: &str) -> CurveData {
    let pick = |e: &crate::train::EpochMetrics| -> (f64, f64) {
        match metric {
            "accuracy" => (e.train_accuracy, e.val_accuracy),
            "precision" => (e.train_precision, e.val_precision),
            "recall" => (e.train_recall, e.val_recall),
            "loss" => (e.train_loss, e.val_loss),
            other => unreachable!("unknown curve metric {other}"),
        }
    };
    CurveData {
        metric: metric.to_string(),
        epochs: history.entries.iter().map(|e| e.epoch).collect(),
        train: history.entries.iter().map(|e| pick(e).0).collect(),
        validation: history.entries.iter().map(|e| pick(e).1).collect(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::UnwritableDirectory {
        path: dir.to_path_buf(),
        source,
    })
}

/// Render one PNG per metric (train vs validation over epochs), named
/// `curve_<metric>.png`.
pub fn plot_curves(
    history: &TrainHistory,
    out_dir: &Path,
) -> Result<Vec<(String, PathBuf)>, ReportError> {
    if history.entries.is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    ensure_dir(out_dir)?;
    let mut outputs = Vec::with_capacity(CURVE_METRICS.len());
    for metric in CURVE_METRICS {
        let data = curve_data(history, metric);
        let chart = LineChart {
            title: metric.to_string(),
            x_label: "epoch".into(),
            y_label: metric.to_string(),
            y_range: if metric == "loss" { None } else { Some((0.0, 1.0)) },
            series: vec![
                Series {
                    name: "train".into(),
                    color: TRAIN_COLOR,
                    points: data
                        .epochs
                        .iter()
                        .zip(&data.train)
                        .map(|(&e, &v)| (e as f64, v))
                        .collect(),
                },
                Series {
                    name: "validation".into(),
                    color: VAL_COLOR,
                    points: data
                        .epochs
                        .iter()
                        .zip(&data.validation)
                        .map(|(&e, &v)| (e as f64, v))
                        .collect(),
                },
            ],
        };
        let path = out_dir.join(format!("curve_{metric}.png"));
        render_line_chart(&chart, &path).map_err(|source| ReportError::UnwritableDirectory {
            path: path.clone(),
            source,
        })?;
        outputs.push((metric.to_string(), path));
    }
    Ok(outputs)
}

/// Render the 2x2 annotated confusion grid.
pub fn plot_confusion(cm: &ConfusionMatrix, out_path: &Path) -> Result<PathBuf, ReportError> {
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let grid = ConfusionGrid {
        title: "confusion matrix".into(),
        cells: [[cm.tp, cm.fn_], [cm.fp, cm.tn]],
    };
    render_confusion_grid(&grid, out_path).map_err(|source| ReportError::UnwritableDirectory {
        path: out_path.to_path_buf(),
        source,
    })?;
    Ok(out_path.to_path_buf())
}

/// Serialize the evaluation report as pretty JSON, newline-terminated,
/// at full float precision.
pub fn write_metrics_json(report: &EvalReport, out_path: &Path) -> Result<PathBuf, ReportError> {
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(out_path, json).map_err(|source| ReportError::UnwritableDirectory {
        path: out_path.to_path_buf(),
        source,
    })?;
    Ok(out_path.to_path_buf())
}

/// Parse a metrics JSON file written by [`write_metrics_json`].
pub fn read_metrics_json(path: &Path) -> Result<EvalReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::UnwritableDirectory {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Emit the full bundle into one directory.
pub fn generate_bundle(
    history: &TrainHistory,
    eval_report: &EvalReport,
    out_dir: &Path,
) -> Result<ReportBundle, ReportError> {
    ensure_dir(out_dir)?;
    let curves = plot_curves(history, out_dir)?;
    let confusion = plot_confusion(&eval_report.confusion, &out_dir.join("confusion_matrix.png"))?;
    let metrics = write_metrics_json(eval_report, &out_dir.join("metrics.json"))?;
    let bundle = ReportBundle {
        metrics_json_path: metrics,
        curves_image_paths: curves,
        confusion_plot_path: confusion,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochMetrics;
    use ndarray::Array1;

    fn history(epochs: usize) -> TrainHistory {
        let entries = (1..=epochs)
            .map(|epoch| EpochMetrics {
                epoch,
                train_loss: 0.7 / epoch as f64,
                val_loss: 0.8 / epoch as f64,
                train_accuracy: 1.0 - 0.5 / epoch as f64,
                train_precision: 1.0 - 0.4 / epoch as f64,
                train_recall: 1.0 - 0.3 / epoch as f64,
                val_accuracy: 1.0 - 0.6 / epoch as f64,
                val_precision: 1.0 - 0.5 / epoch as f64,
                val_recall: 1.0 - 0.45 / epoch as f64,
            })
            .collect();
        TrainHistory::from_entries(entries, None).unwrap()
    }

    fn paper_report() -> EvalReport {
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        for i in 0..200 {
            labels.push(1.0);
            probs.push(if i < 187 { 0.9 } else { 0.1 });
        }
        for i in 0..200 {
            labels.push(0.0);
            probs.push(if i < 195 { 0.1 } else { 0.9 });
        }
        EvalReport::from_scores(&Array1::from_vec(labels), &Array1::from_vec(probs), 0.5).unwrap()
    }

    #[test]
    fn ten_epoch_history_yields_four_curves_with_ten_samples() {
        let dir = tempfile::tempdir().unwrap();
        let h = history(10);
        let curves = plot_curves(&h, dir.path()).unwrap();
        assert_eq!(curves.len(), 4);
        let names: Vec<&str> = curves.iter().map(|(m, _)| m.as_str()).collect();
        assert_eq!(names, vec!["accuracy", "precision", "recall", "loss"]);
        for (metric, path) in &curves {
            assert!(path.ends_with(format!("curve_{metric}.png")));
            assert!(std::fs::metadata(path).unwrap().len() > 0);
        }
        // the numbers fed to the renderer carry one sample per epoch
        for metric in CURVE_METRICS {
            let data = curve_data(&h, metric);
            assert_eq!(data.epochs, (1..=10).collect::<Vec<_>>());
            assert_eq!(data.train.len(), 10);
            assert_eq!(data.validation.len(), 10);
        }
    }

    #[test]
    fn single_epoch_history_renders() {
        let dir = tempfile::tempdir().unwrap();
        let curves = plot_curves(&history(1), dir.path()).unwrap();
        assert_eq!(curves.len(), 4);
    }

    #[test]
    fn empty_history_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainHistory {
            entries: vec![],
            best_epoch: 0,
            best_checkpoint_path: None,
        };
        assert!(matches!(
            plot_curves(&h, dir.path()).unwrap_err(),
            ReportError::EmptyHistory
        ));
    }

    #[test]
    fn confusion_grid_cells_match_matrix_fields() {
        let cm = ConfusionMatrix::new(187, 13, 195, 5);
        // the grid handed to the renderer must mirror the matrix exactly
        let grid = [[cm.tp, cm.fn_], [cm.fp, cm.tn]];
        assert_eq!(grid, [[187, 13], [5, 195]]);
        let dir = tempfile::tempdir().unwrap();
        let path = plot_confusion(&cm, &dir.path().join("cm.png")).unwrap();
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }

    #[test]
    fn confusion_plot_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ConfusionMatrix::new(1, 0, 1, 0);
        let a = plot_confusion(&cm, &dir.path().join("a.png")).unwrap();
        let b = plot_confusion(&cm, &dir.path().join("b.png")).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn metrics_json_round_trips_at_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let report = paper_report();
        let path = write_metrics_json(&report, &dir.path().join("metrics.json")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        let back = read_metrics_json(&path).unwrap();
        assert_eq!(back, report);
        assert!((back.accuracy - 0.955).abs() < 1e-15);
        assert!((back.sensitivity - 0.935).abs() < 1e-15);
        assert!((back.specificity - 0.975).abs() < 1e-15);
        assert!((back.f1_paper - 0.9545811518324608).abs() < 1e-12);
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let report = paper_report();
        let err = write_metrics_json(&report, Path::new("/proc/definitely/not/writable.json"))
            .unwrap_err();
        match err {
            ReportError::UnwritableDirectory { path, .. } => {
                assert!(path.to_string_lossy().contains("/proc/definitely"));
            }
            other => panic!("expected UnwritableDirectory, got {other}"),
        }
    }

    #[test]
    fn bundle_generates_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate_bundle(&history(3), &paper_report(), &dir.path().join("out")).unwrap();
        bundle.validate().unwrap();
        assert_eq!(bundle.curves_image_paths.len(), 4);
    }
}
