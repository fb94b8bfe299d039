//! Held-out evaluation: the confusion matrix at a decision threshold and
//! the four summary metrics (sensitivity, specificity, the harmonic-mean
//! F1 over them, and accuracy).
//!
//! The reported `f1` is deliberately the harmonic mean of sensitivity and
//! specificity; the conventional precision/recall F1 is emitted alongside
//! it under `f1_conventional` to avoid ambiguity.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batches, DatasetError, DatasetManifest, Label};
use crate::model::{Classifier, ModelError};
use crate::preprocess::{preprocess_eval, AugmentConfig, PreprocessError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} labels vs {right} probabilities")]
    LengthMismatch { left: usize, right: usize },
    #[error("no positive-label samples (tp + fn = 0)")]
    NoPositives,
    #[error("no negative-label samples (tn + fp = 0)")]
    NoNegatives,
    #[error("sensitivity and specificity are both zero")]
    BothZero,
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("test set is empty")]
    EmptySet,
    #[error("test set is missing the {0:?} class")]
    MissingClass(Label),
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// 2x2 outcome counts at a decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        Self { tp, fn_, tn, fp }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    /// Positive-label sample count.
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    /// Negative-label sample count.
    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

/// Count outcomes; a prediction is positive iff `p >= threshold`.
pub fn confusion(
    labels: &Array1<f64>,
    probs: &Array1<f64>,
    threshold: f64,
) -> Result<ConfusionMatrix, EvalError> {
    if labels.len() != probs.len() {
        return Err(EvalError::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(probs.iter()) {
        match (y >= 0.5, p >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fp += 1,
        }
    }
    Ok(cm)
}

/// True-positive rate: tp / (tp + fn).
pub fn sensitivity(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.positives() == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(cm.tp as f64 / cm.positives() as f64)
}

/// True-negative rate: tn / (tn + fp).
pub fn specificity(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.negatives() == 0 {
        return Err(EvalError::NoNegatives);
    }
    Ok(cm.tn as f64 / cm.negatives() as f64)
}

/// Harmonic mean of sensitivity and specificity.
pub fn f1_paper(sens: f64, spec: f64) -> Result<f64, EvalError> {
    if sens + spec <= 0.0 {
        return Err(EvalError::BothZero);
    }
    Ok(2.0 * sens * spec / (sens + spec))
}

/// Fraction of correct predictions.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// Conventional F1 (harmonic mean of precision and recall); 0.0 when
/// undefined.
pub fn f1_conventional(cm: &ConfusionMatrix) -> f64 {
    let precision = if cm.tp + cm.fp > 0 {
        cm.tp as f64 / (cm.tp + cm.fp) as f64
    } else {
        0.0
    };
    let recall = if cm.positives() > 0 {
        cm.tp as f64 / cm.positives() as f64
    } else {
        0.0
    };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Full evaluation surface, serialized as the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub n_samples: usize,
    pub confusion: ConfusionMatrix,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1_paper: f64,
    pub f1_conventional: f64,
    pub accuracy: f64,
}

impl EvalReport {
    /// Assemble a report from per-sample scores. Both classes must be
    /// present.
    pub fn from_scores(
        labels: &Array1<f64>,
        probs: &Array1<f64>,
        threshold: f64,
    ) -> Result<Self, EvalError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(EvalError::InvalidThreshold(threshold));
        }
        let cm = confusion(labels, probs, threshold)?;
        if cm.positives() == 0 {
            return Err(EvalError::MissingClass(Label::Positive));
        }
        if cm.negatives() == 0 {
            return Err(EvalError::MissingClass(Label::Negative));
        }
        let sens = sensitivity(&cm)?;
        let spec = specificity(&cm)?;
        let f1 = f1_paper(sens, spec).unwrap_or(0.0);
        Ok(Self {
            threshold,
            n_samples: cm.total(),
            confusion: cm,
            sensitivity: sens,
            specificity: spec,
            f1_paper: f1,
            f1_conventional: f1_conventional(&cm),
            accuracy: accuracy(&cm)?,
        })
    }
}

/// Score a whole test manifest with the deterministic evaluation pipeline
/// and assemble the report.
pub fn evaluate(
    clf: &Classifier,
    test: &DatasetManifest,
    aug: &AugmentConfig,
    threshold: f64,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet);
    }
    for label in [Label::Positive, Label::Negative] {
        if test.class_count(label) == 0 {
            return Err(EvalError::MissingClass(label));
        }
    }
    let aug = aug.clone();
    let pipe = move |img: &crate::imagebuf::ImageBuffer, _seed: u64| {
        preprocess_eval(img, &aug).map_err(|e| e.to_string())
    };
    let mut labels: Vec<f64> = Vec::with_capacity(test.len());
    let mut probs: Vec<f64> = Vec::with_capacity(test.len());
    // epoch 0 with any seed: evaluation order does not affect the report
    for batch in batches(test, 64, 0, 0, &pipe)? {
        let batch = batch?;
        let p = clf.predict_proba(&batch.images)?;
        labels.extend(batch.labels.iter());
        probs.extend(p.iter());
    }
    EvalReport::from_scores(&Array1::from_vec(labels), &Array1::from_vec(probs), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;

    /// Scores matching the published test-set outcome: 200 positives with
    /// 187 above threshold, 200 negatives with 195 below.
    pub(crate) fn paper_scores() -> (Array1<f64>, Array1<f64>) {
        let mut labels = Vec::with_capacity(400);
        let mut probs = Vec::with_capacity(400);
        for i in 0..200 {
            labels.push(1.0);
            probs.push(if i < 187 { 0.9 } else { 0.1 });
        }
        for i in 0..200 {
            labels.push(0.0);
            probs.push(if i < 195 { 0.1 } else { 0.9 });
        }
        (Array1::from_vec(labels), Array1::from_vec(probs))
    }

    #[test]
    fn confusion_counts_match_paper_rates() {
        let (labels, probs) = paper_scores();
        let cm = confusion(&labels, &probs, 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(187, 13, 195, 5));
        assert!((accuracy(&cm).unwrap() - 0.955).abs() < 1e-12);
    }

    #[test]
    fn all_correct_two_samples() {
        let cm = confusion(&ndarray::array![1.0, 0.0], &ndarray::array![0.9, 0.1], 0.5).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 0, 1, 0));
    }

    #[test]
    fn sensitivity_specificity_edges() {
        assert!((sensitivity(&ConfusionMatrix::new(187, 13, 0, 0)).unwrap() - 0.935).abs() < 1e-12);
        assert_eq!(sensitivity(&ConfusionMatrix::new(5, 0, 0, 0)).unwrap(), 1.0);
        assert_eq!(sensitivity(&ConfusionMatrix::new(0, 5, 0, 0)).unwrap(), 0.0);
        assert!(matches!(
            sensitivity(&ConfusionMatrix::new(0, 0, 3, 3)).unwrap_err(),
            EvalError::NoPositives
        ));
        assert!((specificity(&ConfusionMatrix::new(0, 0, 195, 5)).unwrap() - 0.975).abs() < 1e-12);
        assert_eq!(specificity(&ConfusionMatrix::new(0, 0, 7, 0)).unwrap(), 1.0);
        assert_eq!(specificity(&ConfusionMatrix::new(0, 0, 0, 7)).unwrap(), 0.0);
        assert!(matches!(
            specificity(&ConfusionMatrix::new(3, 3, 0, 0)).unwrap_err(),
            EvalError::NoNegatives
        ));
    }

    #[test]
    fn f1_closed_forms() {
        let f1 = f1_paper(0.935, 0.975).unwrap();
        assert!((f1 - 2.0 * 0.935 * 0.975 / 1.91).abs() < 1e-15);
        // the published rounding truncates the third decimal
        assert_eq!((f1 * 1000.0).floor() / 1000.0, 0.954);
        assert!((f1_paper(0.7, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert!((f1_paper(1.0, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(f1_paper(0.0, 0.0).unwrap_err(), EvalError::BothZero));
    }

    #[test]
    fn accuracy_edges() {
        assert_eq!(accuracy(&ConfusionMatrix::new(3, 0, 4, 0)).unwrap(), 1.0);
        assert_eq!(accuracy(&ConfusionMatrix::new(0, 5, 0, 9)).unwrap(), 0.0);
        assert!(matches!(
            accuracy(&ConfusionMatrix::new(0, 0, 0, 0)).unwrap_err(),
            EvalError::EmptyMatrix
        ));
    }

    #[test]
    fn report_has_full_metric_surface() {
        let (labels, probs) = paper_scores();
        let r = EvalReport::from_scores(&labels, &probs, 0.5).unwrap();
        assert_eq!(r.n_samples, 400);
        assert!((r.sensitivity - 0.935).abs() < 1e-9);
        assert!((r.specificity - 0.975).abs() < 1e-9);
        assert!((r.accuracy - 0.955).abs() < 1e-9);
        assert!(r.f1_conventional > 0.9);
    }

    #[test]
    fn report_requires_both_classes() {
        let labels = Array1::from_vec(vec![1.0; 8]);
        let probs = Array1::from_vec(vec![0.7; 8]);
        let err = EvalReport::from_scores(&labels, &probs, 0.5).unwrap_err();
        assert!(matches!(err, EvalError::MissingClass(Label::Negative)));
    }

    #[test]
    fn report_json_round_trips_exactly() {
        let (labels, probs) = paper_scores();
        let r = EvalReport::from_scores(&labels, &probs, 0.5).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"fn\":13"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn accuracy_identity_on_random_matrices(
            tp in 0usize..500, fn_ in 0usize..500, tn in 0usize..500, fp in 0usize..500,
        ) {
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let cm = ConfusionMatrix::new(tp, fn_, tn, fp);
            let p = cm.positives() as f64;
            let n = cm.negatives() as f64;
            let acc = accuracy(&cm).unwrap();
            let sens = sensitivity(&cm).unwrap();
            let spec = specificity(&cm).unwrap();
            let identity = (sens * p + spec * n) / (p + n);
            prop_assert!((acc - identity).abs() < 1e-12);
        }

        #[test]
        fn f1_is_symmetric_and_below_arithmetic_mean(s in 0.001f64..1.0, p in 0.001f64..1.0) {
            let a = f1_paper(s, p).unwrap();
            let b = f1_paper(p, s).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a <= (s + p) / 2.0 + 1e-12);
        }

        #[test]
        fn confusion_matches_brute_force_recount(
            scores in proptest::collection::vec((proptest::bool::ANY, 0.0f64..1.0), 1..200),
            threshold in 0.05f64..0.95,
        ) {
            let labels = Array1::from_vec(scores.iter().map(|(y, _)| f64::from(u8::from(*y))).collect());
            let probs = Array1::from_vec(scores.iter().map(|(_, p)| *p).collect());
            let cm = confusion(&labels, &probs, threshold).unwrap();
            prop_assert_eq!(cm.total(), scores.len());
            let mut tp = 0; let mut fn_ = 0; let mut tn = 0; let mut fp = 0;
            for (y, p) in &scores {
                if *y { if *p >= threshold { tp += 1 } else { fn_ += 1 } }
                else if *p >= threshold { fp += 1 } else { tn += 1 }
            }
            prop_assert_eq!(cm, ConfusionMatrix::new(tp, fn_, tn, fp));
        }
    }
}
