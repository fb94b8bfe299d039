//! The classifier: a pluggable convolutional backbone under a pooled,
//! batch-normalized dense head with a sigmoid output.

pub mod weights;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::backbone::{ConvStack, ConvStackCache, STAND_IN_ID};
use crate::nn::layers::ParamRef;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu2, relu2_backward, sigmoid, BatchNorm1d, Dense,
    Dropout,
};
use crate::util::derive_seed;

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before logs.
pub const EPSILON: f64 = 1e-7;

/// Canonical pretrained backbone identifier.
pub const RESNET50_IMAGENET: &str = "resnet50-imagenet";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone id {0:?}")]
    UnknownBackbone(String),
    #[error("failed to load backbone weights: {reason}")]
    WeightLoadFailure { reason: String },
    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("length mismatch: {left} labels vs {right} probabilities")]
    LengthMismatch { left: usize, right: usize },
    #[error("checkpoint serialization failure at {path}: {reason}")]
    SerializationFailure { path: PathBuf, reason: String },
    #[error("incompatible spec: {0}")]
    IncompatibleSpec(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

/// Architecture hyperparameters. The defaults mirror the published
/// configuration: frozen ImageNet-pretrained backbone, a 256-wide head,
/// and a 224-pixel square input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone_id: String,
    pub freeze_backbone: bool,
    pub head_width: usize,
    pub dropout_rate: f64,
    pub input_size: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone_id: RESNET50_IMAGENET.to_string(),
            freeze_backbone: true,
            head_width: 256,
            dropout_rate: 0.5,
            input_size: 224,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.head_width == 0 {
            return Err(ModelError::InvalidSpec("head_width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidSpec(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.input_size < 8 {
            return Err(ModelError::InvalidSpec(format!(
                "input_size {} below minimum 8",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// The trainable head: global average pooling, a relu dense layer,
/// batch normalization, dropout, and a single sigmoid output unit.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub(crate) dense1: Dense,
    pub(crate) bn: BatchNorm1d,
    pub(crate) dropout: Dropout,
    pub(crate) dense2: Dense,
}

impl Head {
    fn new(feature_width: usize, head_width: usize, dropout_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dense1: Dense::he(feature_width, head_width, &mut rng),
            bn: BatchNorm1d::new(head_width),
            dropout: Dropout::new(dropout_rate),
            dense2: Dense::glorot(head_width, 1, &mut rng),
        }
    }

    fn parameter_count(&self) -> usize {
        self.dense1.parameter_count() + self.bn.parameter_count() + self.dense2.parameter_count()
    }

    fn trainable_parameter_count(&self) -> usize {
        self.dense1.parameter_count() + 2 * self.bn.features() + self.dense2.parameter_count()
    }
}

/// Cache for one training-mode forward pass. The backbone activations are
/// retained only when the backbone itself is trainable.
pub struct ForwardCache {
    backbone: Option<ConvStackCache>,
    spatial: (usize, usize),
    features: Array2<f64>,
    a1: Array2<f64>,
    bn_cache: crate::nn::layers::BnCache,
    dropout_mask: Array2<f64>,
    dropped: Array2<f64>,
    probs: Array1<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &Array1<f64> {
        &self.probs
    }
}

/// The assembled classifier.
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ModelSpec,
    backbone: ConvStack,
    head: Head,
    training_mode: bool,
}

/// Resolve the backbone weights cache directory:
/// `$COVXR_CACHE`, else `$HOME/.cache/covxr`, else `./.covxr-cache`.
pub fn weights_cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("COVXR_CACHE") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    if let Ok(home) = std::env::var("HOME") {
        if !home.is_empty() {
            return Path::new(&home).join(".cache").join("covxr");
        }
    }
    PathBuf::from(".covxr-cache")
}

/// Build a classifier from a spec.
///
/// With `use_pretrained = false` the backbone is a randomly initialized
/// stand-in (seeded by `init_seed`) with the same interface, so the whole
/// stack runs without any published weights. With `use_pretrained = true`
/// the backbone id must resolve to a weights archive in the cache
/// directory.
pub fn build_classifier(
    spec: &ModelSpec,
    use_pretrained: bool,
    init_seed: u64,
) -> Result<Classifier, ModelError> {
    build_classifier_with_cache(spec, use_pretrained, init_seed, &weights_cache_dir())
}

/// [`build_classifier`] with an explicit weights cache directory.
pub fn build_classifier_with_cache(
    spec: &ModelSpec,
    use_pretrained: bool,
    init_seed: u64,
    cache_dir: &Path,
) -> Result<Classifier, ModelError> {
    spec.validate()?;
    let backbone = if use_pretrained {
        resolve_pretrained(&spec.backbone_id, cache_dir)?
    } else {
        ConvStack::stand_in(derive_seed(init_seed, &[10]))
    };
    Classifier::assemble(spec.clone(), backbone, derive_seed(init_seed, &[11]))
}

fn resolve_pretrained(backbone_id: &str, cache_dir: &Path) -> Result<ConvStack, ModelError> {
    if backbone_id == STAND_IN_ID {
        return Err(ModelError::WeightLoadFailure {
            reason: "the stand-in backbone has no published weights; build with use_pretrained = false".into(),
        });
    }
    let archive = cache_dir.join(format!("{backbone_id}.covw"));
    if archive.exists() {
        return weights::load_backbone_archive(&archive, backbone_id);
    }
    if backbone_id == RESNET50_IMAGENET {
        return Err(ModelError::WeightLoadFailure {
            reason: format!(
                "weights archive not found at {}; export the pretrained backbone there or set COVXR_CACHE",
                archive.display()
            ),
        });
    }
    Err(ModelError::UnknownBackbone(backbone_id.to_string()))
}

impl Classifier {
    pub(crate) fn assemble(
        spec: ModelSpec,
        backbone: ConvStack,
        head_seed: u64,
    ) -> Result<Self, ModelError> {
        let spatial = backbone
            .out_spatial(spec.input_size, spec.input_size)
            .filter(|&(h, w)| h >= 1 && w >= 1)
            .ok_or_else(|| {
                ModelError::IncompatibleSpec(format!(
                    "backbone {:?} cannot consume {}x{} inputs",
                    backbone.id(),
                    spec.input_size,
                    spec.input_size
                ))
            })?;
        let _ = spatial;
        let feature_width = backbone.feature_channels(3);
        let head = Head::new(feature_width, spec.head_width, spec.dropout_rate, head_seed);
        Ok(Self {
            spec,
            backbone,
            head,
            training_mode: false,
        })
    }

    pub(crate) fn from_parts(spec: ModelSpec, backbone: ConvStack, head: Head) -> Self {
        Self {
            spec,
            backbone,
            head,
            training_mode: false,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn backbone_id(&self) -> &str {
        self.backbone.id()
    }

    pub fn training_mode(&self) -> bool {
        self.training_mode
    }

    pub fn set_training_mode(&mut self, on: bool) {
        self.training_mode = on;
    }

    /// Feature channels delivered by the backbone to the pooled head.
    pub fn feature_width(&self) -> usize {
        self.backbone.feature_channels(3)
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<(), ModelError> {
        let (_, c, h, w) = batch.dim();
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(ModelError::ShapeMismatch {
                expected: format!("(n, 3, {s}, {s})"),
                got: format!("{:?}", batch.dim()),
            });
        }
        Ok(())
    }

    /// Inference-mode probabilities, one per image. Deterministic: dropout
    /// is disabled and batch norm uses its running statistics.
    pub fn predict_proba(&self, batch: &Array4<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_input(batch)?;
        let features_map = self.backbone.forward_no_cache(batch);
        let features = global_avg_pool(&features_map);
        let a1 = relu2(&self.head.dense1.forward(&features));
        let b1 = self.head.bn.forward_eval(&a1);
        let z2 = self.head.dense2.forward(&b1);
        Ok(sigmoid(&z2.column(0).to_owned()))
    }

    /// Training-mode forward pass; dropout noise comes from `step_seed`.
    pub fn forward_train(
        &mut self,
        batch: &Array4<f64>,
        step_seed: u64,
    ) -> Result<ForwardCache, ModelError> {
        self.check_input(batch)?;
        self.training_mode = true;
        let (features_map, backbone_cache) = if self.spec.freeze_backbone {
            (self.backbone.forward_no_cache(batch), None)
        } else {
            let (f, cache) = self.backbone.forward(batch);
            (f, Some(cache))
        };
        let (_, _, fh, fw) = features_map.dim();
        let features = global_avg_pool(&features_map);
        let a1 = relu2(&self.head.dense1.forward(&features));
        let (b1, bn_cache) = self.head.bn.forward_train(&a1);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let (dropped, dropout_mask) = self.head.dropout.forward_train(&b1, &mut rng);
        let z2 = self.head.dense2.forward(&dropped);
        let probs = sigmoid(&z2.column(0).to_owned());
        Ok(ForwardCache {
            backbone: backbone_cache,
            spatial: (fh, fw),
            features,
            a1,
            bn_cache,
            dropout_mask,
            dropped,
            probs,
        })
    }

    /// Backpropagate a gradient with respect to the output probabilities.
    /// With a frozen backbone the chain stops at the head; nothing below
    /// the pooled features needs a gradient.
    pub fn backward_train(&mut self, cache: &ForwardCache, dloss_dp: &Array1<f64>) {
        let p = &cache.probs;
        let dz2_vec: Array1<f64> = dloss_dp * &p.mapv(|v| v * (1.0 - v));
        let n = dz2_vec.len();
        let dz2 = dz2_vec.into_shape_with_order((n, 1)).expect("column vector");
        let g = self.head.dense2.backward(&cache.dropped, &dz2);
        let g = Dropout::backward(&cache.dropout_mask, &g);
        let g = self.head.bn.backward_train(&cache.bn_cache, &g);
        let g = relu2_backward(&cache.a1, &g);
        let g = self.head.dense1.backward(&cache.features, &g);
        if let Some(backbone_cache) = &cache.backbone {
            let g4 = global_avg_pool_backward(cache.spatial, &g);
            self.backbone.backward(backbone_cache, &g4, true);
        }
    }

    /// Gradient of the scalar sigmoid output with respect to every input
    /// pixel, in inference mode. Returns the per-image probability too.
    pub fn input_gradient(&self, batch: &Array4<f64>) -> Result<(Array4<f64>, Array1<f64>), ModelError> {
        self.check_input(batch)?;
        let (features_map, backbone_cache) = self.backbone.forward(batch);
        let (_, _, fh, fw) = features_map.dim();
        let features = global_avg_pool(&features_map);
        let a1 = relu2(&self.head.dense1.forward(&features));
        let b1 = self.head.bn.forward_eval(&a1);
        let z2 = self.head.dense2.forward(&b1);
        let probs = sigmoid(&z2.column(0).to_owned());

        // seed gradient: d p / d z2 = p (1 - p)
        let n = probs.len();
        let dz2 = probs
            .mapv(|v| v * (1.0 - v))
            .into_shape_with_order((n, 1))
            .expect("column vector");
        let g = self.head.dense2.backward_input_only(&dz2);
        let g = self.head.bn.backward_eval_input(&g);
        let g = relu2_backward(&a1, &g);
        let g = self.head.dense1.backward_input_only(&g);
        let g4 = global_avg_pool_backward((fh, fw), &g);
        let gin = self.backbone.backward_input_only(&backbone_cache, &g4);
        Ok((gin, probs))
    }

    /// Trainable parameters in a fixed order: unfrozen backbone first,
    /// then the head.
    pub fn trainable_params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut params = Vec::new();
        if !self.spec.freeze_backbone {
            params.extend(self.backbone.params_mut());
        }
        let Head {
            dense1,
            bn,
            dense2,
            ..
        } = &mut self.head;
        params.extend(dense1.params_mut());
        params.extend(bn.params_mut());
        params.extend(dense2.params_mut());
        params
    }

    /// All head tensors, including batch-norm running statistics.
    pub fn head_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }

    /// Parameters the optimizer may update under the current spec.
    pub fn trainable_parameter_count(&self) -> usize {
        let head = self.head.trainable_parameter_count();
        if self.spec.freeze_backbone {
            head
        } else {
            head + self.backbone.parameter_count()
        }
    }

    /// Byte image of the backbone parameters (for freeze verification).
    pub fn backbone_parameter_bytes(&self) -> Vec<u8> {
        self.backbone.parameter_bytes()
    }

    pub(crate) fn backbone(&self) -> &ConvStack {
        &self.backbone
    }

    pub(crate) fn head(&self) -> &Head {
        &self.head
    }

    #[cfg(test)]
    pub(crate) fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }
}

/// Mean binary cross-entropy with natural logs.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs, so the
/// loss is finite for saturated predictions.
pub fn bce_loss(labels: &Array1<f64>, probs: &Array1<f64>) -> Result<f64, ModelError> {
    if labels.len() != probs.len() {
        return Err(ModelError::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    if labels.is_empty() {
        return Err(ModelError::LengthMismatch { left: 0, right: 0 });
    }
    let mut total = 0.0;
    for (&y, &p) in labels.iter().zip(probs.iter()) {
        let p = p.clamp(EPSILON, 1.0 - EPSILON);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to the (unclamped) probabilities.
/// Zero where the clamp saturates, matching the computed loss exactly.
pub fn bce_loss_gradient(labels: &Array1<f64>, probs: &Array1<f64>) -> Result<Array1<f64>, ModelError> {
    if labels.len() != probs.len() {
        return Err(ModelError::LengthMismatch {
            left: labels.len(),
            right: probs.len(),
        });
    }
    let n = labels.len() as f64;
    let mut grad = Array1::zeros(labels.len());
    for (i, (&y, &p)) in labels.iter().zip(probs.iter()).enumerate() {
        if p < EPSILON || p > 1.0 - EPSILON {
            grad[i] = 0.0;
        } else {
            grad[i] = (p - y) / (p * (1.0 - p)) / n;
        }
    }
    Ok(grad)
}

/// Serialize the full classifier (spec, backbone, head, and batch-norm
/// running statistics) to a self-describing versioned binary file.
pub fn save_checkpoint(clf: &Classifier, path: &Path) -> Result<(), ModelError> {
    weights::save_checkpoint(clf, path)
}

/// Restore a classifier saved by [`save_checkpoint`]. The rebuilt model
/// starts in inference mode and predicts bit-identically.
pub fn load_checkpoint(path: &Path) -> Result<Classifier, ModelError> {
    weights::load_checkpoint(path)
}
