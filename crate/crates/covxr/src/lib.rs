//! Chest X-ray COVID-19 pneumonia classification pipeline.
//!
//! This crate provides the full training and evaluation stack for a binary
//! CXR classifier built on a pretrained convolutional backbone:
//!
//! - [`dataset`] — CSV manifests, class balancing by undersampling,
//!   patient-disjoint train/validation splitting, and seeded batch streaming
//! - [`preprocess`] — the augmentation chain (channel reversal, center
//!   zoom-crop, bilinear resize, vertical flip, mean standardization)
//! - [`model`] — the classifier (pluggable backbone + pooled dense head),
//!   binary cross-entropy loss, and checkpoint round-trip
//! - [`train`] — the Adam training loop with per-epoch metric tracking
//! - [`eval`] — confusion matrix, sensitivity/specificity/F1/accuracy
//! - [`saliency`] — input-gradient attribution heatmaps and overlays
//! - [`report`] — metric JSON and training-curve / confusion-matrix plots
//!
//! All randomness enters through explicit integer seeds; every pipeline
//! stage is a deterministic function of its inputs and seed.

pub mod dataset;
pub mod eval;
pub mod imagebuf;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod report;
pub mod saliency;
pub mod train;

mod plot;
mod util;

pub use dataset::{DatasetManifest, Label, SampleRecord, View};
pub use eval::{ConfusionMatrix, EvalReport};
pub use imagebuf::{ChannelOrder, ImageBuffer};
pub use model::{bce_loss, build_classifier, load_checkpoint, save_checkpoint, Classifier, ModelSpec};
pub use preprocess::AugmentConfig;
pub use saliency::SaliencyMap;
pub use train::{EpochMetrics, TrainConfig, TrainHistory};
