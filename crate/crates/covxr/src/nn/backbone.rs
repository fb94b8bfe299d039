//! The convolutional feature extractor beneath the classifier head.
//!
//! The backbone is consumed as an opaque stack of relu-activated
//! convolutions: the desk-scale stand-in is a small seeded random stack,
//! and pretrained weights load from a self-describing archive (see
//! `model::weights`) so heavier published extractors can be plugged in
//! behind the same interface.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, ParamRef};
use super::{relu4, relu4_backward};

/// Backbone id served by [`ConvStack::stand_in`].
pub const STAND_IN_ID: &str = "standin";

/// A sequential stack of relu-activated convolutions.
///
/// An empty stack acts as the identity feature extractor (the raw image
/// channels become the features), which keeps head-only gradient checks
/// backbone-free.
#[derive(Debug, Clone)]
pub struct ConvStack {
    id: String,
    convs: Vec<Conv2d>,
}

/// Forward activations kept for the backward pass: `acts[0]` is the input,
/// `acts[i + 1]` the post-relu output of conv `i`.
pub struct ConvStackCache {
    acts: Vec<Array4<f64>>,
}

impl ConvStack {
    /// Small random feature extractor for desk-scale runs and tests:
    /// two stride-4 convolutions, 3 → 8 → 16 channels. Accepts inputs of
    /// 16×16 pixels and up.
    pub fn stand_in(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            Conv2d::he(3, 8, 4, 4, 0, &mut rng),
            Conv2d::he(8, 16, 4, 4, 0, &mut rng),
        ];
        Self {
            id: STAND_IN_ID.to_string(),
            convs,
        }
    }

    /// Pass-through extractor with no parameters.
    pub fn identity() -> Self {
        Self {
            id: "identity".to_string(),
            convs: Vec::new(),
        }
    }

    pub fn from_convs(id: impl Into<String>, convs: Vec<Conv2d>) -> Self {
        Self {
            id: id.into(),
            convs,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// Feature channels produced for an input with the given channel count.
    pub fn feature_channels(&self, input_channels: usize) -> usize {
        self.convs
            .last()
            .map_or(input_channels, Conv2d::out_channels)
    }

    /// Spatial size of the feature map for an input of the given size.
    pub fn out_spatial(&self, mut h: usize, mut w: usize) -> Option<(usize, usize)> {
        for conv in &self.convs {
            let (oh, ow) = conv.out_spatial(h, w)?;
            h = oh;
            w = ow;
        }
        Some((h, w))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvStackCache) {
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(x.clone());
        for conv in &self.convs {
            let y = relu4(&conv.forward(acts.last().expect("non-empty")));
            acts.push(y);
        }
        let features = acts.last().expect("non-empty").clone();
        (features, ConvStackCache { acts })
    }

    /// Forward pass without retaining activations (inference, or training
    /// with frozen backbone parameters).
    pub fn forward_no_cache(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = relu4(&conv.forward(&cur));
        }
        cur
    }

    /// Backpropagate to the input. Parameter gradients accumulate only
    /// when `accumulate_params` is set (frozen backbones skip them).
    pub fn backward(
        &mut self,
        cache: &ConvStackCache,
        gout: &Array4<f64>,
        accumulate_params: bool,
    ) -> Array4<f64> {
        let mut g = gout.clone();
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            g = relu4_backward(&cache.acts[i + 1], &g);
            g = conv.backward(&cache.acts[i], &g, accumulate_params);
        }
        g
    }

    /// Input gradient without mutating any state (inference-mode path).
    pub fn backward_input_only(&self, cache: &ConvStackCache, gout: &Array4<f64>) -> Array4<f64> {
        let mut g = gout.clone();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            g = relu4_backward(&cache.acts[i + 1], &g);
            g = conv.backward_input_only(cache.acts[i].dim(), &g);
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        self.convs.iter_mut().flat_map(Conv2d::params_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(Conv2d::parameter_count).sum()
    }

    /// Flat little-endian byte image of all parameters, for change detection.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for conv in &self.convs {
            for v in conv.w.iter().chain(conv.b.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }
}
