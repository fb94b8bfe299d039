//! Input-gradient saliency maps and heatmap overlays.
//!
//! The attribution is the vanilla input gradient: the derivative of the
//! scalar sigmoid output with respect to every input pixel, taken in
//! inference mode, reduced over channels by maximum absolute value and
//! min-max normalized.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagebuf::{stack_batch, ChannelOrder, ImageBuffer};
use crate::model::{Classifier, ModelError};
use crate::preprocess::{resize_bilinear, PreprocessError};

/// Name recorded in overlay sidecars; the palette is a piecewise-linear
/// approximation of the standard viridis table over nine anchors.
pub const COLORMAP_NAME: &str = "viridis";

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("expected a preprocessed {expected}x{expected}x3 image, got {got}")]
    ShapeMismatch { expected: usize, got: String },
    #[error("model does not expose input gradients")]
    NonDifferentiableModel,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// A per-pixel attribution map in [0, 1] with the spatial size of the
/// preprocessed model input.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Array2<f64>,
}

impl SaliencyMap {
    pub fn from_values(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Min-max rescale to [0, 1]. Constant maps (including all-zero ones)
    /// normalize to all-zero, so the result always has max 1 or is 0
    /// everywhere. Idempotent.
    pub fn normalized(&self) -> Self {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Self {
                values: Array2::zeros(self.values.raw_dim()),
            };
        }
        let scale = 1.0 / (max - min);
        Self {
            values: self.values.mapv(|v| (v - min) * scale),
        }
    }
}

/// Compute the input-gradient saliency map for one preprocessed image.
pub fn input_gradient_saliency(
    clf: &Classifier,
    img: &ImageBuffer,
) -> Result<SaliencyMap, SaliencyError> {
    let s = clf.spec().input_size;
    if img.height() != s || img.width() != s || img.channels() != 3 {
        return Err(SaliencyError::ShapeMismatch {
            expected: s,
            got: format!("{}x{}x{}", img.height(), img.width(), img.channels()),
        });
    }
    let batch = stack_batch(std::slice::from_ref(img));
    let (grad, _probs) = clf.input_gradient(&batch)?;
    let mut heat = Array2::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let mut m: f64 = 0.0;
            for c in 0..3 {
                m = m.max(grad[(0, c, y, x)].abs());
            }
            heat[(y, x)] = m;
        }
    }
    Ok(SaliencyMap::from_values(heat).normalized())
}

/// Piecewise-linear viridis palette: value in [0, 1] to RGB in [0, 1].
pub fn colormap(v: f64) -> [f64; 3] {
    const ANCHORS: [[f64; 3]; 9] = [
        [0.267004, 0.004874, 0.329415],
        [0.275191, 0.194905, 0.496005],
        [0.229739, 0.322361, 0.545706],
        [0.172719, 0.448791, 0.557885],
        [0.127568, 0.566949, 0.550556],
        [0.157851, 0.683765, 0.501686],
        [0.288921, 0.790398, 0.373814],
        [0.515992, 0.864846, 0.226898],
        [0.993248, 0.906157, 0.143936],
    ];
    let v = v.clamp(0.0, 1.0);
    let pos = v * (ANCHORS.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(ANCHORS.len() - 1);
    let t = pos - lo as f64;
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        rgb[c] = ANCHORS[lo][c] * (1.0 - t) + ANCHORS[hi][c] * t;
    }
    rgb
}

/// Blend a colormapped heatmap over the grayscale rendering of the
/// original image: `(1 - alpha) * gray + alpha * heat`, quantized to
/// 8-bit RGB at the original size.
pub fn overlay(
    map: &SaliencyMap,
    original: &ImageBuffer,
    alpha: f64,
) -> Result<ImageBuffer, SaliencyError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SaliencyError::InvalidAlpha(alpha));
    }
    let (h, w) = (original.height(), original.width());

    // resample the map to the original size when shapes differ
    let heat = if (map.height(), map.width()) == (h, w) {
        map.values().clone()
    } else {
        let as_img = ImageBuffer::from_array(
            map.values()
                .clone()
                .into_shape_with_order((map.height(), map.width(), 1))
                .expect("reshape to single channel"),
            ChannelOrder::Rgb,
        )
        .expect("valid map raster");
        let resized = resize_bilinear(&as_img, h, w)?;
        let data = resized.into_data();
        Array2::from_shape_fn((h, w), |(y, x)| data[(y, x, 0)])
    };

    let gray_at = |y: usize, x: usize| -> f64 {
        let d = original.data();
        if original.channels() == 1 {
            d[(y, x, 0)]
        } else {
            // Rec. 601 luma; BGR buffers have their channels mapped back
            let (r, g, b) = match original.channel_order() {
                ChannelOrder::Rgb => (d[(y, x, 0)], d[(y, x, 1)], d[(y, x, 2)]),
                ChannelOrder::Bgr => (d[(y, x, 2)], d[(y, x, 1)], d[(y, x, 0)]),
            };
            0.299 * r + 0.587 * g + 0.114 * b
        }
    };

    let mut out = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let g = gray_at(y, x);
            let rgb = colormap(heat[(y, x)].clamp(0.0, 1.0));
            for c in 0..3 {
                let v = (1.0 - alpha) * g + alpha * rgb[c] * 255.0;
                out[(y, x, c)] = v.round().clamp(0.0, 255.0);
            }
        }
    }
    Ok(ImageBuffer::from_array(out, ChannelOrder::Rgb).expect("valid overlay raster"))
}

/// Metadata written next to each overlay PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub alpha: f64,
    pub colormap: String,
    pub checkpoint_sha256: String,
}

impl SaliencySidecar {
    pub fn new(alpha: f64, checkpoint_sha256: impl Into<String>) -> Self {
        Self {
            alpha,
            colormap: COLORMAP_NAME.to_string(),
            checkpoint_sha256: checkpoint_sha256.into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        json.push('\n');
        std::fs::write(path, json)
    }
}
