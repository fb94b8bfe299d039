//! The image preprocessing and augmentation chain.
//!
//! Training inputs pass through `to_three_channels → zoom_center_crop →
//! resize_bilinear → vertical_flip (probabilistic) → reverse_channels →
//! standardize`; evaluation inputs take the same path minus the zoom and
//! flip. Every step is a pure function and the training chain is a
//! deterministic function of its seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagebuf::{ChannelOrder, ImageBuffer};

/// Minimum height/width accepted by the pipelines and produced by cropping.
pub const MIN_DIMENSION: usize = 8;

/// BGR per-channel means published with the ImageNet-pretrained backbone.
pub const IMAGENET_BGR_MEANS: [f64; 3] = [103.939, 116.779, 123.68];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("unsupported channel count {0} (expected {1})")]
    UnsupportedChannelCount(usize, &'static str),
    #[error("degenerate crop: zoom factor {factor} on {height}x{width} yields {out_height}x{out_width} (minimum {MIN_DIMENSION})")]
    DegenerateCrop {
        factor: f64,
        height: usize,
        width: usize,
        out_height: usize,
        out_width: usize,
    },
    #[error("standardize expects BGR channel order; got RGB")]
    WrongChannelOrder,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Settings for the training augmentation chain and evaluation preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Side length of the square pipeline output.
    pub target_size: usize,
    /// Upper bound of the per-image random zoom factor (1.0 disables zoom).
    pub zoom_max: f64,
    /// Probability that a training image is flipped top-to-bottom.
    pub flip_probability: f64,
    /// Per-channel means subtracted after channel reversal, in BGR order.
    pub channel_means: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            zoom_max: 1.3,
            flip_probability: 0.5,
            channel_means: IMAGENET_BGR_MEANS,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_size < MIN_DIMENSION {
            return Err(PreprocessError::InvalidConfig(format!(
                "target_size {} below minimum {MIN_DIMENSION}",
                self.target_size
            )));
        }
        if self.zoom_max < 1.0 || !self.zoom_max.is_finite() {
            return Err(PreprocessError::InvalidConfig(format!(
                "zoom_max {} must be >= 1",
                self.zoom_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(PreprocessError::InvalidConfig(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// Replicate a grayscale image into three identical channels.
/// Three-channel inputs pass through unchanged.
pub fn to_three_channels(img: &ImageBuffer) -> Result<ImageBuffer, PreprocessError> {
    match img.channels() {
        3 => Ok(img.clone()),
        1 => {
            let (h, w, _) = img.data().dim();
            let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| img.data()[(y, x, 0)]);
            Ok(ImageBuffer::from_array(data, img.channel_order()).expect("valid 3-channel raster"))
        }
        n => Err(PreprocessError::UnsupportedChannelCount(n, "1 or 3")),
    }
}

/// Reverse the channel axis (RGB ↔ BGR) and flip the order flag.
pub fn reverse_channels(img: &ImageBuffer) -> Result<ImageBuffer, PreprocessError> {
    if img.channels() != 3 {
        return Err(PreprocessError::UnsupportedChannelCount(
            img.channels(),
            "3",
        ));
    }
    let (h, w, _) = img.data().dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| img.data()[(y, x, 2 - c)]);
    let order = match img.channel_order() {
        ChannelOrder::Rgb => ChannelOrder::Bgr,
        ChannelOrder::Bgr => ChannelOrder::Rgb,
    };
    Ok(ImageBuffer::from_array(data, order).expect("same shape"))
}

/// Crop the centered `floor(H/factor) × floor(W/factor)` sub-rectangle.
///
/// The top-left corner sits at `(floor((H-H')/2), floor((W-W')/2))`.
/// A factor of exactly 1 returns the input unchanged.
pub fn zoom_center_crop(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer, PreprocessError> {
    if factor < 1.0 || !factor.is_finite() {
        return Err(PreprocessError::InvalidConfig(format!(
            "zoom factor {factor} must be a finite value >= 1"
        )));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (h, w, c) = img.data().dim();
    let out_h = (h as f64 / factor).floor() as usize;
    let out_w = (w as f64 / factor).floor() as usize;
    if out_h < MIN_DIMENSION || out_w < MIN_DIMENSION {
        return Err(PreprocessError::DegenerateCrop {
            factor,
            height: h,
            width: w,
            out_height: out_h,
            out_width: out_w,
        });
    }
    let off_y = (h - out_h) / 2;
    let off_x = (w - out_w) / 2;
    let data = Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        img.data()[(y + off_y, x + off_x, ch)]
    });
    Ok(ImageBuffer::from_array(data, img.channel_order()).expect("non-degenerate crop"))
}

/// Bilinear resize to `h × w` with half-pixel-centered sampling.
/// Channel count and order are preserved; a same-size resize is exact.
pub fn resize_bilinear(img: &ImageBuffer, h: usize, w: usize) -> Result<ImageBuffer, PreprocessError> {
    if h < MIN_DIMENSION || w < MIN_DIMENSION {
        return Err(PreprocessError::InvalidConfig(format!(
            "resize target {h}x{w} below minimum {MIN_DIMENSION}"
        )));
    }
    let (src_h, src_w, c) = img.data().dim();
    let scale_y = src_h as f64 / h as f64;
    let scale_x = src_w as f64 / w as f64;
    let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let x1 = (x0 + 1).min(src_w - 1);
        let dy = sy - y0 as f64;
        let dx = sx - x0 as f64;
        let v00 = img.data()[(y0, x0, ch)];
        let v01 = img.data()[(y0, x1, ch)];
        let v10 = img.data()[(y1, x0, ch)];
        let v11 = img.data()[(y1, x1, ch)];
        v00 * (1.0 - dy) * (1.0 - dx)
            + v01 * (1.0 - dy) * dx
            + v10 * dy * (1.0 - dx)
            + v11 * dy * dx
    });
    Ok(ImageBuffer::from_array(data, img.channel_order()).expect("valid resize target"))
}

/// Reverse the row order (top-to-bottom mirror).
pub fn vertical_flip(img: &ImageBuffer) -> ImageBuffer {
    let (h, w, c) = img.data().dim();
    let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| img.data()[(h - 1 - y, x, ch)]);
    ImageBuffer::from_array(data, img.channel_order()).expect("same shape")
}

/// Subtract per-channel means from a BGR image.
pub fn standardize(img: &ImageBuffer, means: [f64; 3]) -> Result<ImageBuffer, PreprocessError> {
    if img.channels() != 3 {
        return Err(PreprocessError::UnsupportedChannelCount(
            img.channels(),
            "3",
        ));
    }
    if img.channel_order() != ChannelOrder::Bgr {
        return Err(PreprocessError::WrongChannelOrder);
    }
    let mut out = img.clone();
    for ((_, _, c), v) in out.data_mut().indexed_iter_mut() {
        *v -= means[c];
    }
    Ok(out)
}

/// The seeded training augmentation chain.
///
/// Draw order is fixed: first the zoom factor (uniform on [1, zoom_max]),
/// then the flip decision, so a given `(image, seed, config)` triple always
/// produces a bit-identical output.
pub fn augment_train(
    img: &ImageBuffer,
    rng_seed: u64,
    cfg: &AugmentConfig,
) -> Result<ImageBuffer, PreprocessError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let three = to_three_channels(img)?;
    let factor = 1.0 + rng.random::<f64>() * (cfg.zoom_max - 1.0);
    let cropped = zoom_center_crop(&three, factor)?;
    let resized = resize_bilinear(&cropped, cfg.target_size, cfg.target_size)?;
    let flipped = if rng.random::<f64>() < cfg.flip_probability {
        vertical_flip(&resized)
    } else {
        resized
    };
    let reversed = reverse_channels(&flipped)?;
    standardize(&reversed, cfg.channel_means)
}

/// The deterministic evaluation chain: no zoom, no flip.
pub fn preprocess_eval(img: &ImageBuffer, cfg: &AugmentConfig) -> Result<ImageBuffer, PreprocessError> {
    cfg.validate()?;
    let three = to_three_channels(img)?;
    let resized = resize_bilinear(&three, cfg.target_size, cfg.target_size)?;
    let reversed = reverse_channels(&resized)?;
    standardize(&reversed, cfg.channel_means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::RngCore;

    fn buf(h: usize, w: usize, c: usize) -> ImageBuffer {
        let data =
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| ((y * 31 + x * 7 + ch * 3) % 256) as f64);
        ImageBuffer::from_array(data, ChannelOrder::Rgb).unwrap()
    }

    #[test]
    fn replicates_grayscale_into_three_equal_channels() {
        let g = buf(100, 100, 1);
        let t = to_three_channels(&g).unwrap();
        assert_eq!(t.channels(), 3);
        for y in 0..100 {
            for x in 0..100 {
                let v = g.data()[(y, x, 0)];
                for c in 0..3 {
                    assert_eq!(t.data()[(y, x, c)], v);
                }
            }
        }
    }

    #[test]
    fn three_channel_input_passes_through() {
        let img = buf(16, 16, 3);
        assert_eq!(to_three_channels(&img).unwrap(), img);
    }

    #[test]
    fn four_channels_rejected_at_construction() {
        // ImageBuffer itself refuses channel counts outside {1, 3}, so the
        // pipeline can never see a 4-channel raster.
        let err =
            ImageBuffer::from_array(Array3::zeros((16, 16, 4)), ChannelOrder::Rgb).unwrap_err();
        assert!(matches!(
            err,
            crate::imagebuf::ImageBufError::UnsupportedChannelCount(4)
        ));
    }

    #[test]
    fn reverse_channels_swaps_rgb_pixel() {
        let mut data = Array3::zeros((8, 8, 3));
        data[(0, 0, 0)] = 10.0;
        data[(0, 0, 1)] = 20.0;
        data[(0, 0, 2)] = 30.0;
        let img = ImageBuffer::from_array(data, ChannelOrder::Rgb).unwrap();
        let rev = reverse_channels(&img).unwrap();
        assert_eq!(rev.data()[(0, 0, 0)], 30.0);
        assert_eq!(rev.data()[(0, 0, 1)], 20.0);
        assert_eq!(rev.data()[(0, 0, 2)], 10.0);
        assert_eq!(rev.channel_order(), ChannelOrder::Bgr);
    }

    #[test]
    fn reverse_channels_rejects_grayscale() {
        let err = reverse_channels(&buf(8, 8, 1)).unwrap_err();
        assert!(matches!(err, PreprocessError::UnsupportedChannelCount(1, _)));
    }

    #[test]
    fn equal_channels_unchanged_by_reversal() {
        let img = to_three_channels(&buf(8, 8, 1)).unwrap();
        let rev = reverse_channels(&img).unwrap();
        assert_eq!(rev.data(), img.data());
    }

    #[test]
    fn crop_512_by_factor_1_3() {
        let img = buf(512, 512, 3);
        let out = zoom_center_crop(&img, 1.3).unwrap();
        assert_eq!((out.height(), out.width()), (393, 393));
        // top-left of the crop must be input pixel (59, 59)
        assert_eq!(out.data()[(0, 0, 0)], img.data()[(59, 59, 0)]);
        assert_eq!(out.data()[(392, 392, 2)], img.data()[(59 + 392, 59 + 392, 2)]);
    }

    #[test]
    fn crop_factor_one_is_identity() {
        let img = buf(64, 48, 3);
        assert_eq!(zoom_center_crop(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn crop_below_minimum_is_degenerate() {
        let err = zoom_center_crop(&buf(8, 8, 3), 2.0).unwrap_err();
        assert!(matches!(err, PreprocessError::DegenerateCrop { .. }));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img =
            ImageBuffer::from_array(Array3::from_elem((448, 448, 3), 37.5), ChannelOrder::Rgb)
                .unwrap();
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!(out.height(), 224);
        for v in out.data().iter() {
            assert!((v - 37.5).abs() < 1e-9);
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = buf(224, 224, 3);
        let out = resize_bilinear(&img, 224, 224).unwrap();
        for (a, b) in out.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_uniform_resize_hits_target_shape() {
        let out = resize_bilinear(&buf(100, 200, 3), 224, 224).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (224, 224, 3));
    }

    #[test]
    fn vertical_flip_reverses_rows() {
        let mut data = Array3::zeros((2, 1, 1));
        data[(0, 0, 0)] = 1.0;
        data[(1, 0, 0)] = 2.0;
        let img = ImageBuffer::from_array(data, ChannelOrder::Rgb).unwrap();
        let out = vertical_flip(&img);
        assert_eq!(out.data()[(0, 0, 0)], 2.0);
        assert_eq!(out.data()[(1, 0, 0)], 1.0);
    }

    #[test]
    fn row_constant_image_unchanged_by_flip() {
        let data = Array3::from_shape_fn((8, 8, 3), |(_, x, c)| (x * 3 + c) as f64);
        let img = ImageBuffer::from_array(data, ChannelOrder::Rgb).unwrap();
        assert_eq!(vertical_flip(&img).data(), img.data());
    }

    #[test]
    fn standardize_zeroes_the_means() {
        let means = [10.0, 20.0, 30.0];
        let data = Array3::from_shape_fn((8, 8, 3), |(_, _, c)| means[c]);
        let mut img = ImageBuffer::from_array(data, ChannelOrder::Rgb).unwrap();
        img.set_channel_order(ChannelOrder::Bgr);
        let out = standardize(&img, means).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_zero_means_is_identity() {
        let img = reverse_channels(&buf(8, 8, 3)).unwrap();
        let out = standardize(&img, [0.0; 3]).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn standardize_then_add_back_restores() {
        let means = [103.939, 116.779, 123.68];
        let img = reverse_channels(&buf(16, 16, 3)).unwrap();
        let out = standardize(&img, means).unwrap();
        for (idx, v) in out.data().indexed_iter() {
            assert!((v + means[idx.2] - img.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn standardize_requires_bgr() {
        let err = standardize(&buf(8, 8, 3), [0.0; 3]).unwrap_err();
        assert!(matches!(err, PreprocessError::WrongChannelOrder));
    }

    #[test]
    fn degenerate_train_config_matches_eval_chain() {
        let cfg = AugmentConfig {
            zoom_max: 1.0,
            flip_probability: 0.0,
            ..AugmentConfig::default()
        };
        for seed in [0u64, 1, 42, 9999] {
            let img = buf(300, 260, 1);
            let train = augment_train(&img, seed, &cfg).unwrap();
            let eval = preprocess_eval(&img, &cfg).unwrap();
            assert_eq!(train, eval);
        }
    }

    #[test]
    fn augment_is_deterministic_in_seed() {
        let cfg = AugmentConfig::default();
        let img = buf(256, 256, 3);
        let a = augment_train(&img, 7, &cfg).unwrap();
        let b = augment_train(&img, 7, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_output_shape_contract() {
        let cfg = AugmentConfig::default();
        for (h, w, c) in [(64, 64, 1), (224, 224, 3), (500, 300, 3), (33, 57, 1)] {
            let out = augment_train(&buf(h, w, c), 3, &cfg).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (224, 224, 3));
            assert_eq!(out.channel_order(), ChannelOrder::Bgr);
        }
    }

    #[test]
    fn eval_chain_accepts_grayscale_and_is_repeatable() {
        let cfg = AugmentConfig::default();
        let img = buf(120, 90, 1);
        let a = preprocess_eval(&img, &cfg).unwrap();
        let b = preprocess_eval(&img, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.channels()), (224, 224, 3));
    }

    proptest! {
        #[test]
        fn pipeline_output_always_224_bgr(h in 8usize..80, w in 8usize..80, gray in proptest::bool::ANY, seed in 0u64..1000) {
            let c = if gray { 1 } else { 3 };
            let img = buf(h.max(MIN_DIMENSION * 2), w.max(MIN_DIMENSION * 2), c);
            let out = augment_train(&img, seed, &AugmentConfig::default()).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.channels()), (224, 224, 3));
            prop_assert_eq!(out.channel_order(), ChannelOrder::Bgr);
        }

        #[test]
        fn reversal_and_flip_are_involutions(h in 8usize..40, w in 8usize..40) {
            let img = buf(h, w, 3);
            let rr = reverse_channels(&reverse_channels(&img).unwrap()).unwrap();
            prop_assert_eq!(rr.data(), img.data());
            let ff = vertical_flip(&vertical_flip(&img));
            prop_assert_eq!(ff.data(), img.data());
        }
    }

    #[test]
    fn crop_matches_index_arithmetic_oracle_on_random_images() {
        // 100 random small images against the definition of the sub-rectangle
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let h = 16 + (rng.next_u32() % 48) as usize;
            let w = 16 + (rng.next_u32() % 48) as usize;
            let factor = 1.0 + (rng.next_u32() % 1000) as f64 / 1999.0; // [1.0, ~1.5]
            let img = buf(h, w, 3);
            let out = match zoom_center_crop(&img, factor) {
                Ok(o) => o,
                Err(PreprocessError::DegenerateCrop { .. }) => continue,
                Err(e) => panic!("unexpected error: {e}"),
            };
            let out_h = (h as f64 / factor).floor() as usize;
            let out_w = (w as f64 / factor).floor() as usize;
            assert_eq!((out.height(), out.width()), (out_h, out_w));
            let off_y = (h - out_h) / 2;
            let off_x = (w - out_w) / 2;
            for y in 0..out_h {
                for x in 0..out_w {
                    for c in 0..3 {
                        assert_eq!(out.data()[(y, x, c)], img.data()[(y + off_y, x + off_x, c)]);
                    }
                }
            }
        }
    }
}
