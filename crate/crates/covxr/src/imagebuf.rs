//! In-memory raster type shared by the preprocessing chain and the model.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use thiserror::Error;

/// Channel ordering of a 3-channel raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

#[derive(Debug, Error)]
pub enum ImageBufError {
    #[error("image file not found: {0}")]
    MissingFile(PathBuf),
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannelCount(usize),
    #[error("unsupported pixel format {format} in {path} (expected 8-bit grayscale or RGB)")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("empty image dimensions {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// An H×W×C raster with explicit channel order.
///
/// Values are reals; decoded files land in [0, 255] and stay there until
/// `standardize` subtracts the per-channel means. Grayscale images carry a
/// single channel until `to_three_channels` replicates it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Array3<f64>,
    channel_order: ChannelOrder,
}

impl ImageBuffer {
    /// Wrap an (H, W, C) array. C must be 1 or 3 and the raster non-empty.
    pub fn from_array(data: Array3<f64>, channel_order: ChannelOrder) -> Result<Self, ImageBufError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(ImageBufError::EmptyImage {
                height: h,
                width: w,
            });
        }
        if c != 1 && c != 3 {
            return Err(ImageBufError::UnsupportedChannelCount(c));
        }
        Ok(Self {
            data,
            channel_order,
        })
    }

    /// Decode an 8-bit PNG or JPEG file with 1 or 3 channels.
    pub fn from_file(path: &Path) -> Result<Self, ImageBufError> {
        if !path.exists() {
            return Err(ImageBufError::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|source| ImageBufError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        let (data, channels) = match img {
            image::DynamicImage::ImageLuma8(gray) => {
                let (w, h) = gray.dimensions();
                let mut data = Array3::zeros((h as usize, w as usize, 1));
                for (x, y, p) in gray.enumerate_pixels() {
                    data[(y as usize, x as usize, 0)] = f64::from(p.0[0]);
                }
                (data, 1)
            }
            image::DynamicImage::ImageRgb8(rgb) => {
                let (w, h) = rgb.dimensions();
                let mut data = Array3::zeros((h as usize, w as usize, 3));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[(y as usize, x as usize, c)] = f64::from(p.0[c]);
                    }
                }
                (data, 3)
            }
            other => {
                return Err(ImageBufError::UnsupportedFormat {
                    path: path.to_path_buf(),
                    format: format!("{:?}", other.color()),
                })
            }
        };
        let _ = channels;
        Self::from_array(data, ChannelOrder::Rgb)
    }

    /// Write as an 8-bit PNG, rounding and clamping values to [0, 255].
    /// 3-channel buffers are written in RGB order regardless of the
    /// current `channel_order` flag (BGR buffers are reversed on the way out).
    pub fn save_png(&self, path: &Path) -> Result<(), ImageBufError> {
        let (h, w, c) = self.data.dim();
        let quant = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        let result = if c == 1 {
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                p.0[0] = quant(self.data[(y as usize, x as usize, 0)]);
            }
            img.save(path)
        } else {
            let swap = self.channel_order == ChannelOrder::Bgr;
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    let src = if swap { 2 - ch } else { ch };
                    p.0[ch] = quant(self.data[(y as usize, x as usize, src)]);
                }
            }
            img.save(path)
        };
        result.map_err(|source| ImageBufError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn channel_order(&self) -> ChannelOrder {
        self.channel_order
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    #[cfg(test)]
    pub(crate) fn set_channel_order(&mut self, order: ChannelOrder) {
        self.channel_order = order;
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    /// Reorder to (C, H, W) for the model input layout.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w, c) = self.data.dim();
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ci, y, x)] = self.data[(y, x, ci)];
                }
            }
        }
        out
    }
}

/// Stack preprocessed images into an (N, C, H, W) batch tensor.
///
/// All images must share the same shape; the preprocessing pipelines
/// guarantee that for their outputs.
pub fn stack_batch(images: &[ImageBuffer]) -> Array4<f64> {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let chw: Vec<Array3<f64>> = images.iter().map(ImageBuffer::to_chw).collect();
    let views: Vec<_> = chw.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform image shapes in batch")
}
