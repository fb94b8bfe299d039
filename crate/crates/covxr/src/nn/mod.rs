//! Minimal dense/convolutional layer stack with hand-derived backward
//! passes, in double precision.
//!
//! Layers return their forward caches by value instead of hiding them in
//! internal state, so inference stays `&self` and gradient paths are
//! explicit. Parameter gradients accumulate inside each layer and are
//! consumed (and cleared) by [`adam::Adam::step`].

pub mod adam;
pub mod backbone;
pub mod layers;

pub use adam::Adam;
pub use backbone::ConvStack;
pub use layers::{BatchNorm1d, Conv2d, Dense, Dropout, ParamRef};

use ndarray::{Array1, Array2, Array4, Axis};

/// Numerically stable logistic function, applied elementwise.
pub fn sigmoid(z: &Array1<f64>) -> Array1<f64> {
    z.mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Elementwise max(0, x).
pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of relu given the post-activation values.
pub fn relu2_backward(y: &Array2<f64>, gout: &Array2<f64>) -> Array2<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu4_backward(y: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gv, &yv| {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Spatial mean over (H, W): (N, C, H, W) → (N, C).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) * scale
}

/// Backward of [`global_avg_pool`]: spread each feature gradient evenly.
pub fn global_avg_pool_backward(spatial: (usize, usize), gout: &Array2<f64>) -> Array4<f64> {
    let (n, c) = gout.dim();
    let (h, w) = spatial;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| gout[(i, j)] * scale)
}
