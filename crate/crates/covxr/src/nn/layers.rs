//! Individual differentiable layers.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

/// A mutable view of one parameter tensor paired with its gradient,
/// flattened for the optimizer.
pub struct ParamRef<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Fully connected layer computing `x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Dense {
    /// He-normal initialization (for relu-activated layers).
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::with_weights(
            Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
            Array1::zeros(fan_out),
        )
    }

    /// Glorot-uniform initialization (for linear/sigmoid outputs).
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        Self::with_weights(
            Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
            Array1::zeros(fan_out),
        )
    }

    pub fn with_weights(w: Array2<f64>, b: Array1<f64>) -> Self {
        let gw = Array2::zeros(w.raw_dim());
        let gb = Array1::zeros(b.raw_dim());
        Self { w, b, gw, gb }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, gout: &Array2<f64>) -> Array2<f64> {
        self.gw += &x.t().dot(gout);
        self.gb += &gout.sum_axis(Axis(0));
        gout.dot(&self.w.t())
    }

    /// Input gradient without touching parameter gradients.
    pub fn backward_input_only(&self, gout: &Array2<f64>) -> Array2<f64> {
        gout.dot(&self.w.t())
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let Self { w, b, gw, gb } = self;
        vec![
            ParamRef {
                value: w.as_slice_mut().expect("contiguous"),
                grad: gw.as_slice_mut().expect("contiguous"),
            },
            ParamRef {
                value: b.as_slice_mut().expect("contiguous"),
                grad: gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Cache produced by the training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Batch normalization over feature columns of an (N, F) activation.
///
/// Training mode normalizes by biased batch statistics and folds them into
/// the running estimates; evaluation mode normalizes by the running
/// estimates alone.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.9,
            eps: 1e-5,
            ggamma: Array1::zeros(features),
            gbeta: Array1::zeros(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;

        self.running_mean = &self.running_mean * self.momentum + &(&mean * (1.0 - self.momentum));
        self.running_var = &self.running_var * self.momentum + &(&var * (1.0 - self.momentum));
        let _ = n;
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    pub fn backward_train(&mut self, cache: &BnCache, gout: &Array2<f64>) -> Array2<f64> {
        let n = gout.nrows() as f64;
        self.ggamma += &(gout * &cache.xhat).sum_axis(Axis(0));
        self.gbeta += &gout.sum_axis(Axis(0));

        let gxhat = gout * &self.gamma;
        let sum_gxhat = gxhat.sum_axis(Axis(0));
        let sum_gxhat_xhat = (&gxhat * &cache.xhat).sum_axis(Axis(0));
        let mut gin = gxhat * n;
        gin -= &sum_gxhat;
        gin -= &(&cache.xhat * &sum_gxhat_xhat);
        gin * &cache.inv_std / n
    }

    /// Input gradient in evaluation mode (running statistics are constants).
    pub fn backward_eval_input(&self, gout: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        gout * &self.gamma * &inv_std
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let Self {
            gamma,
            beta,
            ggamma,
            gbeta,
            ..
        } = self;
        vec![
            ParamRef {
                value: gamma.as_slice_mut().expect("contiguous"),
                grad: ggamma.as_slice_mut().expect("contiguous"),
            },
            ParamRef {
                value: beta.as_slice_mut().expect("contiguous"),
                grad: gbeta.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    /// Trainable scale/shift plus the running statistics.
    pub fn parameter_count(&self) -> usize {
        4 * self.gamma.len()
    }
}

/// Inverted dropout; evaluation mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate }
    }

    pub fn forward_train(&self, x: &Array2<f64>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        (x * &mask, mask)
    }

    pub fn backward(mask: &Array2<f64>, gout: &Array2<f64>) -> Array2<f64> {
        gout * mask
    }
}

/// 2-D convolution over (N, C, H, W) tensors with square stride, optional
/// zero padding, and no dilation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>, // (c_out, c_in, kh, kw)
    pub b: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
}

impl Conv2d {
    pub fn he(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::with_weights(
            Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| dist.sample(rng)),
            Array1::zeros(c_out),
            stride,
            padding,
        )
    }

    pub fn with_weights(w: Array4<f64>, b: Array1<f64>, stride: usize, padding: usize) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        let gw = Array4::zeros(w.raw_dim());
        let gb = Array1::zeros(b.raw_dim());
        Self {
            w,
            b,
            stride,
            padding,
            gw,
            gb,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    /// Output spatial size for an input of the given size, if valid.
    pub fn out_spatial(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let full_h = h + 2 * self.padding;
        let full_w = w + 2 * self.padding;
        if full_h < k || full_w < k {
            return None;
        }
        Some(((full_h - k) / self.stride + 1, (full_w - k) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels(), "channel mismatch");
        let (oh, ow) = self
            .out_spatial(h, w)
            .expect("input too small for kernel");
        let k = self.kernel();
        let c_out = self.out_channels();
        let s = self.stride;
        let p = self.padding as isize;

        let per_image: Vec<Array3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.index_axis(Axis(0), i);
                let mut out = Array3::zeros((c_out, oh, ow));
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = self.b[co];
                            for ci in 0..c_in {
                                for ky in 0..k {
                                    let sy = (oy * s + ky) as isize - p;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx = (ox * s + kx) as isize - p;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        acc += self.w[(co, ci, ky, kx)]
                                            * xi[(ci, sy as usize, sx as usize)];
                                    }
                                }
                            }
                            out[(co, oy, ox)] = acc;
                        }
                    }
                }
                out
            })
            .collect();

        let views: Vec<_> = per_image.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &views).expect("uniform shapes")
    }

    /// Input gradient; optionally accumulates parameter gradients.
    pub fn backward(
        &mut self,
        x: &Array4<f64>,
        gout: &Array4<f64>,
        accumulate_params: bool,
    ) -> Array4<f64> {
        let gin = self.input_gradient(x.dim(), gout);
        if accumulate_params {
            self.accumulate_param_grads(x, gout);
        }
        gin
    }

    pub fn backward_input_only(&self, input_dim: (usize, usize, usize, usize), gout: &Array4<f64>) -> Array4<f64> {
        self.input_gradient(input_dim, gout)
    }

    fn input_gradient(
        &self,
        input_dim: (usize, usize, usize, usize),
        gout: &Array4<f64>,
    ) -> Array4<f64> {
        let (n, c_in, h, w) = input_dim;
        let (_, c_out, oh, ow) = gout.dim();
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding as isize;

        let per_image: Vec<Array3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gi = gout.index_axis(Axis(0), i);
                let mut gin = Array3::zeros((c_in, h, w));
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gi[(co, oy, ox)];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                for ky in 0..k {
                                    let sy = (oy * s + ky) as isize - p;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx = (ox * s + kx) as isize - p;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        gin[(ci, sy as usize, sx as usize)] +=
                                            self.w[(co, ci, ky, kx)] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                gin
            })
            .collect();

        let views: Vec<_> = per_image.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &views).expect("uniform shapes")
    }

    fn accumulate_param_grads(&mut self, x: &Array4<f64>, gout: &Array4<f64>) {
        let (n, c_in, h, w) = x.dim();
        let (_, c_out, oh, ow) = gout.dim();
        let k = self.kernel();
        let s = self.stride;
        let p = self.padding as isize;
        // sequential over images so accumulation order is fixed
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let gi = gout.index_axis(Axis(0), i);
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gi[(co, oy, ox)];
                        if g == 0.0 {
                            continue;
                        }
                        self.gb[co] += g;
                        for ci in 0..c_in {
                            for ky in 0..k {
                                let sy = (oy * s + ky) as isize - p;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let sx = (ox * s + kx) as isize - p;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    self.gw[(co, ci, ky, kx)] +=
                                        g * xi[(ci, sy as usize, sx as usize)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let _ = (c_in, h, w);
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let Self { w, b, gw, gb, .. } = self;
        vec![
            ParamRef {
                value: w.as_slice_mut().expect("contiguous"),
                grad: gw.as_slice_mut().expect("contiguous"),
            },
            ParamRef {
                value: b.as_slice_mut().expect("contiguous"),
                grad: gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn dense_forward_matches_manual() {
        let d = Dense::with_weights(array![[1.0, 2.0], [3.0, 4.0]], array![0.5, -0.5]);
        let y = d.forward(&array![[1.0, 1.0]]);
        assert_eq!(y, array![[4.5, 5.5]]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = rng();
        let mut d = Dense::he(3, 2, &mut rng);
        let x = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        // scalar objective: sum of outputs squared / 2
        let y = d.forward(&x);
        let gout = y.clone();
        let gin = d.backward(&x, &gout);

        let objective = |d: &Dense, x: &Array2<f64>| -> f64 {
            d.forward(x).mapv(|v| 0.5 * v * v).sum()
        };
        let eps = 1e-6;
        // check a weight gradient
        for (idx, &g) in d.gw.clone().indexed_iter() {
            let mut dp = d.clone();
            dp.w[idx] += eps;
            let mut dm = d.clone();
            dm.w[idx] -= eps;
            let fd = (objective(&dp, &x) - objective(&dm, &x)) / (2.0 * eps);
            assert!((fd - g).abs() < 1e-6, "weight grad mismatch at {idx:?}");
        }
        // check an input gradient
        for (idx, &g) in gin.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&d, &xp) - objective(&d, &xm)) / (2.0 * eps);
            assert!((fd - g).abs() < 1e-6, "input grad mismatch at {idx:?}");
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut bn = BatchNorm1d::new(2);
        let x = array![[1.0, 10.0], [3.0, 30.0], [5.0, 50.0], [7.0, 70.0]];
        let (y, _) = bn.forward_train(&x);
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-12);
            assert!((var[c] - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm1d::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        let y = bn.forward_eval(&array![[4.0]]);
        assert!((y[(0, 0)] - 2.0 / (4.0 + bn.eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut bn = BatchNorm1d::new(3);
        let mut rng = rng();
        bn.gamma = Array1::from_shape_fn(3, |_| 0.5 + rng.random::<f64>());
        bn.beta = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() * 4.0 - 2.0);

        // objective: sum(y^2)/2 through training-mode batch norm
        let objective = |bn: &mut BatchNorm1d, x: &Array2<f64>| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.mapv(|v| 0.5 * v * v).sum()
        };

        let (y, cache) = bn.clone().forward_train(&x);
        let mut bn_work = bn.clone();
        let gin = bn_work.backward_train(&cache, &y);

        let eps = 1e-6;
        for (idx, &g) in gin.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&mut bn.clone(), &xp) - objective(&mut bn.clone(), &xm)) / (2.0 * eps);
            assert!(
                (fd - g).abs() < 1e-5 * (1.0 + fd.abs()),
                "bn input grad mismatch at {idx:?}: fd={fd} g={g}"
            );
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let d = Dropout::new(0.0);
        let mut rng = rng();
        let x = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let (y, mask) = d.forward_train(&x, &mut rng);
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_scales_survivors() {
        let d = Dropout::new(0.5);
        let mut rng = rng();
        let x = Array2::ones((64, 64));
        let (y, _) = d.forward_train(&x, &mut rng);
        for &v in y.iter() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / y.len() as f64;
        assert!((kept - 0.5).abs() < 0.1);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 reproduces the input
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let conv = Conv2d::with_weights(w, Array1::zeros(1), 1, 0);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f64);
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn conv_known_sum_kernel() {
        // 2x2 all-ones kernel, stride 2: output sums disjoint 2x2 blocks
        let w = Array4::from_elem((1, 1, 2, 2), 1.0);
        let conv = Conv2d::with_weights(w, Array1::zeros(1), 2, 0);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, xx)| (y * 4 + xx) as f64);
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[(0, 0, 0, 0)], 0.0 + 1.0 + 4.0 + 5.0);
        assert_eq!(y[(0, 0, 1, 1)], 10.0 + 11.0 + 14.0 + 15.0);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng();
        let mut conv = Conv2d::he(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.random::<f64>() - 0.5);

        let objective = |c: &Conv2d, x: &Array4<f64>| c.forward(x).mapv(|v| 0.5 * v * v).sum();

        let y = conv.forward(&x);
        let gin = conv.backward(&x, &y, true);

        let eps = 1e-6;
        let gw = conv.gw.clone();
        for (idx, &g) in gw.indexed_iter() {
            let mut cp = conv.clone();
            cp.w[idx] += eps;
            let mut cm = conv.clone();
            cm.w[idx] -= eps;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
            assert!(
                (fd - g).abs() < 1e-5 * (1.0 + fd.abs()),
                "conv weight grad mismatch at {idx:?}: fd={fd} g={g}"
            );
        }
        for (idx, &g) in gin.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
            assert!(
                (fd - g).abs() < 1e-5 * (1.0 + fd.abs()),
                "conv input grad mismatch at {idx:?}: fd={fd} g={g}"
            );
        }
    }

    #[test]
    fn conv_out_spatial_arithmetic() {
        let mut rng = rng();
        let conv = Conv2d::he(3, 8, 4, 4, 0, &mut rng);
        assert_eq!(conv.out_spatial(224, 224), Some((56, 56)));
        assert_eq!(conv.out_spatial(16, 16), Some((4, 4)));
        assert_eq!(conv.out_spatial(3, 3), None);
    }
}
