//! 3D convolution, batch normalization, and squeeze-and-excitation layers
//! with analytic forward/backward passes.
//!
//! Backward methods accumulate parameter gradients into each layer's
//! [`PTensor::grad`] buffers and return the gradient with respect to the
//! layer input, so a network backward pass is a straight reverse walk.

use super::tensor::{sigmoid, PTensor, Tensor};

/// 3D convolution with cubic kernel (1 or 3), zero padding `kernel/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    /// `[out_channels, in_channels, k, k, k]`
    pub w: PTensor,
    /// `[out_channels]`
    pub b: PTensor,
    pub stride: (usize, usize, usize),
    pub kernel: usize,
}

impl Conv3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: (usize, usize, usize),
        init: impl FnMut() -> f64,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "cubic kernels of 1 or 3 only");
        Conv3d {
            w: PTensor::new(
                vec![out_channels, in_channels, kernel, kernel, kernel],
                init,
            ),
            b: PTensor::zeros(vec![out_channels]),
            stride,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[0]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output spatial extent for one axis.
    fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (extent + 2 * pad - kernel) / stride + 1
    }

    pub fn output_shape(&self, x_shape: [usize; 5]) -> [usize; 5] {
        let [n, _, t, h, w] = x_shape;
        let (st, sh, sw) = self.stride;
        let (k, p) = (self.kernel, self.pad());
        [
            n,
            self.out_channels(),
            Self::out_extent(t, k, st, p),
            Self::out_extent(h, k, sh, p),
            Self::out_extent(w, k, sw, p),
        ]
    }

    /// Range of output indices whose strided+offset input index stays in
    /// bounds: `0 ≤ o·stride + k − pad < extent`.
    #[inline]
    fn valid_out_range(out_extent: usize, in_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let shift = k as isize - pad as isize;
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(stride)
        };
        let hi_in = in_extent as isize - 1 - shift;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = ((hi_in as usize) / stride + 1).min(out_extent);
        (lo.min(hi), hi)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n_b, c_in, t_in, h_in, w_in] = x.shape;
        debug_assert_eq!(c_in, self.w.shape[1]);
        let out_shape = self.output_shape(x.shape);
        let [_, c_out, t_out, h_out, w_out] = out_shape;
        let mut out = Tensor::zeros(out_shape);
        let (st, sh, sw) = self.stride;
        let (k, p) = (self.kernel, self.pad());

        for n in 0..n_b {
            for oc in 0..c_out {
                let bias = self.b.val[oc];
                let base = out.offset(n, oc, 0, 0);
                out.data[base..base + t_out * h_out * w_out].fill(bias);
                for ic in 0..c_in {
                    for kt in 0..k {
                        let (t_lo, t_hi) = Self::valid_out_range(t_out, t_in, kt, st, p);
                        for kh in 0..k {
                            let (h_lo, h_hi) = Self::valid_out_range(h_out, h_in, kh, sh, p);
                            for kw in 0..k {
                                let (w_lo, w_hi) = Self::valid_out_range(w_out, w_in, kw, sw, p);
                                if w_lo >= w_hi {
                                    continue;
                                }
                                let wgt = self.w.val
                                    [(((oc * c_in + ic) * k + kt) * k + kh) * k + kw];
                                let w_shift = kw as isize - p as isize;
                                for to in t_lo..t_hi {
                                    let ti = (to * st) as isize + kt as isize - p as isize;
                                    for ho in h_lo..h_hi {
                                        let hi = (ho * sh) as isize + kh as isize - p as isize;
                                        let in_base =
                                            x.offset(n, ic, ti as usize, hi as usize);
                                        let out_base = out.offset(n, oc, to, ho);
                                        odot_row(
                                            &mut out.data[out_base + w_lo..out_base + w_hi],
                                            &x.data,
                                            in_base,
                                            w_lo,
                                            sw,
                                            w_shift,
                                            wgt,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward pass: accumulates weight/bias gradients and returns the
    /// input gradient.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let [n_b, c_in, t_in, h_in, w_in] = x.shape;
        let [_, c_out, t_out, h_out, w_out] = gy.shape;
        let mut gx = Tensor::zeros(x.shape);
        let (st, sh, sw) = self.stride;
        let (k, p) = (self.kernel, self.pad());

        for n in 0..n_b {
            for oc in 0..c_out {
                // Bias gradient: plain sum over the output map.
                let base = gy.offset(n, oc, 0, 0);
                let mut gb = 0.0;
                for &g in &gy.data[base..base + t_out * h_out * w_out] {
                    gb += g;
                }
                self.b.grad[oc] += gb;

                for ic in 0..c_in {
                    for kt in 0..k {
                        let (t_lo, t_hi) = Self::valid_out_range(t_out, t_in, kt, st, p);
                        for kh in 0..k {
                            let (h_lo, h_hi) = Self::valid_out_range(h_out, h_in, kh, sh, p);
                            for kw in 0..k {
                                let (w_lo, w_hi) = Self::valid_out_range(w_out, w_in, kw, sw, p);
                                if w_lo >= w_hi {
                                    continue;
                                }
                                let widx = (((oc * c_in + ic) * k + kt) * k + kh) * k + kw;
                                let wgt = self.w.val[widx];
                                let w_shift = kw as isize - p as isize;
                                let mut gw = 0.0;
                                for to in t_lo..t_hi {
                                    let ti = (to * st) as isize + kt as isize - p as isize;
                                    for ho in h_lo..h_hi {
                                        let hi = (ho * sh) as isize + kh as isize - p as isize;
                                        let in_base =
                                            x.offset(n, ic, ti as usize, hi as usize);
                                        let out_base = gy.offset(n, oc, to, ho);
                                        for wo in w_lo..w_hi {
                                            let wi = ((wo * sw) as isize + w_shift) as usize;
                                            let g = gy.data[out_base + wo];
                                            gw += g * x.data[in_base + wi];
                                            gx.data[in_base + wi] += wgt * g;
                                        }
                                    }
                                }
                                self.w.grad[widx] += gw;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

/// `out[wo] += wgt · x[in_base + wo·stride + shift]` over one W row.
#[inline]
fn odot_row(
    out: &mut [f64],
    x: &[f64],
    in_base: usize,
    w_lo: usize,
    stride: usize,
    shift: isize,
    wgt: f64,
) {
    if stride == 1 {
        let start = (in_base as isize + w_lo as isize + shift) as usize;
        let row = &x[start..start + out.len()];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += wgt * v;
        }
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            let wi = (((w_lo + i) * stride) as isize + shift) as usize;
            *o += wgt * x[in_base + wi];
        }
    }
}

/// Per-channel batch normalization over `(N, T, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d {
    pub gamma: PTensor,
    pub beta: PTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a BN forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized activations x̂ (before scale/shift).
    pub xhat: Vec<f64>,
    /// Per-channel 1/√(var + eps) actually used in the forward.
    pub inv_std: Vec<f64>,
    /// Whether batch statistics (true) or running statistics (false) were used.
    pub batch_stats: bool,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: PTensor::new(vec![channels], || 1.0),
            beta: PTensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward: normalize by batch statistics and (optionally)
    /// update the running statistics. `update_running=false` keeps the layer
    /// a pure function of its input for finite-difference checks.
    pub fn forward_train(&mut self, x: &Tensor, update_running: bool) -> (Tensor, BnCache) {
        let c_n = self.channels();
        debug_assert_eq!(x.shape[1], c_n);
        let per_c = x.spatial();
        let n_b = x.shape[0];
        let m = (n_b * per_c) as f64;

        let mut out = Tensor::zeros(x.shape);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; c_n];
        for c in 0..c_n {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for n in 0..n_b {
                let base = x.offset(n, c, 0, 0);
                for &v in &x.data[base..base + per_c] {
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sum_sq / m - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = istd;
            if update_running {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean;
                self.running_var[c] =
                    (1.0 - self.momentum) * self.running_var[c] + self.momentum * var;
            }
            let (g, b) = (self.gamma.val[c], self.beta.val[c]);
            for n in 0..n_b {
                let base = x.offset(n, c, 0, 0);
                for i in base..base + per_c {
                    let h = (x.data[i] - mean) * istd;
                    xhat[i] = h;
                    out.data[i] = g * h + b;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_stats: true,
            },
        )
    }

    /// Evaluation-mode forward: normalize by the frozen running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> (Tensor, BnCache) {
        let c_n = self.channels();
        let per_c = x.spatial();
        let n_b = x.shape[0];
        let mut out = Tensor::zeros(x.shape);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; c_n];
        for c in 0..c_n {
            let istd = 1.0 / (self.running_var[c] + self.eps).sqrt();
            inv_std[c] = istd;
            let mean = self.running_mean[c];
            let (g, b) = (self.gamma.val[c], self.beta.val[c]);
            for n in 0..n_b {
                let base = x.offset(n, c, 0, 0);
                for i in base..base + per_c {
                    let h = (x.data[i] - mean) * istd;
                    xhat[i] = h;
                    out.data[i] = g * h + b;
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Tensor) -> Tensor {
        let c_n = self.channels();
        let per_c = gy.spatial();
        let n_b = gy.shape[0];
        let m = (n_b * per_c) as f64;
        let mut gx = Tensor::zeros(gy.shape);

        for c in 0..c_n {
            let istd = cache.inv_std[c];
            let g = self.gamma.val[c];
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for n in 0..n_b {
                let base = gy.offset(n, c, 0, 0);
                for i in base..base + per_c {
                    sum_gy += gy.data[i];
                    sum_gy_xhat += gy.data[i] * cache.xhat[i];
                }
            }
            self.beta.grad[c] += sum_gy;
            self.gamma.grad[c] += sum_gy_xhat;

            if cache.batch_stats {
                // Batch statistics participated in the forward, so their
                // dependence on x flows back through the mean/variance terms.
                let k1 = sum_gy / m;
                let k2 = sum_gy_xhat / m;
                for n in 0..n_b {
                    let base = gy.offset(n, c, 0, 0);
                    for i in base..base + per_c {
                        gx.data[i] = g * istd * (gy.data[i] - k1 - cache.xhat[i] * k2);
                    }
                }
            } else {
                for n in 0..n_b {
                    let base = gy.offset(n, c, 0, 0);
                    for i in base..base + per_c {
                        gx.data[i] = g * istd * gy.data[i];
                    }
                }
            }
        }
        gx
    }
}

/// Squeeze-and-excitation channel gate: global average pool → bottleneck
/// (ratio 1/r) with ReLU → full width with sigmoid → channel-wise rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    /// `[c/r, c]`
    pub w1: PTensor,
    pub b1: PTensor,
    /// `[c, c/r]`
    pub w2: PTensor,
    pub b2: PTensor,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    /// Pooled descriptor per (n, c).
    pub s: Vec<f64>,
    /// Bottleneck activations (post-ReLU) per (n, c/r).
    pub u: Vec<f64>,
    /// Gate values per (n, c).
    pub g: Vec<f64>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, reduction: usize, init: impl FnMut() -> f64) -> Self {
        assert!(
            reduction >= 1 && channels % reduction == 0,
            "reduction must divide the channel count"
        );
        let mut init = init;
        let hidden = channels / reduction;
        SqueezeExcite {
            w1: PTensor::new(vec![hidden, channels], &mut init),
            b1: PTensor::zeros(vec![hidden]),
            w2: PTensor::new(vec![channels, hidden], &mut init),
            b2: PTensor::zeros(vec![channels]),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.w1.shape[1], self.w1.shape[0]) // (channels, hidden)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, SeCache) {
        let (c_n, hid) = self.dims();
        debug_assert_eq!(x.shape[1], c_n);
        let n_b = x.shape[0];
        let per_c = x.spatial();

        let mut s = vec![0.0; n_b * c_n];
        for n in 0..n_b {
            for c in 0..c_n {
                let base = x.offset(n, c, 0, 0);
                let mut sum = 0.0;
                for &v in &x.data[base..base + per_c] {
                    sum += v;
                }
                s[n * c_n + c] = sum / per_c as f64;
            }
        }

        let mut u = vec![0.0; n_b * hid];
        for n in 0..n_b {
            for j in 0..hid {
                let mut acc = self.b1.val[j];
                for c in 0..c_n {
                    acc += self.w1.val[j * c_n + c] * s[n * c_n + c];
                }
                u[n * hid + j] = acc.max(0.0);
            }
        }

        let mut g = vec![0.0; n_b * c_n];
        for n in 0..n_b {
            for c in 0..c_n {
                let mut acc = self.b2.val[c];
                for j in 0..hid {
                    acc += self.w2.val[c * hid + j] * u[n * hid + j];
                }
                g[n * c_n + c] = sigmoid(acc);
            }
        }

        let mut out = Tensor::zeros(x.shape);
        for n in 0..n_b {
            for c in 0..c_n {
                let gate = g[n * c_n + c];
                let base = x.offset(n, c, 0, 0);
                for i in base..base + per_c {
                    out.data[i] = x.data[i] * gate;
                }
            }
        }
        (out, SeCache { s, u, g })
    }

    pub fn backward(&mut self, x: &Tensor, cache: &SeCache, gy: &Tensor) -> Tensor {
        let (c_n, hid) = self.dims();
        let n_b = x.shape[0];
        let per_c = x.spatial();
        let mut gx = Tensor::zeros(x.shape);

        for n in 0..n_b {
            // Direct path plus gate gradient.
            let mut dgate = vec![0.0; c_n];
            for c in 0..c_n {
                let gate = cache.g[n * c_n + c];
                let base = x.offset(n, c, 0, 0);
                let mut acc = 0.0;
                for i in base..base + per_c {
                    acc += gy.data[i] * x.data[i];
                    gx.data[i] = gy.data[i] * gate;
                }
                dgate[c] = acc;
            }

            // Through the sigmoid into the second linear layer.
            let mut du = vec![0.0; hid];
            for c in 0..c_n {
                let gate = cache.g[n * c_n + c];
                let dz = dgate[c] * gate * (1.0 - gate);
                self.b2.grad[c] += dz;
                for j in 0..hid {
                    self.w2.grad[c * hid + j] += dz * cache.u[n * hid + j];
                    du[j] += self.w2.val[c * hid + j] * dz;
                }
            }

            // Through the ReLU into the first linear layer.
            let mut ds = vec![0.0; c_n];
            for j in 0..hid {
                if cache.u[n * hid + j] <= 0.0 {
                    continue;
                }
                self.b1.grad[j] += du[j];
                for c in 0..c_n {
                    self.w1.grad[j * c_n + c] += du[j] * cache.s[n * c_n + c];
                    ds[c] += self.w1.val[j * c_n + c] * du[j];
                }
            }

            // Pooled descriptor spreads evenly back over the spatial extent.
            for c in 0..c_n {
                let spread = ds[c] / per_c as f64;
                let base = x.offset(n, c, 0, 0);
                for i in base..base + per_c {
                    gx.data[i] += spread;
                }
            }
        }
        gx
    }
}
