//! Forward numerics shared by the tape and by tape-free callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![0.0; m * n];
            gemm(
                MatRef::row_major(a.data(), m, k),
                MatRef::row_major(b.data(), k, n),
                &mut out,
                0.0,
            );
            Tensor::new([m, n], out)
        }
        _ => Err(Error::dim("matmul", a.shape(), b.shape())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    /// Full cross-channel convolution; kernel `[C_out, C_in, k, k]`.
    Dense,
    /// 1×1 channel mixing; kernel `[C_out, C_in, 1, 1]`.
    Pointwise,
    /// One `k×k` filter per channel; kernel `[C, 1, k, k]`.
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub mode: ConvMode,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(mode: ConvMode, stride: usize, padding: usize) -> Self {
        ConvSpec { mode, stride, padding }
    }
}

/// Fully resolved convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Accepts `[C, H, W]` or `[B, C, H, W]` inputs.
    pub fn resolve(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim("conv2d", input, kernel)),
        };
        let (c_out, kc, k) = match *kernel {
            [co, kc, kh, kw] if kh == kw => (co, kc, kh),
            _ => return Err(Error::dim("conv2d", input, kernel)),
        };
        let groups = match spec.mode {
            ConvMode::Dense | ConvMode::Pointwise => {
                if kc != c_in || (spec.mode == ConvMode::Pointwise && k != 1) {
                    return Err(Error::dim("conv2d", input, kernel));
                }
                1
            }
            ConvMode::Depthwise => {
                if kc != 1 || c_out != c_in {
                    return Err(Error::dim("conv2d", input, kernel));
                }
                c_in
            }
        };
        if spec.stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        if k == 0 || k > h + 2 * spec.padding || k > w + 2 * spec.padding {
            return Err(Error::dim("conv2d", input, kernel));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride: spec.stride,
            padding: spec.padding,
            groups,
            h_out: (h + 2 * spec.padding - k) / spec.stride + 1,
            w_out: (w + 2 * spec.padding - k) / spec.stride + 1,
        })
    }

    pub fn is_gemm(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    pub fn output_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }

    /// Multiply-accumulates per forward pass (all batch items).
    pub fn macs(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out * self.k * self.k * (self.c_in / self.groups)
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `kk`.
    fn out_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p, kk) = (self.stride as isize, self.padding as isize, kk as isize);
        let lo = (p - kk).max(0);
        let lo = ((lo + s - 1) / s) as usize;
        let hi_num = extent as isize - 1 + p - kk;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = ((hi_num / s) as usize + 1).min(out_extent);
        (lo.min(hi), hi)
    }

    /// Calls `f(in_plane, out_plane, kernel_index)` offsets for every
    /// (batch, out channel, in channel) triple, then `tap(in_off, out_off)`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let cin_g = self.c_in / self.groups;
        let cout_g = self.c_out / self.groups;
        let (hw, hw_out) = (self.h * self.w, self.h_out * self.w_out);
        for b in 0..self.batch {
            for co in 0..self.c_out {
                let g = co / cout_g;
                let out_plane = (b * self.c_out + co) * hw_out;
                for cil in 0..cin_g {
                    let ci = g * cin_g + cil;
                    let in_plane = (b * self.c_in + ci) * hw;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = ((co * cin_g + cil) * self.k + ky) * self.k + kx;
                            f(in_plane, out_plane, widx, ky, kx);
                        }
                    }
                }
            }
        }
    }

    /// Iterates the valid `(input offset, output offset)` pairs of one tap.
    #[inline]
    fn tap_pairs(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oy_lo, oy_hi) = self.out_range(ky, self.h, self.h_out);
        let (ox_lo, ox_hi) = self.out_range(kx, self.w, self.w_out);
        for oy in oy_lo..oy_hi {
            let iy = oy * self.stride + ky - self.padding;
            let ix0 = ox_lo * self.stride + kx - self.padding;
            f(iy * self.w + ix0, oy * self.w_out + ox_lo, ox_hi - ox_lo);
        }
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
    if g.is_gemm() {
        let hw = g.h * g.w;
        for b in 0..g.batch {
            gemm(
                MatRef::row_major(kernel, g.c_out, g.c_in),
                MatRef::row_major(&input[b * g.c_in * hw..(b + 1) * g.c_in * hw], g.c_in, hw),
                &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw],
                0.0,
            );
        }
        return out;
    }
    let s = g.stride;
    g.for_each_tap(|in_plane, out_plane, widx, ky, kx| {
        let wv = kernel[widx];
        g.tap_pairs(ky, kx, |i0, o0, len| {
            let dst = &mut out[out_plane + o0..out_plane + o0 + len];
            if s == 1 {
                let src = &input[in_plane + i0..in_plane + i0 + len];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wv * x;
                }
            } else {
                let src = &input[in_plane + i0..];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += wv * src[j * s];
                }
            }
        });
    });
    out
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    if g.is_gemm() {
        let (hw, ci, co) = (g.h * g.w, g.c_in, g.c_out);
        for b in 0..g.batch {
            let x = &input[b * ci * hw..(b + 1) * ci * hw];
            let dy = &grad_out[b * co * hw..(b + 1) * co * hw];
            if let Some(gk) = gk.as_mut() {
                gemm(MatRef::row_major(dy, co, hw), MatRef::transposed(x, ci, hw), gk, 1.0);
            }
            if let Some(gin) = gin.as_mut() {
                gemm(
                    MatRef::transposed(kernel, co, ci),
                    MatRef::row_major(dy, co, hw),
                    &mut gin[b * ci * hw..(b + 1) * ci * hw],
                    0.0,
                );
            }
        }
        return (gin, gk);
    }
    let s = g.stride;
    g.for_each_tap(|in_plane, out_plane, widx, ky, kx| {
        let wv = kernel[widx];
        let mut acc = 0.0;
        g.tap_pairs(ky, kx, |i0, o0, len| {
            let dy = &grad_out[out_plane + o0..out_plane + o0 + len];
            if s == 1 {
                if let Some(gin) = gin.as_mut() {
                    let dst = &mut gin[in_plane + i0..in_plane + i0 + len];
                    for (x, &d) in dst.iter_mut().zip(dy) {
                        *x += wv * d;
                    }
                }
                if gk.is_some() {
                    acc += dot(&input[in_plane + i0..in_plane + i0 + len], dy);
                }
                return;
            }
            if let Some(gin) = gin.as_mut() {
                let dst = &mut gin[in_plane + i0..];
                for (j, &d) in dy.iter().enumerate() {
                    dst[j * s] += wv * d;
                }
            }
            if gk.is_some() {
                let src = &input[in_plane + i0..];
                for (j, &d) in dy.iter().enumerate() {
                    acc += src[j * s] * d;
                }
            }
        });
        if let Some(gk) = gk.as_mut() {
            gk[widx] += acc;
        }
    });
    (gin, gk)
}

/// Cross-correlation of `input` (`[C,H,W]` or `[B,C,H,W]`) with `kernel`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::resolve(input.shape(), kernel.shape(), spec)?;
    Tensor::new(
        g.output_shape(input.ndim() == 4),
        conv2d_forward(input.data(), kernel.data(), &g),
    )
}

/// `(outer, channels, inner)` factorisation around a channel axis.
pub(crate) fn channel_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(
            "batch_norm",
            format!("channel axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Per-channel statistics of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

pub(crate) fn channel_moments(x: &[f64], outer: usize, c: usize, inner: usize) -> BatchMoments {
    let count = (outer * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            *m += x[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    // second pass removes the rounding error of the first
    let mut corr = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let mu = mean[ch];
            corr[ch] += x[base..base + inner].iter().map(|v| v - mu).sum::<f64>();
        }
    }
    mean.iter_mut().zip(&corr).for_each(|(m, c)| *m += c / count);
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let mu = mean[ch];
            var[ch] += x[base..base + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    BatchMoments { mean, var }
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: &BatchMoments) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// `y = gamma·(x - mean)/sqrt(var + eps) + beta` per channel; returns
/// `(y, xhat, inv_std)`.
pub(crate) fn normalize(
    x: &[f64],
    (outer, c, inner): (usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + inner {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                y[i] = ga * h + be;
            }
        }
    }
    (y, xhat, inv_std)
}

/// Tape-free batch norm. Training mode normalises with the batch moments and
/// folds them into `running`; inference mode reads `running`.
pub fn batch_norm(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &mut RunningStats,
    channel_axis: usize,
    training: bool,
) -> Result<Tensor> {
    let split = channel_split(input.shape(), channel_axis)?;
    let c = split.1;
    if gamma.len() != c || beta.len() != c || running.channels() != c {
        return Err(Error::dim("batch_norm", input.shape(), &[gamma.len()]));
    }
    let y = if training {
        let m = channel_moments(input.data(), split.0, c, split.2);
        let (y, _, _) = normalize(input.data(), split, &m.mean, &m.var, gamma, beta);
        running.update(&m);
        y
    } else {
        normalize(input.data(), split, &running.mean, &running.var, gamma, beta).0
    };
    Tensor::new(input.shape().to_vec(), y)
}
