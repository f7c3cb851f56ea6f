//! Layer primitives and their backward passes.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding.
//! Forward kernels accumulate each output element in a fixed order, so
//! results do not depend on how many threads rayon uses.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{matmul, transpose, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Square kernel helper.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("conv channel counts must be >= 1: {self:?}")));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::Config(format!("conv kernel and stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = window_count(h, self.kernel_h, self.stride, self.pad);
        let ow = window_count(w, self.kernel_w, self.stride, self.pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(shape_err!(
                "conv {}x{} stride {} pad {} does not fit a {h}x{w} input",
                self.kernel_h,
                self.kernel_w,
                self.stride,
                self.pad
            )),
        }
    }
}

/// `floor((len + 2 pad - k) / stride) + 1`, or `None` when no window fits.
pub fn window_count(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output positions `o` in `0..out_len` whose tap `o * stride + k - pad`
/// lands inside `0..in_len`.
fn valid_outputs(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad <= k {
        return 0..0;
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    lo.min(hi)..hi
}

/// Gradients of a layer with respect to its input and (optionally) its
/// parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_input: Tensor,
    pub d_weight: Option<Tensor>,
    pub d_bias: Option<Tensor>,
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, w) = input.shape().nchw()?;
    if c != spec.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, input has {c}",
            spec.in_channels
        ));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(shape_err!(
            "conv weight shape {:?} does not match spec {:?}",
            weight.dims(),
            spec.weight_dims()
        ));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok((n, h, w, oh, ow))
}

/// 2-D convolution of `input [N, C, H, W]` with `weight [O, C, kh, kw]`.
///
/// Every output element is `sum + bias[o]`, where `sum` starts at `0.0` and
/// accumulates in-bounds taps in `(c, ky, kx)` order.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, h, w, oh, ow) = check_conv_shapes(input, weight, spec)?;
    if bias.dims() != [spec.out_channels] {
        return Err(shape_err!(
            "conv bias shape {:?}, expected [{}]",
            bias.dims(),
            spec.out_channels
        ));
    }
    let &ConvSpec {
        out_channels,
        in_channels: c,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    } = spec;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();

    let mut out = vec![0.0f32; n * out_channels * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, out_plane)| {
        let ni = plane / out_channels;
        let o = plane % out_channels;
        for ci in 0..c {
            let x_plane = &x[(ni * c + ci) * h * w..][..h * w];
            for ky in 0..kh {
                let rows = valid_outputs(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let wv = wt[((o * c + ci) * kh + ky) * kw + kx];
                    let cols = valid_outputs(ow, w, kx, stride, pad);
                    for oy in rows.clone() {
                        let x_row = &x_plane[(oy * stride + ky - pad) * w..][..w];
                        let out_row = &mut out_plane[oy * ow..][..ow];
                        for ox in cols.clone() {
                            out_row[ox] += wv * x_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
        for v in out_plane.iter_mut() {
            *v += b[o];
        }
    });
    Tensor::from_vec(&[n, out_channels, oh, ow], out)
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, spec: &ConvSpec, d_output: &Tensor) -> Result<LayerGrads> {
    let (n, h, w, oh, ow) = check_conv_shapes(input, weight, spec)?;
    let &ConvSpec {
        out_channels,
        in_channels: c,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    } = spec;
    if d_output.dims() != [n, out_channels, oh, ow] {
        return Err(shape_err!(
            "conv d_output shape {:?}, expected {:?}",
            d_output.dims(),
            [n, out_channels, oh, ow]
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = d_output.data();
    let plane = oh * ow;

    let d_bias: Vec<f32> = (0..out_channels)
        .into_par_iter()
        .map(|o| {
            let mut acc = 0.0f32;
            for ni in 0..n {
                for &g in &dy[(ni * out_channels + o) * plane..][..plane] {
                    acc += g;
                }
            }
            acc
        })
        .collect();

    let mut d_weight = vec![0.0f32; out_channels * c * kh * kw];
    d_weight.par_chunks_mut(c * kh * kw).enumerate().for_each(|(o, dw)| {
        for ci in 0..c {
            for ky in 0..kh {
                let rows = valid_outputs(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let cols = valid_outputs(ow, w, kx, stride, pad);
                    let mut acc = 0.0f32;
                    for ni in 0..n {
                        let x_plane = &x[(ni * c + ci) * h * w..][..h * w];
                        let g_plane = &dy[(ni * out_channels + o) * plane..][..plane];
                        for oy in rows.clone() {
                            let x_row = &x_plane[(oy * stride + ky - pad) * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            for ox in cols.clone() {
                                acc += g_row[ox] * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                    dw[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });

    let mut d_input = vec![0.0f32; n * c * h * w];
    d_input.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dx)| {
        for o in 0..out_channels {
            let g_plane = &dy[(ni * out_channels + o) * plane..][..plane];
            for ci in 0..c {
                let dx_plane = &mut dx[ci * h * w..][..h * w];
                for ky in 0..kh {
                    let rows = valid_outputs(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = wt[((o * c + ci) * kh + ky) * kw + kx];
                        let cols = valid_outputs(ow, w, kx, stride, pad);
                        for oy in rows.clone() {
                            let dx_row = &mut dx_plane[(oy * stride + ky - pad) * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            for ox in cols.clone() {
                                dx_row[ox * stride + kx - pad] += g_row[ox] * wv;
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(LayerGrads {
        d_input: Tensor::from_vec(input.dims(), d_input)?,
        d_weight: Some(Tensor::from_vec(weight.dims(), d_weight)?),
        d_bias: Some(Tensor::from_vec(&[out_channels], d_bias)?),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `d_out` where the forward input was positive.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if x.shape() != d_out.shape() {
        return Err(shape_err!("relu backward: {:?} vs {:?}", x.dims(), d_out.dims()));
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

fn pool_dims(x: &Tensor, kernel: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.shape().nchw()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("max-pool kernel and stride must be >= 1".into()));
    }
    match (window_count(h, kernel, stride, 0), window_count(w, kernel, stride, 0)) {
        (Some(oh), Some(ow)) => Ok((n, c, h, w, oh, ow)),
        _ => Err(shape_err!("max-pool window {kernel} larger than {h}x{w} input")),
    }
}

/// Flat index (within its plane) of the first maximal element of each window.
fn pool_argmax(x: &Tensor, kernel: usize, stride: usize) -> Result<(Vec<usize>, [usize; 4])> {
    let (n, c, h, w, oh, ow) = pool_dims(x, kernel, stride)?;
    let mut idx = vec![0usize; n * c * oh * ow];
    idx.par_chunks_mut(oh * ow).enumerate().for_each(|(p, out)| {
        let plane = &x.data()[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (oy * stride) * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (oy * stride + ky) * w + ox * stride + kx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                }
                out[oy * ow + ox] = best;
            }
        }
    });
    Ok((idx, [n, c, oh, ow]))
}

/// Max pooling without padding, floor output size.
pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (idx, dims) = pool_argmax(x, kernel, stride)?;
    let (_, _, h, w) = x.shape().nchw()?;
    let per_plane = dims[2] * dims[3];
    let data = idx
        .iter()
        .enumerate()
        .map(|(i, &j)| x.data()[(i / per_plane) * h * w + j])
        .collect();
    Tensor::from_vec(&dims, data)
}

/// Routes each upstream gradient to the first maximal input of its window.
pub fn maxpool2d_backward(x: &Tensor, kernel: usize, stride: usize, d_out: &Tensor) -> Result<Tensor> {
    let (idx, dims) = pool_argmax(x, kernel, stride)?;
    if d_out.dims() != dims {
        return Err(shape_err!("max-pool d_out shape {:?}, expected {dims:?}", d_out.dims()));
    }
    let (_, _, h, w) = x.shape().nchw()?;
    let per_plane = dims[2] * dims[3];
    let mut dx = Tensor::zeros_like(x);
    let d = dx.data_mut();
    for (i, (&j, &g)) in idx.iter().zip(d_out.data()).enumerate() {
        d[(i / per_plane) * h * w + j] += g;
    }
    Ok(dx)
}

/// Concatenates along the channel axis: `a` first, then `b`.
pub fn channel_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.shape().nchw()?;
    let (nb, cb, hb, wb) = b.shape().nchw()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!(
            "concat of {:?} and {:?}: batch/spatial mismatch",
            a.dims(),
            b.dims()
        ));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * sa..][..sa]);
        data.extend_from_slice(&b.data()[ni * sb..][..sb]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// Inverse of [`channel_concat`]: channels `[0, first)` and the rest.
pub fn channel_split(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.shape().nchw()?;
    if first == 0 || first >= c {
        return Err(shape_err!("cannot split {c} channels at {first}"));
    }
    let (sa, sb) = (first * h * w, (c - first) * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for item in x.data().chunks(sa + sb) {
        a.extend_from_slice(&item[..sa]);
        b.extend_from_slice(&item[sa..]);
    }
    Ok((
        Tensor::from_vec(&[n, first, h, w], a)?,
        Tensor::from_vec(&[n, c - first, h, w], b)?,
    ))
}

/// Mean over `H x W`, producing `[N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw()?;
    let area = (h * w) as f32;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / area).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_dims: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = input_dims else {
        return Err(shape_err!("global pool input must be [N, C, H, W], got {input_dims:?}"));
    };
    if d_out.dims() != [n, c] {
        return Err(shape_err!(
            "global pool d_out shape {:?}, expected [{n}, {c}]",
            d_out.dims()
        ));
    }
    let area = (h * w) as f32;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in d_out.data() {
        data.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::from_vec(input_dims, data)
}

/// `x [N, F] . w [F, U] + b`, bias broadcast over rows.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, units) = w.shape().matrix()?;
    if b.dims() != [units] {
        return Err(shape_err!("dense bias shape {:?}, expected [{units}]", b.dims()));
    }
    let mut out = matmul(x, w)?;
    for row in out.data_mut().chunks_mut(units) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, d_out: &Tensor) -> Result<LayerGrads> {
    let (rows, features) = x.shape().matrix()?;
    let (wf, units) = w.shape().matrix()?;
    if wf != features || d_out.dims() != [rows, units] {
        return Err(shape_err!(
            "dense backward shapes x {:?}, w {:?}, d_out {:?}",
            x.dims(),
            w.dims(),
            d_out.dims()
        ));
    }
    let d_input = matmul(d_out, &transpose(w)?)?;
    let d_weight = matmul(&transpose(x)?, d_out)?;
    let mut d_bias = vec![0.0f32; units];
    for row in d_out.data().chunks(units) {
        for (acc, &g) in d_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LayerGrads {
        d_input,
        d_weight: Some(d_weight),
        d_bias: Some(Tensor::from_vec(&[units], d_bias)?),
    })
}

/// Row-wise softmax of `[N, m]` logits, `m >= 2`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, m) = logits.shape().matrix()?;
    if m < 2 {
        return Err(shape_err!("softmax needs at least 2 classes, got {m}"));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(m) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&z| (z as f64 - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    Tensor::from_vec(logits.dims(), out)
}

fn check_dropout_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Per-element multiplier: `0` with probability `rate`, else `1 / (1 - rate)`.
fn dropout_mask(len: usize, rate: f32, seed: u64) -> Vec<f32> {
    let keep_scale = 1.0 / (1.0 - rate);
    let mut rng = rng_from_seed(seed);
    (0..len)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep_scale })
        .collect()
}

/// Inverted dropout. Identity at inference or when `rate == 0`.
pub fn dropout(x: &Tensor, rate: f32, seed: u64, training: bool) -> Result<Tensor> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, seed);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::from_vec(x.dims(), data)
}

/// Backward of a training-mode [`dropout`] with the same `rate` and `seed`.
pub fn dropout_backward(d_out: &Tensor, rate: f32, seed: u64) -> Result<Tensor> {
    dropout(d_out, rate, seed, true)
}
