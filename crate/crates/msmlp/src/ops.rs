//! Forward operations and their vector-Jacobian products.
//!
//! Every forward here is a pure function of its inputs; the gradient tape in
//! [`crate::tape`] records which one ran and replays the matching `*_vjp`
//! during the backward pass. Spatial ops use zero padding throughout: shift
//! vacancies are zero-filled and convolutions see zeros beyond the border.
//!
//! Conventions:
//! - "convolution" means cross-correlation (no kernel flip), the usual
//!   deep-learning reading;
//! - kernel gradients come back as flat buffers in the container's
//!   [`FlatParam`](crate::params::FlatParam) layout (weight then bias).

use crate::error::{Error, Result};
use crate::params::{DepthwiseKernel, FullKernel, LinearWeights, NormAffine};
use crate::tensor::{Axis, Tensor4};

// ---------------------------------------------------------------------------
// shift

/// Translate a feature map by `offset` tokens along `axis`, zero-filling the
/// vacated positions: `out[n,i,j,c] = x[n, i-offset, j, c]` for the vertical
/// axis (and the analogous formula for the horizontal one).
///
/// Errors when `|offset|` is not smaller than the corresponding spatial
/// extent. Use [`shift2d_saturating`] where an entirely shifted-out map
/// should degrade to zeros instead.
pub fn shift2d(x: &Tensor4, offset: i64, axis: Axis) -> Result<Tensor4> {
    let extent = match axis {
        Axis::Vertical => x.height(),
        Axis::Horizontal => x.width(),
    };
    if offset.unsigned_abs() as usize >= extent {
        return Err(Error::invalid_argument(format!(
            "shift offset {offset} out of range for {axis:?} extent {extent}"
        )));
    }
    Ok(shift2d_saturating(x, offset, axis))
}

/// [`shift2d`] without the range check: offsets at or beyond the spatial
/// extent produce an all-zero map, the limit of the zero-fill semantics.
pub fn shift2d_saturating(x: &Tensor4, offset: i64, axis: Axis) -> Tensor4 {
    let (n, h, w, c) = x.shape();
    let mut out = Tensor4::zeros(n, h, w, c);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match axis {
                    Axis::Vertical => (i as i64 - offset, j as i64),
                    Axis::Horizontal => (i as i64, j as i64 - offset),
                };
                if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                    continue;
                }
                let (si, sj) = (si as usize, sj as usize);
                let dst = out.idx(b, i, j, 0);
                let src = x.idx(b, si, sj, 0);
                for ch in 0..c {
                    out.data_mut()[dst + ch] = x.data()[src + ch];
                }
            }
        }
    }
    out
}

/// The adjoint of a zero-fill shift is the opposite shift.
pub fn shift2d_vjp(grad_out: &Tensor4, offset: i64, axis: Axis) -> Tensor4 {
    shift2d_saturating(grad_out, -offset, axis)
}

// ---------------------------------------------------------------------------
// depthwise convolution

/// Same-padded per-channel convolution: each channel is convolved with its
/// own `r x r` filter, `(r-1)/2` zeros on every border, output shape equal to
/// the input shape.
pub fn depthwise_conv2d(x: &Tensor4, k: &DepthwiseKernel) -> Result<Tensor4> {
    if k.channels != x.channels() {
        return Err(Error::invalid_argument(format!(
            "depthwise kernel has {} channels, input has {}",
            k.channels,
            x.channels()
        )));
    }
    let (n, h, w, c) = x.shape();
    let r = k.region;
    let pad = k.pad() as i64;
    let mut out = Tensor4::zeros(n, h, w, c);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = out.idx(b, i, j, 0);
                for ch in 0..c {
                    let mut acc = k.bias.as_ref().map_or(0.0, |bias| bias[ch]);
                    for u in 0..r {
                        let si = i as i64 + u as i64 - pad;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for v in 0..r {
                            let sj = j as i64 + v as i64 - pad;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            acc += k.w(ch, u, v) * x.at(b, si as usize, sj as usize, ch);
                        }
                    }
                    out.data_mut()[base + ch] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`] w.r.t. input and kernel (flat layout).
pub fn depthwise_conv2d_vjp(x: &Tensor4, k: &DepthwiseKernel, grad_out: &Tensor4) -> (Tensor4, Vec<f64>) {
    let (n, h, w, c) = x.shape();
    debug_assert_eq!(grad_out.shape(), x.shape());
    let r = k.region;
    let pad = k.pad() as i64;

    let mut dx = Tensor4::zeros(n, h, w, c);
    let mut dk = vec![0.0; k.flat_len()];
    let (dw, db) = dk.split_at_mut(k.weight.len());

    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let gbase = grad_out.idx(b, i, j, 0);
                for ch in 0..c {
                    let g = grad_out.data()[gbase + ch];
                    if k.bias.is_some() {
                        db[ch] += g;
                    }
                    for u in 0..r {
                        let si = i as i64 + u as i64 - pad;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for v in 0..r {
                            let sj = j as i64 + v as i64 - pad;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            let xi = x.idx(b, si as usize, sj as usize, ch);
                            dw[(ch * r + u) * r + v] += g * x.data()[xi];
                            dx.data_mut()[xi] += g * k.w(ch, u, v);
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

use crate::params::FlatParam;

// ---------------------------------------------------------------------------
// full convolution (cross-channel variant)

/// Same-padded dense convolution mixing all input channels into each output
/// channel. Output channel count follows the kernel.
pub fn full_conv2d(x: &Tensor4, k: &FullKernel) -> Result<Tensor4> {
    if k.in_channels != x.channels() {
        return Err(Error::invalid_argument(format!(
            "full-conv kernel expects {} input channels, input has {}",
            k.in_channels,
            x.channels()
        )));
    }
    let (n, h, w, _) = x.shape();
    let r = k.region;
    let pad = k.pad() as i64;
    let mut out = Tensor4::zeros(n, h, w, k.out_channels);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = out.idx(b, i, j, 0);
                for co in 0..k.out_channels {
                    let mut acc = k.bias.as_ref().map_or(0.0, |bias| bias[co]);
                    for u in 0..r {
                        let si = i as i64 + u as i64 - pad;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for v in 0..r {
                            let sj = j as i64 + v as i64 - pad;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            let xbase = x.idx(b, si as usize, sj as usize, 0);
                            for ci in 0..k.in_channels {
                                acc += k.w(co, ci, u, v) * x.data()[xbase + ci];
                            }
                        }
                    }
                    out.data_mut()[base + co] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn full_conv2d_vjp(x: &Tensor4, k: &FullKernel, grad_out: &Tensor4) -> (Tensor4, Vec<f64>) {
    let (n, h, w, cin) = x.shape();
    debug_assert_eq!(grad_out.channels(), k.out_channels);
    let r = k.region;
    let pad = k.pad() as i64;

    let mut dx = Tensor4::zeros(n, h, w, cin);
    let mut dk = vec![0.0; k.flat_len()];
    let (dw, db) = dk.split_at_mut(k.weight.len());

    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let gbase = grad_out.idx(b, i, j, 0);
                for co in 0..k.out_channels {
                    let g = grad_out.data()[gbase + co];
                    if k.bias.is_some() {
                        db[co] += g;
                    }
                    for u in 0..r {
                        let si = i as i64 + u as i64 - pad;
                        if si < 0 || si >= h as i64 {
                            continue;
                        }
                        for v in 0..r {
                            let sj = j as i64 + v as i64 - pad;
                            if sj < 0 || sj >= w as i64 {
                                continue;
                            }
                            let xbase = x.idx(b, si as usize, sj as usize, 0);
                            for ci in 0..cin {
                                dw[((co * cin + ci) * r + u) * r + v] += g * x.data()[xbase + ci];
                                dx.data_mut()[xbase + ci] += g * k.w(co, ci, u, v);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

// ---------------------------------------------------------------------------
// channel projection

/// Project every spatial position's channel vector: `(n,h,w,in) -> (n,h,w,out)`.
pub fn channel_linear(x: &Tensor4, wts: &LinearWeights) -> Result<Tensor4> {
    if wts.in_features != x.channels() {
        return Err(Error::invalid_argument(format!(
            "linear expects {} input features, input has {} channels",
            wts.in_features,
            x.channels()
        )));
    }
    let (n, h, w, cin) = x.shape();
    let cout = wts.out_features;
    let mut out = Tensor4::zeros(n, h, w, cout);
    let positions = n * h * w;
    for p in 0..positions {
        let xv = &x.data()[p * cin..(p + 1) * cin];
        let ov = &mut out.data_mut()[p * cout..(p + 1) * cout];
        for (o, slot) in ov.iter_mut().enumerate() {
            let row = &wts.weight[o * cin..(o + 1) * cin];
            let mut acc = wts.bias[o];
            for (wv, xvv) in row.iter().zip(xv) {
                acc += wv * xvv;
            }
            *slot = acc;
        }
    }
    Ok(out)
}

pub fn channel_linear_vjp(x: &Tensor4, wts: &LinearWeights, grad_out: &Tensor4) -> (Tensor4, Vec<f64>) {
    let (n, h, w, cin) = x.shape();
    let cout = wts.out_features;
    debug_assert_eq!(grad_out.channels(), cout);

    let mut dx = Tensor4::zeros(n, h, w, cin);
    let mut dflat = vec![0.0; wts.flat_len()];
    let (dw, db) = dflat.split_at_mut(wts.weight.len());

    let positions = n * h * w;
    for p in 0..positions {
        let xv = &x.data()[p * cin..(p + 1) * cin];
        let gv = &grad_out.data()[p * cout..(p + 1) * cout];
        let dxv = &mut dx.data_mut()[p * cin..(p + 1) * cin];
        for o in 0..cout {
            let g = gv[o];
            db[o] += g;
            let row = &wts.weight[o * cin..(o + 1) * cin];
            let drow = &mut dw[o * cin..(o + 1) * cin];
            for i in 0..cin {
                drow[i] += g * xv[i];
                dxv[i] += g * row[i];
            }
        }
    }
    (dx, dflat)
}

// ---------------------------------------------------------------------------
// layer normalization

/// Per-position channel normalization followed by a learned affine:
/// each `(n,i,j)` channel vector is shifted to zero mean and scaled to unit
/// variance (biased variance, stabilized by `eps`), then `gamma`/`beta`
/// applied per channel.
pub fn layer_norm(x: &Tensor4, affine: &NormAffine, eps: f64) -> Result<Tensor4> {
    if affine.channels() != x.channels() {
        return Err(Error::invalid_argument(format!(
            "norm affine has {} channels, input has {}",
            affine.channels(),
            x.channels()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid_argument("layer_norm eps must be > 0"));
    }
    let (n, h, w, c) = x.shape();
    let mut out = Tensor4::zeros(n, h, w, c);
    let positions = n * h * w;
    for p in 0..positions {
        let xv = &x.data()[p * c..(p + 1) * c];
        let ov = &mut out.data_mut()[p * c..(p + 1) * c];
        let mean = xv.iter().sum::<f64>() / c as f64;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            ov[ch] = affine.gamma[ch] * ((xv[ch] - mean) * inv) + affine.beta[ch];
        }
    }
    Ok(out)
}

pub fn layer_norm_vjp(x: &Tensor4, affine: &NormAffine, eps: f64, grad_out: &Tensor4) -> (Tensor4, Vec<f64>) {
    let (n, h, w, c) = x.shape();
    let mut dx = Tensor4::zeros(n, h, w, c);
    let mut dflat = vec![0.0; affine.flat_len()];
    let (dgamma, dbeta) = dflat.split_at_mut(c);

    let positions = n * h * w;
    let cf = c as f64;
    for p in 0..positions {
        let xv = &x.data()[p * c..(p + 1) * c];
        let gv = &grad_out.data()[p * c..(p + 1) * c];
        let mean = xv.iter().sum::<f64>() / cf;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();

        // dxhat = g * gamma; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let xhat = (xv[ch] - mean) * inv;
            let dxhat = gv[ch] * affine.gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[ch] += gv[ch] * xhat;
            dbeta[ch] += gv[ch];
        }
        let m_dxhat = sum_dxhat / cf;
        let m_dxhat_xhat = sum_dxhat_xhat / cf;
        let dxv = &mut dx.data_mut()[p * c..(p + 1) * c];
        for ch in 0..c {
            let xhat = (xv[ch] - mean) * inv;
            let dxhat = gv[ch] * affine.gamma[ch];
            dxv[ch] = inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
        }
    }
    (dx, dflat)
}

// ---------------------------------------------------------------------------
// GeLU

/// Standard normal CDF via the exact erf form.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    // d/dx [x Phi(x)] = Phi(x) + x phi(x)
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * phi
}

/// Elementwise `x * Phi(x)` with `Phi` the exact standard normal CDF.
pub fn gelu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

pub fn gelu_vjp(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut dx = x.clone();
    for (d, g) in dx.data_mut().iter_mut().zip(grad_out.data()) {
        *d = gelu_grad_scalar(*d) * g;
    }
    dx
}

// ---------------------------------------------------------------------------
// pooling

/// Mean over the spatial extent, one value per (batch, channel). The result
/// keeps rank 4 with shape `(n, 1, 1, c)`; use [`Tensor4::rows`] for an
/// `(n, c)` matrix view.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = x.shape();
    let mut out = Tensor4::zeros(n, 1, 1, c);
    let scale = 1.0 / (h * w) as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = x.idx(b, i, j, 0);
                for ch in 0..c {
                    out.data_mut()[b * c + ch] += x.data()[base + ch] * scale;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool_vjp(input_shape: (usize, usize, usize, usize), grad_out: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = input_shape;
    let mut dx = Tensor4::zeros(n, h, w, c);
    let scale = 1.0 / (h * w) as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = dx.idx(b, i, j, 0);
                for ch in 0..c {
                    dx.data_mut()[base + ch] = grad_out.data()[b * c + ch] * scale;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// channel slicing / concatenation

/// Copy out channels `[start, start + width)`.
pub fn slice_channels(x: &Tensor4, start: usize, width: usize) -> Result<Tensor4> {
    let (n, h, w, c) = x.shape();
    if width == 0 || start + width > c {
        return Err(Error::invalid_argument(format!(
            "channel slice [{start}, {}) out of range for {c} channels",
            start + width
        )));
    }
    let mut out = Tensor4::zeros(n, h, w, width);
    let positions = n * h * w;
    for p in 0..positions {
        let src = &x.data()[p * c + start..p * c + start + width];
        out.data_mut()[p * width..(p + 1) * width].copy_from_slice(src);
    }
    Ok(out)
}

/// Scatter a slice gradient back into a zero tensor of the source shape.
pub fn slice_channels_vjp(input_shape: (usize, usize, usize, usize), start: usize, grad_out: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = input_shape;
    let width = grad_out.channels();
    let mut dx = Tensor4::zeros(n, h, w, c);
    let positions = n * h * w;
    for p in 0..positions {
        let dst = &mut dx.data_mut()[p * c + start..p * c + start + width];
        dst.copy_from_slice(&grad_out.data()[p * width..(p + 1) * width]);
    }
    dx
}

/// Concatenate along the channel dimension. All inputs must share `(n,h,w)`.
pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    if parts.is_empty() {
        return Err(Error::invalid_argument("concat_channels needs >= 1 input"));
    }
    let (n, h, w, _) = parts[0].shape();
    for p in parts {
        let (pn, ph, pw, _) = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::invalid_argument(
                "concat_channels inputs must share batch and spatial shape",
            ));
        }
    }
    let total_c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor4::zeros(n, h, w, total_c);
    let positions = n * h * w;
    for pos in 0..positions {
        let dst = &mut out.data_mut()[pos * total_c..(pos + 1) * total_c];
        let mut off = 0;
        for part in parts {
            let pc = part.channels();
            dst[off..off + pc].copy_from_slice(&part.data()[pos * pc..(pos + 1) * pc]);
            off += pc;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// patch flattening

/// Rearrange non-overlapping `p x p` patches into channels:
/// `(n, h, w, c) -> (n, h/p, w/p, p*p*c)`, patch-local `(di, dj)` major,
/// channel minor. Composed with a channel projection this realizes patch
/// embedding.
pub fn space_to_depth(x: &Tensor4, p: usize) -> Result<Tensor4> {
    let (n, h, w, c) = x.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid_argument(format!(
            "spatial extent {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (oh, ow, oc) = (h / p, w / p, p * p * c);
    let mut out = Tensor4::zeros(n, oh, ow, oc);
    for b in 0..n {
        for bi in 0..oh {
            for bj in 0..ow {
                let obase = out.idx(b, bi, bj, 0);
                for di in 0..p {
                    for dj in 0..p {
                        let xbase = x.idx(b, bi * p + di, bj * p + dj, 0);
                        let off = (di * p + dj) * c;
                        for ch in 0..c {
                            out.data_mut()[obase + off + ch] = x.data()[xbase + ch];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn space_to_depth_vjp(input_shape: (usize, usize, usize, usize), p: usize, grad_out: &Tensor4) -> Tensor4 {
    let (n, h, w, c) = input_shape;
    let (oh, ow) = (h / p, w / p);
    let mut dx = Tensor4::zeros(n, h, w, c);
    for b in 0..n {
        for bi in 0..oh {
            for bj in 0..ow {
                let gbase = grad_out.idx(b, bi, bj, 0);
                for di in 0..p {
                    for dj in 0..p {
                        let xbase = dx.idx(b, bi * p + di, bj * p + dj, 0);
                        let off = (di * p + dj) * c;
                        for ch in 0..c {
                            dx.data_mut()[xbase + ch] = grad_out.data()[gbase + off + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}
