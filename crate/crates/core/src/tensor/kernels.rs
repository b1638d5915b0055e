//! Raw forward and backward kernels over NHWC buffers.
//!
//! These take bare tensors and are shared by the layer-level API and the
//! autodiff tape. Batch items are processed in parallel; reductions over the
//! batch are summed in item order so results do not depend on scheduling.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`, zero-padded with the extra
    /// row/column at the bottom/right.
    Same,
    /// No padding, output `(in - k) / stride + 1`.
    Valid,
}

/// Output length and leading pad for one spatial axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    fn new(op: &'static str, input: &[usize], kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        let (b, h, w) = (input[0], input[1], input[2]);
        let (oh, pad_t) =
            conv_out_dim(h, kh, stride, padding).ok_or_else(|| Error::shape(op, "height", format!(">= {kh}"), h))?;
        let (ow, pad_l) =
            conv_out_dim(w, kw, stride, padding).ok_or_else(|| Error::shape(op, "width", format!(">= {kw}"), w))?;
        Ok(Self {
            b,
            h,
            w,
            oh,
            ow,
            stride,
            pad_t,
            pad_l,
        })
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - pad as isize;
        if p < 0 || p as usize >= limit {
            None
        } else {
            Some(p as usize)
        }
    }
}

fn rank4(op: &'static str, t: &Tensor<impl Element>, what: &str) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::shape(op, format!("{what} rank"), 4, t.rank()));
    }
    Ok(())
}

/// Standard convolution. `weight` is `(kh, kw, c_in, c_out)`.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    rank4("conv2d", input, "input")?;
    rank4("conv2d", weight, "weight")?;
    let ws = weight.shape();
    let (kh, kw, ci, co) = (ws[0], ws[1], ws[2], ws[3]);
    let cin = input.shape()[3];
    if cin != ci {
        return Err(Error::shape("conv2d", "input channels (c_in)", ci, cin));
    }
    let g = ConvGeom::new("conv2d", input.shape(), kh, kw, stride, padding)?;
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); g.b * g.oh * g.ow * co];
    out.par_chunks_mut(g.oh * g.ow * co).enumerate().for_each(|(bi, ob)| {
        let xb = &x[bi * g.h * g.w * ci..(bi + 1) * g.h * g.w * ci];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let acc = &mut ob[(oy * g.ow + ox) * co..(oy * g.ow + ox + 1) * co];
                for ky in 0..kh {
                    let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else {
                            continue;
                        };
                        let xp = &xb[(iy * g.w + ix) * ci..(iy * g.w + ix + 1) * ci];
                        let wk = &wd[(ky * kw + kx) * ci * co..(ky * kw + kx + 1) * ci * co];
                        for (c, &xv) in xp.iter().enumerate() {
                            let wrow = &wk[c * co..(c + 1) * co];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.b, g.oh, g.ow, co], out)
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let ws = weight.shape();
    let (kh, kw, ci, co) = (ws[0], ws[1], ws[2], ws[3]);
    let g = ConvGeom::new("conv2d", input.shape(), kh, kw, stride, padding)?;
    let x = input.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.b)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * g.h * g.w * ci..(bi + 1) * g.h * g.w * ci];
            let gb = &gy[bi * g.oh * g.ow * co..(bi + 1) * g.oh * g.ow * co];
            let mut gx = if want_input {
                vec![T::zero(); g.h * g.w * ci]
            } else {
                Vec::new()
            };
            let mut gw = vec![T::zero(); kh * kw * ci * co];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = &gb[(oy * g.ow + ox) * co..(oy * g.ow + ox + 1) * co];
                    for ky in 0..kh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else {
                                continue;
                            };
                            let base = (iy * g.w + ix) * ci;
                            let koff = (ky * kw + kx) * ci * co;
                            for c in 0..ci {
                                let xv = xb[base + c];
                                let wrow = &wd[koff + c * co..koff + (c + 1) * co];
                                let gwrow = &mut gw[koff + c * co..koff + (c + 1) * co];
                                let mut s = T::zero();
                                for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(go) {
                                    *gwv += xv * gv;
                                    s += wv * gv;
                                }
                                if want_input {
                                    gx[base + c] += s;
                                }
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gw = vec![T::zero(); kh * kw * ci * co];
    let mut gx = Vec::with_capacity(if want_input { x.len() } else { 0 });
    for (gxi, gwi) in per_item {
        for (a, b) in gw.iter_mut().zip(gwi) {
            *a += b;
        }
        gx.extend(gxi);
    }
    let gx = if want_input {
        Some(Tensor::new(input.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(ws.to_vec(), gw)?))
}

/// Per-channel convolution. `weight` is `(kh, kw, c, 1)`.
pub fn depthwise_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    rank4("depthwise_conv2d", input, "input")?;
    rank4("depthwise_conv2d", weight, "weight")?;
    let ws = weight.shape();
    let (kh, kw, c) = (ws[0], ws[1], ws[2]);
    if ws[3] != 1 {
        return Err(Error::shape("depthwise_conv2d", "weight multiplier", 1, ws[3]));
    }
    let cin = input.shape()[3];
    if cin != c {
        return Err(Error::shape("depthwise_conv2d", "input channels", c, cin));
    }
    let g = ConvGeom::new("depthwise_conv2d", input.shape(), kh, kw, stride, padding)?;
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); g.b * g.oh * g.ow * c];
    out.par_chunks_mut(g.oh * g.ow * c).enumerate().for_each(|(bi, ob)| {
        let xb = &x[bi * g.h * g.w * c..(bi + 1) * g.h * g.w * c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let acc = &mut ob[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
                for ky in 0..kh {
                    let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else {
                            continue;
                        };
                        let xp = &xb[(iy * g.w + ix) * c..(iy * g.w + ix + 1) * c];
                        let wk = &wd[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(xp).zip(wk) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.b, g.oh, g.ow, c], out)
}

pub fn depthwise_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let ws = weight.shape();
    let (kh, kw, c) = (ws[0], ws[1], ws[2]);
    let g = ConvGeom::new("depthwise_conv2d", input.shape(), kh, kw, stride, padding)?;
    let x = input.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.b)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * g.h * g.w * c..(bi + 1) * g.h * g.w * c];
            let gb = &gy[bi * g.oh * g.ow * c..(bi + 1) * g.oh * g.ow * c];
            let mut gx = if want_input {
                vec![T::zero(); g.h * g.w * c]
            } else {
                Vec::new()
            };
            let mut gw = vec![T::zero(); kh * kw * c];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = &gb[(oy * g.ow + ox) * c..(oy * g.ow + ox + 1) * c];
                    for ky in 0..kh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else {
                                continue;
                            };
                            let base = (iy * g.w + ix) * c;
                            let koff = (ky * kw + kx) * c;
                            for ch in 0..c {
                                gw[koff + ch] += xb[base + ch] * go[ch];
                                if want_input {
                                    gx[base + ch] += wd[koff + ch] * go[ch];
                                }
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gw = vec![T::zero(); kh * kw * c];
    let mut gx = Vec::with_capacity(if want_input { x.len() } else { 0 });
    for (gxi, gwi) in per_item {
        for (a, b) in gw.iter_mut().zip(gwi) {
            *a += b;
        }
        gx.extend(gxi);
    }
    let gx = if want_input {
        Some(Tensor::new(input.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(ws.to_vec(), gw)?))
}

/// `(batch, features) x (features, units) + bias`.
pub fn dense_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, f) = input.dims2("dense")?;
    let (wf, u) = weight.dims2("dense")?;
    if f != wf {
        return Err(Error::shape("dense", "input features", wf, f));
    }
    if let Some(bias) = bias {
        if bias.len() != u {
            return Err(Error::shape("dense", "bias length", u, bias.len()));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); b * u];
    out.par_chunks_mut(u).enumerate().for_each(|(bi, row)| {
        if let Some(bias) = bias {
            row.copy_from_slice(bias.data());
        }
        for (k, &xv) in x[bi * f..(bi + 1) * f].iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&w[k * u..(k + 1) * u]) {
                *o += xv * wv;
            }
        }
    });
    Tensor::new(vec![b, u], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, f) = input.dims2("dense")?;
    let (_, u) = weight.dims2("dense")?;
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); b * f];
    gx.par_chunks_mut(f).enumerate().for_each(|(bi, row)| {
        let go = &gy[bi * u..(bi + 1) * u];
        for (k, g) in row.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&wv, &gv) in w[k * u..(k + 1) * u].iter().zip(go) {
                s += wv * gv;
            }
            *g = s;
        }
    });
    let mut gw = vec![T::zero(); f * u];
    gw.par_chunks_mut(u).enumerate().for_each(|(k, row)| {
        for bi in 0..b {
            let xv = x[bi * f + k];
            for (g, &gv) in row.iter_mut().zip(&gy[bi * u..(bi + 1) * u]) {
                *g += xv * gv;
            }
        }
    });
    let mut gb = vec![T::zero(); u];
    for bi in 0..b {
        for (g, &gv) in gb.iter_mut().zip(&gy[bi * u..(bi + 1) * u]) {
            *g += gv;
        }
    }
    Ok((
        Tensor::new(vec![b, f], gx)?,
        Tensor::new(vec![f, u], gw)?,
        Tensor::new(vec![u], gb)?,
    ))
}

/// Per-channel mean and biased variance over every axis but the last.
pub fn channel_moments<T: Element>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = input.last_dim();
    let n = input.len() / c;
    let nf = T::from_f64(n as f64);
    let mut mean = vec![T::zero(); c];
    for px in input.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut var = vec![T::zero(); c];
    for px in input.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / nf);
    (mean, var)
}

/// `gamma * (x - mean) * inv_std + beta`, per channel. Returns the output and
/// the normalized values `xhat`.
pub fn batch_norm_apply<T: Element>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let c = input.last_dim();
    let mut y = Vec::with_capacity(input.len());
    let mut xhat = Vec::with_capacity(input.len());
    for px in input.data().chunks(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    let shape = input.shape().to_vec();
    (
        Tensor {
            shape: shape.clone(),
            data: y,
        },
        Tensor { shape, data: xhat },
    )
}

/// Backward of batch norm. `batch_stats` selects the train-mode formula where
/// mean and variance depend on the input. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    grad_out: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = xhat.last_dim();
    let n = xhat.len() / c;
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    for (gp, hp) in grad_out.data().chunks(c).zip(xhat.data().chunks(c)) {
        for ch in 0..c {
            dbeta[ch] += gp[ch];
            dgamma[ch] += gp[ch] * hp[ch];
        }
    }
    let nf = T::from_f64(n as f64);
    let mut dx = Vec::with_capacity(xhat.len());
    for (gp, hp) in grad_out.data().chunks(c).zip(xhat.data().chunks(c)) {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let v = if batch_stats {
                scale * (gp[ch] - dbeta[ch] / nf - hp[ch] * dgamma[ch] / nf)
            } else {
                scale * gp[ch]
            };
            dx.push(v);
        }
    }
    (
        Tensor {
            shape: xhat.shape().to_vec(),
            data: dx,
        },
        dgamma,
        dbeta,
    )
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let k = input.last_dim();
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / s);
    }
    Tensor {
        shape: input.shape().to_vec(),
        data: out,
    }
}

/// `(b,h,w,c) -> (b,c)` spatial mean.
pub fn global_avg_pool_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = input.dims4("global_avg_pool")?;
    let hw = T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, chunk) in input.data().chunks(h * w * c).enumerate() {
        let o = &mut out[bi * c..(bi + 1) * c];
        for px in chunk.chunks(c) {
            for (a, &v) in o.iter_mut().zip(px) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|a| *a = *a / hw);
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let hw = T::from_f64((h * w) as f64);
    let mut gx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        let g = &grad_out.data()[bi * c..(bi + 1) * c];
        for _ in 0..h * w {
            gx.extend(g.iter().map(|&v| v / hw));
        }
    }
    Tensor {
        shape: input_shape.to_vec(),
        data: gx,
    }
}

/// Multiplies `(b,h,w,c)` features by a per-sample channel gate `(b,c)`.
pub fn channel_scale_forward<T: Element>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4("channel_scale")?;
    let (gb, gc) = gate.dims2("channel_scale")?;
    if gb != b || gc != c {
        return Err(Error::shape(
            "channel_scale",
            "gate",
            format!("({b}, {c})"),
            format!("({gb}, {gc})"),
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for (bi, chunk) in x.data().chunks(h * w * c).enumerate() {
        let g = &gate.data()[bi * c..(bi + 1) * c];
        for px in chunk.chunks(c) {
            out.extend(px.iter().zip(g).map(|(&v, &s)| v * s));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn channel_scale_backward<T: Element>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![T::zero(); gate.len()];
    for (bi, (xc, gc)) in x
        .data()
        .chunks(h * w * c)
        .zip(grad_out.data().chunks(h * w * c))
        .enumerate()
    {
        let g = &gate.data()[bi * c..(bi + 1) * c];
        let acc = &mut gg[bi * c..(bi + 1) * c];
        for (xp, gp) in xc.chunks(c).zip(gc.chunks(c)) {
            for ch in 0..c {
                gx.push(gp[ch] * g[ch]);
                acc[ch] += gp[ch] * xp[ch];
            }
        }
    }
    (
        Tensor {
            shape: s.to_vec(),
            data: gx,
        },
        Tensor {
            shape: gate.shape().to_vec(),
            data: gg,
        },
    )
}

/// Bilinear resize of a single `(h, w)` plane, half-pixel centers.
pub fn bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}
