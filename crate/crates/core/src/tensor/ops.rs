//! Pure forward kernels and their backward counterparts.
//!
//! Every function here is a plain function over immutable tensors; the tape
//! in [`crate::autodiff`] records which of these to call. Backward kernels
//! are exported so adjointness can be tested directly.

use rayon::prelude::*;

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Conv2dMeta {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dMeta {
    fn default() -> Self {
        Conv2dMeta { stride: 1, pad: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dMeta {
    pub fn stride(stride: usize) -> Self {
        Conv2dMeta { stride, ..Default::default() }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::shape(op, "dilation must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::shape(op, "groups must be positive"));
        }
        Ok(())
    }
}

/// Output spatial size of conv2d: floor((n + 2p - d*(k-1) - 1)/s) + 1.
pub fn conv2d_out_len(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    if padded < span {
        return Err(Error::shape(
            "conv2d",
            format!("kernel span {span} exceeds padded input {padded}"),
        ));
    }
    Ok((padded - span) / stride + 1)
}

/// Output indices i in [0, out_len) for which 0 <= i*stride + off < in_len.
#[inline]
fn valid_out_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let hi_num = in_len as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize) / stride + 1;
    (lo.min(out_len), hi.min(out_len))
}

fn check_conv_shapes(x: Shape, w: Shape, bias: Option<Shape>, m: &Conv2dMeta) -> Result<()> {
    m.validate("conv2d")?;
    if x.c % m.groups != 0 || w.b % m.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("groups {} must divide in-channels {} and out-channels {}", m.groups, x.c, w.b),
        ));
    }
    if w.c != x.c / m.groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight expects {} in-channels per group, input has {}", w.c, x.c / m.groups),
        ));
    }
    if let Some(bs) = bias {
        if bs != Shape::new(1, w.b, 1, 1) {
            return Err(Error::shape("conv2d", format!("bias shape {bs} != 1x{}x1x1", w.b)));
        }
    }
    Ok(())
}

/// 2-D cross-correlation with stride/pad/dilation/groups.
/// x: (B, C_in, H, W); w: (C_out, C_in/groups, kH, kW); bias: (1, C_out, 1, 1).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    m: &Conv2dMeta,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_conv_shapes(xs, ws, bias.map(|b| b.shape()), m)?;
    let ho = conv2d_out_len(xs.h, ws.h, m.stride, m.pad, m.dilation)?;
    let wo = conv2d_out_len(xs.w, ws.w, m.stride, m.pad, m.dilation)?;
    let out_shape = Shape::new(xs.b, ws.b, ho, wo);
    let cin_g = xs.c / m.groups;
    let cout_g = ws.b / m.groups;
    let plane = ho * wo;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
        let b = bc / ws.b;
        let co = bc % ws.b;
        if let Some(bt) = bias {
            o.fill(bt.data()[co]);
        }
        let group = co / cout_g;
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            for ki in 0..ws.h {
                let off_y = (ki * m.dilation) as isize - m.pad as isize;
                let (ilo, ihi) = valid_out_range(ho, xs.h, m.stride, off_y);
                for kj in 0..ws.w {
                    let wv = wd[ws.idx(co, cil, ki, kj)];
                    let off_x = (kj * m.dilation) as isize - m.pad as isize;
                    let (jlo, jhi) = valid_out_range(wo, xs.w, m.stride, off_x);
                    for i in ilo..ihi {
                        let sy = (i * m.stride) as isize + off_y;
                        let xrow = xs.idx(b, ci, sy as usize, 0) as isize + off_x;
                        let orow = &mut o[i * wo..(i + 1) * wo];
                        for j in jlo..jhi {
                            let sx = (xrow + (j * m.stride) as isize) as usize;
                            orow[j] = orow[j] + wv * xd[sx];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// d loss / d x for conv2d; the scatter dual of the forward gather.
pub fn conv2d_grad_input<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    m: &Conv2dMeta,
) -> Tensor<T> {
    let ys = dy.shape();
    let ws = w.shape();
    let cin_g = x_shape.c / m.groups;
    let cout_g = ws.b / m.groups;
    let yd = dy.data();
    let wd = w.data();
    let sample = x_shape.c * x_shape.h * x_shape.w;
    let mut dx = vec![T::zero(); x_shape.numel()];
    dx.par_chunks_mut(sample).enumerate().for_each(|(b, dxb)| {
        for co in 0..ws.b {
            let group = co / cout_g;
            for cil in 0..cin_g {
                let ci = group * cin_g + cil;
                let ci_base = ci * x_shape.h * x_shape.w;
                for ki in 0..ws.h {
                    let off_y = (ki * m.dilation) as isize - m.pad as isize;
                    let (ilo, ihi) = valid_out_range(ys.h, x_shape.h, m.stride, off_y);
                    for kj in 0..ws.w {
                        let wv = wd[ws.idx(co, cil, ki, kj)];
                        let off_x = (kj * m.dilation) as isize - m.pad as isize;
                        let (jlo, jhi) = valid_out_range(ys.w, x_shape.w, m.stride, off_x);
                        for i in ilo..ihi {
                            let sy = ((i * m.stride) as isize + off_y) as usize;
                            let yrow = ys.idx(b, co, i, 0);
                            let xrow = ci_base + sy * x_shape.w;
                            for j in jlo..jhi {
                                let sx = ((j * m.stride) as isize + off_x) as usize;
                                dxb[xrow + sx] = dxb[xrow + sx] + wv * yd[yrow + j];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(x_shape, dx).expect("shape consistent")
}

/// d loss / d w for conv2d.
pub fn conv2d_grad_weight<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: Shape,
    m: &Conv2dMeta,
) -> Tensor<T> {
    let xs = x.shape();
    let ys = dy.shape();
    let cin_g = xs.c / m.groups;
    let cout_g = w_shape.b / m.groups;
    let xd = x.data();
    let yd = dy.data();
    let per_co = w_shape.c * w_shape.h * w_shape.w;
    let mut dw = vec![T::zero(); w_shape.numel()];
    dw.par_chunks_mut(per_co).enumerate().for_each(|(co, dwc)| {
        let group = co / cout_g;
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            for ki in 0..w_shape.h {
                let off_y = (ki * m.dilation) as isize - m.pad as isize;
                let (ilo, ihi) = valid_out_range(ys.h, xs.h, m.stride, off_y);
                for kj in 0..w_shape.w {
                    let off_x = (kj * m.dilation) as isize - m.pad as isize;
                    let (jlo, jhi) = valid_out_range(ys.w, xs.w, m.stride, off_x);
                    let mut acc = T::zero();
                    for b in 0..xs.b {
                        for i in ilo..ihi {
                            let sy = ((i * m.stride) as isize + off_y) as usize;
                            let yrow = ys.idx(b, co, i, 0);
                            let xrow = xs.idx(b, ci, sy, 0) as isize + off_x;
                            for j in jlo..jhi {
                                let sx = (xrow + (j * m.stride) as isize) as usize;
                                acc = acc + yd[yrow + j] * xd[sx];
                            }
                        }
                    }
                    dwc[(cil * w_shape.h + ki) * w_shape.w + kj] = acc;
                }
            }
        }
    });
    Tensor::from_vec(w_shape, dw).expect("shape consistent")
}

/// d loss / d bias for conv2d: per-channel sum of dy.
pub fn conv2d_grad_bias<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let ys = dy.shape();
    let yd = dy.data();
    let mut db = vec![T::zero(); ys.c];
    for b in 0..ys.b {
        for c in 0..ys.c {
            let base = ys.idx(b, c, 0, 0);
            let mut acc = T::zero();
            for v in &yd[base..base + ys.h * ys.w] {
                acc = acc + *v;
            }
            db[c] = db[c] + acc;
        }
    }
    Tensor::from_vec(Shape::new(1, ys.c, 1, 1), db).expect("shape consistent")
}

fn check_conv_t_shapes(x: Shape, w: Shape, stride: usize, groups: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::shape("conv_transpose2d", "stride must be positive"));
    }
    if groups == 0 || x.c % groups != 0 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("groups {} must divide in-channels {}", groups, x.c),
        ));
    }
    if w.b != x.c {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("weight leading dim {} != in-channels {}", w.b, x.c),
        ));
    }
    Ok(())
}

/// Stride-s transposed convolution (the exact adjoint of [`conv2d`] at the
/// same stride with zero pad and unit dilation).
/// x: (B, C_in, H, W); w: (C_in, C_out/groups, kH, kW).
/// Output spatial size: (n-1)*stride + k.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_conv_t_shapes(xs, ws, stride, groups)?;
    let cout = ws.c * groups;
    let ho = (xs.h - 1) * stride + ws.h;
    let wo = (xs.w - 1) * stride + ws.w;
    let out_shape = Shape::new(xs.b, cout, ho, wo);
    let cin_g = xs.c / groups;
    let xd = x.data();
    let wd = w.data();
    let sample = cout * ho * wo;
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(sample).enumerate().for_each(|(b, ob)| {
        for ci in 0..xs.c {
            let group = ci / cin_g;
            for col in 0..ws.c {
                let co = group * ws.c + col;
                let co_base = co * ho * wo;
                for ki in 0..ws.h {
                    for kj in 0..ws.w {
                        let wv = wd[ws.idx(ci, col, ki, kj)];
                        for i in 0..xs.h {
                            let xrow = xs.idx(b, ci, i, 0);
                            let orow = co_base + (i * stride + ki) * wo + kj;
                            for j in 0..xs.w {
                                ob[orow + j * stride] = ob[orow + j * stride] + wv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// d loss / d x for conv_transpose2d: a stride-s correlation of dy with w.
pub fn conv_transpose2d_grad_input<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    stride: usize,
    groups: usize,
) -> Tensor<T> {
    let ys = dy.shape();
    let ws = w.shape();
    let cin_g = x_shape.c / groups;
    let yd = dy.data();
    let wd = w.data();
    let plane = x_shape.h * x_shape.w;
    let mut dx = vec![T::zero(); x_shape.numel()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(bc, dxp)| {
        let b = bc / x_shape.c;
        let ci = bc % x_shape.c;
        let group = ci / cin_g;
        for col in 0..ws.c {
            let co = group * ws.c + col;
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    let wv = wd[ws.idx(ci, col, ki, kj)];
                    for i in 0..x_shape.h {
                        let yrow = ys.idx(b, co, i * stride + ki, kj);
                        let xrow = i * x_shape.w;
                        for j in 0..x_shape.w {
                            dxp[xrow + j] = dxp[xrow + j] + wv * yd[yrow + j * stride];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(x_shape, dx).expect("shape consistent")
}

/// d loss / d w for conv_transpose2d.
pub fn conv_transpose2d_grad_weight<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: Shape,
    stride: usize,
    groups: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ys = dy.shape();
    let cin_g = xs.c / groups;
    let xd = x.data();
    let yd = dy.data();
    let per_ci = w_shape.c * w_shape.h * w_shape.w;
    let mut dw = vec![T::zero(); w_shape.numel()];
    dw.par_chunks_mut(per_ci).enumerate().for_each(|(ci, dwc)| {
        let group = ci / cin_g;
        for col in 0..w_shape.c {
            let co = group * w_shape.c + col;
            for ki in 0..w_shape.h {
                for kj in 0..w_shape.w {
                    let mut acc = T::zero();
                    for b in 0..xs.b {
                        for i in 0..xs.h {
                            let xrow = xs.idx(b, ci, i, 0);
                            let yrow = ys.idx(b, co, i * stride + ki, kj);
                            for j in 0..xs.w {
                                acc = acc + xd[xrow + j] * yd[yrow + j * stride];
                            }
                        }
                    }
                    dwc[(col * w_shape.h + ki) * w_shape.w + kj] = acc;
                }
            }
        }
    });
    Tensor::from_vec(w_shape, dw).expect("shape consistent")
}

/// Per-channel mean and biased variance over (B, H, W), as (1,C,1,1) tensors.
pub fn bn_stats<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let n = (s.b * s.h * s.w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            let base = s.idx(b, c, 0, 0);
            for v in &xd[base..base + s.h * s.w] {
                mean[c] += v.as_f64();
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for b in 0..s.b {
        for c in 0..s.c {
            let base = s.idx(b, c, 0, 0);
            for v in &xd[base..base + s.h * s.w] {
                let d = v.as_f64() - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    let cshape = Shape::new(1, s.c, 1, 1);
    (
        Tensor::from_vec(cshape, mean.into_iter().map(T::from_f64).collect()).unwrap(),
        Tensor::from_vec(cshape, var.into_iter().map(T::from_f64).collect()).unwrap(),
    )
}

fn check_channel_vec(op: &'static str, name: &str, v: Shape, c: usize) -> Result<()> {
    if v != Shape::new(1, c, 1, 1) {
        return Err(Error::shape(op, format!("{name} shape {v} != 1x{c}x1x1")));
    }
    Ok(())
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn bn_apply<T: Element>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        check_channel_vec("batch_norm", name, t.shape(), s.c)?;
    }
    let xd = x.data();
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.h * s.w;
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
        let c = bc % s.c;
        let inv = T::from_f64(1.0 / (var.data()[c].as_f64() + eps).sqrt());
        let g = gamma.data()[c] * inv;
        let bias = beta.data()[c] - gamma.data()[c] * inv * mean.data()[c];
        let base = bc * plane;
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = g * xd[base + j] + bias;
        }
    });
    Tensor::from_vec(s, out)
}

/// Backward for train-mode batch norm (gradients flow through batch stats).
/// Returns (dx, dgamma, dbeta).
pub fn bn_grad_train<T: Element>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let n = (s.b * s.h * s.w) as f64;
    let xd = x.data();
    let yd = dy.data();
    let plane = s.h * s.w;
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            let inv = 1.0 / (var.data()[c].as_f64() + eps).sqrt();
            let mu = mean.data()[c].as_f64();
            let base = s.idx(b, c, 0, 0);
            for j in 0..plane {
                let xhat = (xd[base + j].as_f64() - mu) * inv;
                let g = yd[base + j].as_f64();
                dgamma[c] += g * xhat;
                dbeta[c] += g;
            }
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(bc, dxp)| {
        let c = bc % s.c;
        let inv = 1.0 / (var.data()[c].as_f64() + eps).sqrt();
        let mu = mean.data()[c].as_f64();
        let ga = gamma.data()[c].as_f64();
        let mg = dgamma[c] / n;
        let mb = dbeta[c] / n;
        let base = bc * plane;
        for (j, o) in dxp.iter_mut().enumerate() {
            let xhat = (xd[base + j].as_f64() - mu) * inv;
            let g = yd[base + j].as_f64();
            *o = T::from_f64(ga * inv * (g - mb - xhat * mg));
        }
    });
    let cshape = Shape::new(1, s.c, 1, 1);
    (
        Tensor::from_vec(s, dx).unwrap(),
        Tensor::from_vec(cshape, dgamma.into_iter().map(T::from_f64).collect()).unwrap(),
        Tensor::from_vec(cshape, dbeta.into_iter().map(T::from_f64).collect()).unwrap(),
    )
}

/// Backward for eval-mode batch norm (stats are constants).
pub fn bn_grad_eval<T: Element>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let xd = x.data();
    let yd = dy.data();
    let plane = s.h * s.w;
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    let mut dx = vec![T::zero(); s.numel()];
    for b in 0..s.b {
        for c in 0..s.c {
            let inv = 1.0 / (var.data()[c].as_f64() + eps).sqrt();
            let mu = mean.data()[c].as_f64();
            let ga = gamma.data()[c].as_f64();
            let base = s.idx(b, c, 0, 0);
            for j in 0..plane {
                let g = yd[base + j].as_f64();
                dgamma[c] += g * (xd[base + j].as_f64() - mu) * inv;
                dbeta[c] += g;
                dx[base + j] = T::from_f64(g * ga * inv);
            }
        }
    }
    let cshape = Shape::new(1, s.c, 1, 1);
    (
        Tensor::from_vec(s, dx).unwrap(),
        Tensor::from_vec(cshape, dgamma.into_iter().map(T::from_f64).collect()).unwrap(),
        Tensor::from_vec(cshape, dbeta.into_iter().map(T::from_f64).collect()).unwrap(),
    )
}

/// Group norm forward. Normalizes each (C/groups, H, W) slice per sample.
/// Returns (y, per-slice mean, per-slice var) with stats of shape (B, groups, 1, 1).
pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("groups {} must divide channels {}", groups, s.c),
        ));
    }
    check_channel_vec("group_norm", "gamma", gamma.shape(), s.c)?;
    check_channel_vec("group_norm", "beta", beta.shape(), s.c)?;
    let cg = s.c / groups;
    let slice = cg * s.h * s.w;
    let xd = x.data();
    let mut mean = vec![0.0f64; s.b * groups];
    let mut var = vec![0.0f64; s.b * groups];
    for b in 0..s.b {
        for g in 0..groups {
            let base = s.idx(b, g * cg, 0, 0);
            let mut m = 0.0;
            for v in &xd[base..base + slice] {
                m += v.as_f64();
            }
            m /= slice as f64;
            let mut vv = 0.0;
            for v in &xd[base..base + slice] {
                let d = v.as_f64() - m;
                vv += d * d;
            }
            mean[b * groups + g] = m;
            var[b * groups + g] = vv / slice as f64;
        }
    }
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.h * s.w;
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
        let b = bc / s.c;
        let c = bc % s.c;
        let g = c / cg;
        let inv = 1.0 / (var[b * groups + g] + eps).sqrt();
        let mu = mean[b * groups + g];
        let ga = gamma.data()[c].as_f64();
        let be = beta.data()[c].as_f64();
        let base = bc * plane;
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = T::from_f64((xd[base + j].as_f64() - mu) * inv * ga + be);
        }
    });
    let stat_shape = Shape::new(s.b, groups, 1, 1);
    Ok((
        Tensor::from_vec(s, out)?,
        Tensor::from_vec(stat_shape, mean.into_iter().map(T::from_f64).collect())?,
        Tensor::from_vec(stat_shape, var.into_iter().map(T::from_f64).collect())?,
    ))
}

/// Backward for group norm. Returns (dx, dgamma, dbeta).
pub fn group_norm_grad<T: Element>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let cg = s.c / groups;
    let slice = (cg * s.h * s.w) as f64;
    let plane = s.h * s.w;
    let xd = x.data();
    let yd = dy.data();
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    let mut dx = vec![T::zero(); s.numel()];
    for b in 0..s.b {
        for g in 0..groups {
            let mu = mean.at(b, g, 0, 0).as_f64();
            let inv = 1.0 / (var.at(b, g, 0, 0).as_f64() + eps).sqrt();
            // t = gamma*dy is the upstream through the affine; slice means of t
            // and t*xhat drive the normalization backward.
            let mut sum_t = 0.0;
            let mut sum_tx = 0.0;
            for cl in 0..cg {
                let c = g * cg + cl;
                let ga = gamma.data()[c].as_f64();
                let base = s.idx(b, c, 0, 0);
                for j in 0..plane {
                    let xhat = (xd[base + j].as_f64() - mu) * inv;
                    let gy = yd[base + j].as_f64();
                    dgamma[c] += gy * xhat;
                    dbeta[c] += gy;
                    let t = ga * gy;
                    sum_t += t;
                    sum_tx += t * xhat;
                }
            }
            let mt = sum_t / slice;
            let mtx = sum_tx / slice;
            for cl in 0..cg {
                let c = g * cg + cl;
                let ga = gamma.data()[c].as_f64();
                let base = s.idx(b, c, 0, 0);
                for j in 0..plane {
                    let xhat = (xd[base + j].as_f64() - mu) * inv;
                    let t = ga * yd[base + j].as_f64();
                    dx[base + j] = T::from_f64(inv * (t - mt - xhat * mtx));
                }
            }
        }
    }
    let cshape = Shape::new(1, s.c, 1, 1);
    (
        Tensor::from_vec(s, dx).unwrap(),
        Tensor::from_vec(cshape, dgamma.into_iter().map(T::from_f64).collect()).unwrap(),
        Tensor::from_vec(cshape, dbeta.into_iter().map(T::from_f64).collect()).unwrap(),
    )
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Subgradient of relu at 0 is 0.
pub fn relu_grad<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |xv, g| if xv > T::zero() { g } else { T::zero() })
}

pub fn relu6<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

/// Subgradient 1 strictly inside (0, 6); 0 at and outside the boundaries.
pub fn relu6_grad<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    zip_map(x, dy, |xv, g| if xv > T::zero() && xv < six { g } else { T::zero() })
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_grad<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |yv, g| g * yv * (T::one() - yv))
}

pub fn silu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn silu_grad<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |xv, g| {
        let s = sigmoid_scalar(xv);
        g * s * (T::one() + xv * (T::one() - s))
    })
}

pub fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

pub fn check_same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("operand shapes {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// y = a*x + b with scalar constants.
pub fn affine<T: Element>(x: &Tensor<T>, a: f64, b: f64) -> Tensor<T> {
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    x.map(|v| a * v + b)
}

/// x * g with g of shape (B, C, 1, 1), broadcast over H, W.
pub fn scale_channels<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if g.shape() != Shape::new(s.b, s.c, 1, 1) {
        return Err(Error::shape(
            "scale_channels",
            format!("gate shape {} != {}x{}x1x1", g.shape(), s.b, s.c),
        ));
    }
    let xd = x.data();
    let gd = g.data();
    let plane = s.h * s.w;
    let mut out = vec![T::zero(); s.numel()];
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
        let gv = gd[bc];
        let base = bc * plane;
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = gv * xd[base + j];
        }
    });
    Tensor::from_vec(s, out)
}

/// Backward of scale_channels: (dx, dg).
pub fn scale_channels_grad<T: Element>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let plane = s.h * s.w;
    let dx = {
        let mut dx = vec![T::zero(); s.numel()];
        dx.par_chunks_mut(plane).enumerate().for_each(|(bc, o)| {
            let gv = g.data()[bc];
            let base = bc * plane;
            for (j, ov) in o.iter_mut().enumerate() {
                *ov = gv * dy.data()[base + j];
            }
        });
        Tensor::from_vec(s, dx).unwrap()
    };
    let mut dg = vec![T::zero(); s.b * s.c];
    for (bc, dgv) in dg.iter_mut().enumerate() {
        let base = bc * plane;
        let mut acc = T::zero();
        for j in 0..plane {
            acc = acc + dy.data()[base + j] * x.data()[base + j];
        }
        *dgv = acc;
    }
    (dx, Tensor::from_vec(Shape::new(s.b, s.c, 1, 1), dg).unwrap())
}

pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat_channels", "no inputs"));
    }
    let first = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.b != first.b || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("incompatible shapes {} vs {}", s, first),
            ));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.b, c_total, first.h, first.w);
    let plane = first.h * first.w;
    let mut out = Vec::with_capacity(out_shape.numel());
    for b in 0..first.b {
        for p in parts {
            let s = p.shape();
            let base = s.idx(b, 0, 0, 0);
            out.extend_from_slice(&p.data()[base..base + s.c * plane]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Channels [from, to) of x.
pub fn slice_channels<T: Element>(x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if from >= to || to > s.c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {from}..{to} out of bounds for {} channels", s.c),
        ));
    }
    let plane = s.h * s.w;
    let out_shape = Shape::new(s.b, to - from, s.h, s.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for b in 0..s.b {
        let base = s.idx(b, from, 0, 0);
        out.extend_from_slice(&x.data()[base..base + (to - from) * plane]);
    }
    Tensor::from_vec(out_shape, out)
}

/// Scatter dy (B, c_slice, H, W) back into a zero tensor of shape `full`,
/// at channel offset `from`. Backward of slice_channels.
pub fn slice_channels_grad<T: Element>(dy: &Tensor<T>, full: Shape, from: usize) -> Tensor<T> {
    let s = dy.shape();
    let plane = s.h * s.w;
    let mut out = vec![T::zero(); full.numel()];
    for b in 0..s.b {
        let src = s.idx(b, 0, 0, 0);
        let dst = full.idx(b, from, 0, 0);
        out[dst..dst + s.c * plane].copy_from_slice(&dy.data()[src..src + s.c * plane]);
    }
    Tensor::from_vec(full, out).unwrap()
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.h * s.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut out = vec![T::zero(); s.b * s.c];
    for (bc, o) in out.iter_mut().enumerate() {
        let base = bc * plane;
        let mut acc = T::zero();
        for v in &x.data()[base..base + plane] {
            acc = acc + *v;
        }
        *o = acc * inv;
    }
    Tensor::from_vec(Shape::new(s.b, s.c, 1, 1), out).unwrap()
}

pub fn global_avg_pool_grad<T: Element>(dy: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let plane = x_shape.h * x_shape.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut dx = vec![T::zero(); x_shape.numel()];
    for bc in 0..x_shape.b * x_shape.c {
        let g = dy.data()[bc] * inv;
        for v in &mut dx[bc * plane..(bc + 1) * plane] {
            *v = g;
        }
    }
    Tensor::from_vec(x_shape, dx).unwrap()
}

/// Zero-pad on the right/bottom only.
pub fn pad_right_bottom<T: Element>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.b, s.c, s.h + pad_h, s.w + pad_w);
    let mut out = vec![T::zero(); out_shape.numel()];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                let src = s.idx(b, c, y, 0);
                let dst = out_shape.idx(b, c, y, 0);
                out[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Keep the top-left (h, w) window: inverse of pad_right_bottom.
pub fn crop_to<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    debug_assert!(h <= s.h && w <= s.w);
    let out_shape = Shape::new(s.b, s.c, h, w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..h {
                let src = s.idx(b, c, y, 0);
                out.extend_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Cell picks for gathering loss targets: (batch, y, x) per row.
pub type CellPick = (usize, usize, usize);

/// Gather all channels at the picked cells: output (N, C, 1, 1).
pub fn gather_cells<T: Element>(x: &Tensor<T>, picks: &[CellPick]) -> Result<Tensor<T>> {
    let s = x.shape();
    for &(b, y, xx) in picks {
        if b >= s.b || y >= s.h || xx >= s.w {
            return Err(Error::shape(
                "gather_cells",
                format!("pick ({b},{y},{xx}) out of bounds for {s}"),
            ));
        }
    }
    let mut out = Vec::with_capacity(picks.len() * s.c);
    for &(b, y, xx) in picks {
        for c in 0..s.c {
            out.push(x.at(b, c, y, xx));
        }
    }
    Tensor::from_vec(Shape::new(picks.len(), s.c, 1, 1), out)
}

pub fn gather_cells_grad<T: Element>(dy: &Tensor<T>, x_shape: Shape, picks: &[CellPick]) -> Tensor<T> {
    let mut dx = vec![T::zero(); x_shape.numel()];
    for (n, &(b, y, xx)) in picks.iter().enumerate() {
        for c in 0..x_shape.c {
            let i = x_shape.idx(b, c, y, xx);
            dx[i] = dx[i] + dy.at(n, c, 0, 0);
        }
    }
    Tensor::from_vec(x_shape, dx).unwrap()
}

pub fn sum_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    Tensor::scalar(acc)
}

/// Elementwise binary cross-entropy with logits:
/// bce(x, t) = max(x, 0) - x*t + ln(1 + exp(-|x|)).
pub fn bce_with_logits<T: Element>(x: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("bce_with_logits", x, t)?;
    Ok(zip_map(x, t, |xv, tv| {
        xv.max(T::zero()) - xv * tv + (T::one() + (-xv.abs()).exp()).ln()
    }))
}

/// d bce / d x = sigmoid(x) - t.
pub fn bce_with_logits_grad<T: Element>(x: &Tensor<T>, t: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = zip_map(x, t, |xv, tv| sigmoid_scalar(xv) - tv);
    zip_map(&d, dy, |a, g| a * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = SeedTree::new(seed).split("ops-test").rng();
        let data = (0..shape.numel()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct six-nested-loop convolution, written from the definition and
    /// kept independent of the production kernel.
    fn conv2d_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        m: &Conv2dMeta,
    ) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let ho = conv2d_out_len(xs.h, ws.h, m.stride, m.pad, m.dilation).unwrap();
        let wo = conv2d_out_len(xs.w, ws.w, m.stride, m.pad, m.dilation).unwrap();
        let cin_g = xs.c / m.groups;
        let cout_g = ws.b / m.groups;
        let mut out = Tensor::zeros(Shape::new(xs.b, ws.b, ho, wo));
        let od = out.data_mut();
        let os = Shape::new(xs.b, ws.b, ho, wo);
        for b in 0..xs.b {
            for co in 0..ws.b {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias.map(|t| t.data()[co]).unwrap_or(0.0);
                        for cil in 0..cin_g {
                            let ci = (co / cout_g) * cin_g + cil;
                            for ki in 0..ws.h {
                                for kj in 0..ws.w {
                                    let sy = (i * m.stride + ki * m.dilation) as isize - m.pad as isize;
                                    let sx = (j * m.stride + kj * m.dilation) as isize - m.pad as isize;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < xs.h && (sx as usize) < xs.w {
                                        acc += x.at(b, ci, sy as usize, sx as usize)
                                            * w.at(co, cil, ki, kj);
                                    }
                                }
                            }
                        }
                        od[os.idx(b, co, i, j)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_constant_input_sums_kernel() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let w = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 0.5);
        let y = conv2d(&x, &w, None, &Conv2dMeta::stride(2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 2.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rand_tensor(Shape::new(2, 3, 5, 4), 1);
        let mut w = Tensor::<f64>::zeros(Shape::new(3, 3, 1, 1));
        let ws = w.shape();
        for c in 0..3 {
            w.data_mut()[ws.idx(c, c, 0, 0)] = 1.0;
        }
        let y = conv2d(&x, &w, None, &Conv2dMeta::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_reference_with_dilation() {
        let x = rand_tensor(Shape::new(2, 3, 5, 5), 2);
        let w = rand_tensor(Shape::new(4, 3, 3, 3), 3);
        let bias = rand_tensor(Shape::new(1, 4, 1, 1), 4);
        let m = Conv2dMeta { stride: 1, pad: 2, dilation: 2, groups: 1 };
        let got = conv2d(&x, &w, Some(&bias), &m).unwrap();
        let want = conv2d_reference(&x, &w, Some(&bias), &m);
        assert!(got.max_rel_diff(&want) < 1e-12, "diff {}", got.max_rel_diff(&want));
    }

    #[test]
    fn conv_matches_reference_strided_grouped() {
        for (seed, m) in [
            (10, Conv2dMeta { stride: 2, pad: 1, dilation: 1, groups: 1 }),
            (11, Conv2dMeta { stride: 1, pad: 0, dilation: 1, groups: 2 }),
            (12, Conv2dMeta { stride: 2, pad: 1, dilation: 1, groups: 4 }),
            (13, Conv2dMeta { stride: 3, pad: 2, dilation: 2, groups: 1 }),
        ] {
            let x = rand_tensor(Shape::new(2, 4, 7, 6), seed);
            let w = rand_tensor(Shape::new(4, 4 / m.groups, 3, 3), seed + 100);
            let got = conv2d(&x, &w, None, &m).unwrap();
            let want = conv2d_reference(&x, &w, None, &m);
            assert!(got.max_rel_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_linearity() {
        let w = rand_tensor(Shape::new(3, 2, 3, 3), 20);
        let x = rand_tensor(Shape::new(1, 2, 6, 6), 21);
        let y = rand_tensor(Shape::new(1, 2, 6, 6), 22);
        let m = Conv2dMeta { stride: 1, pad: 1, dilation: 1, groups: 1 };
        let (a, b) = (0.7, -1.3);
        let lhs_in = zip_map(&x.map(|v| a * v), &y.map(|v| b * v), |p, q| p + q);
        let lhs = conv2d(&lhs_in, &w, None, &m).unwrap();
        let cx = conv2d(&x, &w, None, &m).unwrap();
        let cy = conv2d(&y, &w, None, &m).unwrap();
        let rhs = zip_map(&cx.map(|v| a * v), &cy.map(|v| b * v), |p, q| p + q);
        assert!(lhs.max_rel_diff(&rhs) < 1e-6);
    }

    #[test]
    fn conv_rejects_bad_args() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f64>::zeros(Shape::new(2, 3, 3, 3));
        assert!(conv2d(&x, &w, None, &Conv2dMeta { stride: 0, ..Default::default() }).is_err());
        assert!(conv2d(&x, &w, None, &Conv2dMeta { groups: 2, ..Default::default() }).is_err());
        let w_bad = Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3));
        assert!(conv2d(&x, &w_bad, None, &Conv2dMeta::default()).is_err());
    }

    #[test]
    fn conv_transpose_stamps_kernel() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0);
        let w = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 0.5);
        let y = conv_transpose2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_transpose_zero_in_zero_out() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 4, 3, 3));
        let w = rand_tensor(Shape::new(4, 2, 2, 2), 30);
        let y = conv_transpose2d(&x, &w, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> for matching stride.
    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        for (seed, stride, k, groups) in [(40, 2, 2, 1), (41, 1, 3, 1), (42, 2, 3, 2), (43, 3, 2, 2)] {
            let x = rand_tensor(Shape::new(1, 2, 4, 4), seed);
            let m = Conv2dMeta { stride, pad: 0, dilation: 1, groups };
            let w = rand_tensor(Shape::new(2, 2 / groups, k, k), seed + 1);
            let fx = conv2d(&x, &w, None, &m).unwrap();
            let y = rand_tensor(fx.shape(), seed + 2);
            let lhs: f64 = fx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let aty = conv_transpose2d(&y, &w, stride, groups).unwrap();
            // conv weight (C_out, C_in/g, k, k) read as transpose weight
            // (C_in', C_out'/g, k, k) with C_in' = C_out: same buffer.
            // Trailing rows/cols of x that receive no conv tap correspond to
            // zero (or absent) transpose outputs, so align sizes first.
            let (xh, xw) = (x.shape().h, x.shape().w);
            let aligned = if aty.shape().h >= xh && aty.shape().w >= xw {
                crop_to(&aty, xh, xw)
            } else {
                pad_right_bottom(&aty, xh - aty.shape().h, xw - aty.shape().w)
            };
            let rhs: f64 = x.data().iter().zip(aligned.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1.0),
                "adjoint mismatch: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_grad_input_matches_transpose_scatter() {
        let x = rand_tensor(Shape::new(2, 3, 6, 6), 50);
        let w = rand_tensor(Shape::new(4, 3, 3, 3), 51);
        let m = Conv2dMeta { stride: 2, pad: 1, dilation: 1, groups: 1 };
        let y = conv2d(&x, &w, None, &m).unwrap();
        let dy = rand_tensor(y.shape(), 52);
        let dx = conv2d_grad_input(&dy, &w, x.shape(), &m);
        // numeric check of <dx, v> == <dy, conv(v)> for random v (linearity)
        let v = rand_tensor(x.shape(), 53);
        let cv = conv2d(&v, &w, None, &m).unwrap();
        let lhs: f64 = dx.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = dy.data().iter().zip(cv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn bn_eval_identity_stats_passthrough() {
        let x = rand_tensor(Shape::new(2, 3, 4, 4), 60);
        let c = Shape::new(1, 3, 1, 1);
        let y = bn_apply(
            &x,
            &Tensor::zeros(c),
            &Tensor::full(c, 1.0),
            &Tensor::full(c, 1.0),
            &Tensor::zeros(c),
            0.0,
        )
        .unwrap();
        assert!(y.max_rel_diff(&x) < 1e-12);
    }

    #[test]
    fn bn_train_normalizes() {
        let x = rand_tensor(Shape::new(4, 3, 5, 5), 61);
        let (mean, var) = bn_stats(&x);
        let c = Shape::new(1, 3, 1, 1);
        let y = bn_apply(&x, &mean, &var, &Tensor::full(c, 1.0), &Tensor::zeros(c), 1e-5).unwrap();
        let (ymean, yvar) = bn_stats(&y);
        for ch in 0..3 {
            assert!(ymean.data()[ch].abs() < 1e-5);
            assert!((yvar.data()[ch] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bn_zero_variance_channel_is_safe() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 3, 3), 5.0);
        let (mean, var) = bn_stats(&x);
        let c = Shape::new(1, 1, 1, 1);
        let y = bn_apply(&x, &mean, &var, &Tensor::full(c, 1.0), &Tensor::zeros(c), 1e-5).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn group_norm_degenerate_slice_yields_beta() {
        // num_groups = C with H = W = 1: every slice is one element, so the
        // normalized value is 0 and the output is beta.
        let x = rand_tensor(Shape::new(2, 4, 1, 1), 62);
        let c = Shape::new(1, 4, 1, 1);
        let beta = rand_tensor(c, 63);
        let (y, _, _) = group_norm(&x, 4, &Tensor::full(c, 1.0), &beta, 1e-5).unwrap();
        for b in 0..2 {
            for ch in 0..4 {
                assert!((y.at(b, ch, 0, 0) - beta.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_is_per_sample() {
        let x = rand_tensor(Shape::new(2, 4, 3, 3), 64);
        let c = Shape::new(1, 4, 1, 1);
        let gamma = rand_tensor(c, 65);
        let beta = rand_tensor(c, 66);
        let (y_ab, _, _) = group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap();
        // Duplicate sample 0 into a batch of 3; its output must not change.
        let mut data = x.data()[..4 * 9].to_vec();
        data.extend_from_slice(x.data());
        let x3 = Tensor::from_vec(Shape::new(3, 4, 3, 3), data).unwrap();
        let (y3, _, _) = group_norm(&x3, 2, &gamma, &beta, 1e-5).unwrap();
        assert_eq!(&y3.data()[..4 * 9], &y_ab.data()[..4 * 9]);
        assert_eq!(&y3.data()[4 * 9..8 * 9], &y_ab.data()[..4 * 9]);
    }

    #[test]
    fn relu6_clamps() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 1, 3),
            vec![-1.0, 3.0, 9.0],
        )
        .unwrap();
        let y = relu6(&x);
        assert_eq!(y.data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn relu6_identity_inside_range() {
        let x = rand_tensor(Shape::new(1, 2, 3, 3), 70).map(|v| v.abs() * 5.0 + 0.1);
        let y = relu6(&x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = rand_tensor(Shape::new(2, 2, 3, 3), 80);
        let b = rand_tensor(Shape::new(2, 3, 3, 3), 81);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 5);
        assert_eq!(slice_channels(&cat, 0, 2).unwrap().data(), a.data());
        assert_eq!(slice_channels(&cat, 2, 5).unwrap().data(), b.data());
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 5), 2.5);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = rand_tensor(Shape::new(2, 3, 4, 4), 90);
        let picks = vec![(0, 1, 2), (1, 3, 0), (0, 1, 2)];
        let g = gather_cells(&x, &picks).unwrap();
        assert_eq!(g.shape(), Shape::new(3, 3, 1, 1));
        assert_eq!(g.at(0, 2, 0, 0), x.at(0, 2, 1, 2));
        let dx = gather_cells_grad(&g, x.shape(), &picks);
        // the duplicated pick accumulates twice
        assert!((dx.at(0, 0, 1, 2) - 2.0 * x.at(0, 0, 1, 2)).abs() < 1e-12);
        assert!((dx.at(1, 1, 3, 0) - x.at(1, 1, 3, 0)).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_naive_formula() {
        let x = rand_tensor(Shape::new(1, 1, 2, 4), 91).map(|v| v * 8.0);
        let t = rand_tensor(Shape::new(1, 1, 2, 4), 92).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let got = bce_with_logits(&x, &t).unwrap();
        for i in 0..x.numel() {
            let (xv, tv) = (x.data()[i], t.data()[i]);
            let p = 1.0 / (1.0 + (-xv).exp());
            let want = -(tv * p.ln() + (1.0 - tv) * (1.0 - p).ln());
            assert!((got.data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x = rand_tensor(Shape::new(1, 2, 3, 5), 93);
        let p = pad_right_bottom(&x, 1, 1);
        assert_eq!(p.shape(), Shape::new(1, 2, 4, 6));
        assert_eq!(crop_to(&p, 3, 5).data(), x.data());
        assert_eq!(p.at(0, 0, 3, 0), 0.0);
        assert_eq!(p.at(0, 1, 0, 5), 0.0);
    }
}
