//! Dense 4-D tensors and the layer primitives the model is built from.
//!
//! Every operation is a pure function with a fixed accumulation order per
//! output element, so results are bit-identical across runs and across
//! thread counts. Parallelism only ever splits work across disjoint output
//! planes.

use rayon::prelude::*;

use crate::{Error, Result};

/// Dense (batch, channel, height, width) tensor, row-major f64 storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be >= 1, got {}x{}x{}x{}",
                n, c, h, w
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        })
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be >= 1, got {}x{}x{}x{}",
                n, c, h, w
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous h*w slice for one (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let base = (n * self.c + c) * self.h * self.w;
        &self.data[base..base + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let base = (n * self.c + c) * self.h * self.w;
        let hw = self.h * self.w;
        &mut self.data[base..base + hw]
    }

    /// Ordered sum over all elements.
    pub fn sum(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.data {
            s += v;
        }
        s
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Convolution hyper-parameters shared by `conv2d` and `deconv2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvSpec {
    /// Stride-1 spec with same-padding for an odd square kernel.
    pub fn same(k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::same_dilated(k, 1, in_ch, out_ch)
    }

    /// Stride-1 same-padding spec with dilation (pad = d*(k-1)/2, k odd).
    pub fn same_dilated(k: usize, d: usize, in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            kernel: (k, k),
            stride: (1, 1),
            padding: (d * (k - 1) / 2, d * (k - 1) / 2),
            dilation: (d, d),
            in_ch,
            out_ch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (dh, dw) = self.dilation;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || dh == 0 || dw == 0 {
            return Err(Error::Config(format!(
                "kernel/stride/dilation must be >= 1: {:?}",
                self
            )));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial size of the forward convolution; the division must be
    /// exact and positive.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |x: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            let span = (x + 2 * p) as isize - (d * (k - 1) + 1) as isize;
            if span < 0 || span as usize % s != 0 {
                return Err(Error::Shape(format!(
                    "conv output size not a positive integer: input {}, kernel {}, stride {}, pad {}, dilation {}",
                    x, k, s, p, d
                )));
            }
            Ok(span as usize / s + 1)
        };
        Ok((
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    /// Spatial size produced by the transposed convolution for an input that
    /// has the forward-output size (h, w).
    pub fn deconv_out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |x: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            let v = ((x - 1) * s + d * (k - 1) + 1) as isize - 2 * p as isize;
            if v < 1 {
                return Err(Error::Shape(format!(
                    "deconv output size not positive: input {}, kernel {}, stride {}, pad {}, dilation {}",
                    x, k, s, p, d
                )));
            }
            Ok(v as usize)
        };
        Ok((
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

fn check_conv_args(x: &Tensor4, w: &Tensor4, b: &[f64], spec: &ConvSpec) -> Result<()> {
    if x.c != spec.in_ch {
        return Err(Error::Shape(format!(
            "conv input channels {} != spec.in_ch {}",
            x.c, spec.in_ch
        )));
    }
    if w.shape() != (spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1) {
        return Err(Error::Shape(format!(
            "conv weights {:?} != expected ({}, {}, {}, {})",
            w.shape(),
            spec.out_ch,
            spec.in_ch,
            spec.kernel.0,
            spec.kernel.1
        )));
    }
    if b.len() != spec.out_ch {
        return Err(Error::Shape(format!(
            "conv bias length {} != out_ch {}",
            b.len(),
            spec.out_ch
        )));
    }
    Ok(())
}

/// Loop bounds such that `o*stride + tap - pad` stays inside `[0, extent)`.
#[inline]
fn valid_range(o_len: usize, extent: usize, stride: usize, tap: isize, pad: usize) -> (usize, usize) {
    let off = tap - pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        (((-off) as usize) + stride - 1) / stride
    };
    let hi_num = extent as isize - 1 - off;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / stride + 1).min(o_len)
    };
    (lo.min(hi), hi)
}

/// Cross-correlation with stride, padding, and dilation.
///
/// Accumulation order per output element is bias, then (in-channel,
/// kernel-row, kernel-col), fixed regardless of thread count.
pub fn conv2d(x: &Tensor4, w: &Tensor4, b: &[f64], spec: &ConvSpec) -> Result<Tensor4> {
    check_conv_args(x, w, b, spec)?;
    let (oh, ow) = spec.out_size(x.h, x.w)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let (xh, xw) = (x.h, x.w);
    let out_ch = spec.out_ch;
    let mut out = Tensor4::zeros(x.n, out_ch, oh, ow)?;
    out.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(pi, plane)| {
            let n = pi / out_ch;
            let oc = pi % out_ch;
            plane.fill(b[oc]);
            for ic in 0..spec.in_ch {
                let xplane = x.plane(n, ic);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, xh, sh, (ky * dh) as isize, ph);
                    for kx in 0..kw {
                        let wv = w.get(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = valid_range(ow, xw, sw, (kx * dw) as isize, pw);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            let xrow = &xplane[iy as usize * xw..iy as usize * xw + xw];
                            let orow = &mut plane[oy * ow..oy * ow + ow];
                            let xoff = (kx * dw) as isize - pw as isize;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * sw) as isize + xoff;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Adjoint of the forward convolution map: scatters `g` (shaped like a conv
/// output) back to an input-shaped tensor of extent (xh, xw). Optionally
/// seeds each output channel plane with a bias.
fn conv_adjoint(
    g: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    xh: usize,
    xw: usize,
    bias: Option<&[f64]>,
) -> Result<Tensor4> {
    if g.c != spec.out_ch {
        return Err(Error::Shape(format!(
            "adjoint input channels {} != spec.out_ch {}",
            g.c, spec.out_ch
        )));
    }
    if w.shape() != (spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1) {
        return Err(Error::Shape(format!("adjoint weights {:?}", w.shape())));
    }
    let (oh, ow) = (g.h, g.w);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let in_ch = spec.in_ch;
    let mut out = Tensor4::zeros(g.n, in_ch, xh, xw)?;
    out.data
        .par_chunks_mut(xh * xw)
        .enumerate()
        .for_each(|(pi, plane)| {
            let n = pi / in_ch;
            let ic = pi % in_ch;
            if let Some(b) = bias {
                plane.fill(b[ic]);
            }
            for oc in 0..spec.out_ch {
                let gplane = g.plane(n, oc);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, xh, sh, (ky * dh) as isize, ph);
                    for kx in 0..kw {
                        let wv = w.get(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = valid_range(ow, xw, sw, (kx * dw) as isize, pw);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * sh + ky * dh) as isize - ph as isize) as usize;
                            let grow = &gplane[oy * ow..oy * ow + ow];
                            let xrow = &mut plane[iy * xw..iy * xw + xw];
                            let xoff = (kx * dw) as isize - pw as isize;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * sw) as isize + xoff) as usize;
                                xrow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Weight gradient shared by conv (x = input, g = grad_out) and deconv
/// (roles swapped).
fn conv_grad_w(x: &Tensor4, g: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let (oh, ow) = (g.h, g.w);
    let (xh, xw) = (x.h, x.w);
    let in_ch = spec.in_ch;
    let mut gw = Tensor4::zeros(spec.out_ch, in_ch, kh, kw)?;
    gw.data
        .par_chunks_mut(in_ch * kh * kw)
        .enumerate()
        .for_each(|(oc, slab)| {
            for ic in 0..in_ch {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, xh, sh, (ky * dh) as isize, ph);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(ow, xw, sw, (kx * dw) as isize, pw);
                        let mut acc = 0.0;
                        for n in 0..x.n {
                            let gplane = g.plane(n, oc);
                            let xplane = x.plane(n, ic);
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * sh + ky * dh) as isize - ph as isize) as usize;
                                let grow = &gplane[oy * ow..oy * ow + ow];
                                let xrow = &xplane[iy * xw..iy * xw + xw];
                                let xoff = (kx * dw) as isize - pw as isize;
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * sw) as isize + xoff) as usize;
                                    acc += grow[ox] * xrow[ix];
                                }
                            }
                        }
                        slab[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
    Ok(gw)
}

fn channel_sums(g: &Tensor4) -> Vec<f64> {
    let mut out = vec![0.0; g.c];
    for n in 0..g.n {
        for c in 0..g.c {
            let mut s = 0.0;
            for &v in g.plane(n, c) {
                s += v;
            }
            out[c] += s;
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let (oh, ow) = spec.out_size(x.h, x.w)?;
    if grad_out.shape() != (x.n, spec.out_ch, oh, ow) {
        return Err(Error::Shape(format!(
            "conv grad_out {:?} != expected ({}, {}, {}, {})",
            grad_out.shape(),
            x.n,
            spec.out_ch,
            oh,
            ow
        )));
    }
    let gx = conv_adjoint(grad_out, w, spec, x.h, x.w, None)?;
    let gw = conv_grad_w(x, grad_out, spec)?;
    let gb = channel_sums(grad_out);
    Ok((gx, gw, gb))
}

/// Transposed convolution: the exact adjoint of `conv2d` for the same spec,
/// plus a bias on the result channels.
///
/// Input has `spec.out_ch` channels, output has `spec.in_ch`. For the specs
/// used inside the trellis (stride 1, same-padding) the spatial size is
/// preserved.
pub fn deconv2d(x: &Tensor4, w: &Tensor4, b: &[f64], spec: &ConvSpec) -> Result<Tensor4> {
    if b.len() != spec.in_ch {
        return Err(Error::Shape(format!(
            "deconv bias length {} != in_ch {}",
            b.len(),
            spec.in_ch
        )));
    }
    let (ih, iw) = spec.deconv_out_size(x.h, x.w)?;
    conv_adjoint(x, w, spec, ih, iw, Some(b))
}

/// Gradients of `deconv2d` w.r.t. input, weights, and bias.
pub fn deconv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let (ih, iw) = spec.deconv_out_size(x.h, x.w)?;
    if grad_out.shape() != (x.n, spec.in_ch, ih, iw) {
        return Err(Error::Shape(format!(
            "deconv grad_out {:?} != expected ({}, {}, {}, {})",
            grad_out.shape(),
            x.n,
            spec.in_ch,
            ih,
            iw
        )));
    }
    let zero_bias = vec![0.0; spec.out_ch];
    let gx = conv2d(grad_out, w, &zero_bias, spec)?;
    let gw = conv_grad_w(grad_out, x, spec)?;
    let gb = channel_sums(grad_out);
    Ok((gx, gw, gb))
}

/// 2x2 stride-2 max pooling. Returns the pooled map and the flat index of
/// each window winner (first maximum in row-major scan wins ties).
pub fn maxpool2(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 requires even spatial dims, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow)?;
    let mut idx = vec![0usize; out.len()];
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = x.idx(n, c, oy * 2 + dy, ox * 2 + dx);
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = out.idx(n, c, oy, ox);
                    out.data[o] = best;
                    idx[o] = best_i;
                }
            }
        }
    }
    Ok((out, idx))
}

/// Routes gradients back to the argmax winners recorded by `maxpool2`.
pub fn maxpool2_backward(
    grad_out: &Tensor4,
    idx: &[usize],
    in_shape: (usize, usize, usize, usize),
) -> Result<Tensor4> {
    if grad_out.len() != idx.len() {
        return Err(Error::Shape(format!(
            "maxpool backward: grad len {} != idx len {}",
            grad_out.len(),
            idx.len()
        )));
    }
    let mut gx = Tensor4::zeros(in_shape.0, in_shape.1, in_shape.2, in_shape.3)?;
    for (g, &i) in grad_out.data.iter().zip(idx) {
        gx.data[i] += *g;
    }
    Ok(gx)
}

/// Average pooling with window k, stride k.
pub fn avgpool(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 {
        return Err(Error::Config("avgpool window must be >= 1".into()));
    }
    if x.h % k != 0 || x.w % k != 0 {
        return Err(Error::Shape(format!(
            "avgpool window {} does not divide {}x{}",
            k, x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / k, x.w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow)?;
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += x.get(n, c, oy * k + dy, ox * k + dx);
                        }
                    }
                    out.set(n, c, oy, ox, s * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `avgpool`: spreads each gradient uniformly over its window.
pub fn avgpool_backward(grad_out: &Tensor4, k: usize) -> Result<Tensor4> {
    let (n, c, oh, ow) = grad_out.shape();
    let inv = 1.0 / (k * k) as f64;
    let mut gx = Tensor4::zeros(n, c, oh * k, ow * k)?;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.get(ni, ci, oy, ox) * inv;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = gx.idx(ni, ci, oy * k + dy, ox * k + dx);
                            gx.data[i] = g;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbor up-sampling: each pixel replicated factor x factor.
pub fn upsample_nearest(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4::zeros(n, c, h * factor, w * factor)?;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = x.get(ni, ci, y, x_);
                    for dy in 0..factor {
                        for dx in 0..factor {
                            out.set(ni, ci, y * factor + dy, x_ * factor + dx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `upsample_nearest`: sums gradients over each replicated block.
pub fn upsample_nearest_backward(grad_out: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (n, c, oh, ow) = grad_out.shape();
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!(
            "upsample backward: {}x{} not divisible by {}",
            oh, ow, factor
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = Tensor4::zeros(n, c, h, w)?;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += grad_out.get(ni, ci, y * factor + dy, x_ * factor + dx);
                        }
                    }
                    gx.set(ni, ci, y, x_, s);
                }
            }
        }
    }
    Ok(gx)
}

/// Channel concatenation of arbitrarily many tensors, left first.
pub fn concat_many(xs: &[&Tensor4]) -> Result<Tensor4> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.shape();
    let mut c_total = 0;
    for x in xs {
        if x.n != n || x.h != h || x.w != w {
            return Err(Error::Shape(format!(
                "concat: mismatched dims {:?} vs {:?}",
                x.shape(),
                first.shape()
            )));
        }
        c_total += x.c;
    }
    let mut out = Tensor4::zeros(n, c_total, h, w)?;
    for ni in 0..n {
        let mut co = 0;
        for x in xs {
            for ci in 0..x.c {
                out.plane_mut(ni, co).copy_from_slice(x.plane(ni, ci));
                co += 1;
            }
        }
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into per-input tensors.
pub fn split_channels(g: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
    let total: usize = sizes.iter().sum();
    if total != g.c {
        return Err(Error::Shape(format!(
            "split: sizes sum {} != channels {}",
            total, g.c
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut c0 = 0;
    for &sz in sizes {
        let mut t = Tensor4::zeros(g.n, sz, g.h, g.w)?;
        for ni in 0..g.n {
            for ci in 0..sz {
                t.plane_mut(ni, ci).copy_from_slice(g.plane(ni, c0 + ci));
            }
        }
        c0 += sz;
        out.push(t);
    }
    Ok(out)
}

/// Stacks channels of (a, b), left argument first.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    concat_many(&[a, b])
}

pub fn concat_channels_backward(g: &Tensor4, ca: usize, cb: usize) -> Result<(Tensor4, Tensor4)> {
    let mut parts = split_channels(g, &[ca, cb])?;
    let b = parts.pop().unwrap();
    let a = parts.pop().unwrap();
    Ok((a, b))
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward of relu; the subgradient at exactly 0 is 0.
pub fn relu_backward(grad_out: &Tensor4, pre: &Tensor4) -> Result<Tensor4> {
    if grad_out.shape() != pre.shape() {
        return Err(Error::Shape(format!(
            "relu backward: {:?} vs {:?}",
            grad_out.shape(),
            pre.shape()
        )));
    }
    let mut gx = grad_out.clone();
    for (g, &p) in gx.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(gx)
}
