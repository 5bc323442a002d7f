//! Direct-loop convolution kernels. Every loop runs in a fixed order so the
//! results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvParams {
            stride,
            pad,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves spatial extents for kernel `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvParams {
            stride: 1,
            pad: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Output positions `o` for which `o * stride + offset` lands inside `[0, in_len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_excl = {
        let last = in_len as isize - 1 - offset;
        if last < 0 {
            0
        } else {
            last / s + 1
        }
    };
    let lo = (lo.max(0) as usize).min(out_len);
    let hi = (hi_excl.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

fn check_params(k: usize, p: ConvParams) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::shape(format!("kernel size {k} must be odd")));
    }
    if p.stride == 0 || p.dilation == 0 {
        return Err(Error::shape("stride and dilation must be >= 1"));
    }
    Ok(())
}

pub(crate) fn conv_out_shape(
    x: Shape,
    w: Shape,
    depthwise: bool,
    bias: Option<Shape>,
    p: ConvParams,
) -> Result<Shape> {
    let [n, c, h, wd] = x.0;
    let [co, ci, kh, kw] = w.0;
    if kh != kw {
        return Err(Error::shape(format!("non-square kernel {w}")));
    }
    check_params(kh, p)?;
    if depthwise {
        if co != c || ci != 1 {
            return Err(Error::shape(format!(
                "depthwise weights {w} for input with {c} channels"
            )));
        }
    } else if ci != c {
        return Err(Error::shape(format!(
            "conv weights {w} expect {ci} input channels, got {c}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(Error::shape(format!("bias {b} for {co} output channels")));
        }
    }
    let oh = p
        .out_extent(h, kh)
        .ok_or_else(|| Error::shape(format!("kernel {kh} too large for height {h}")))?;
    let ow = p
        .out_extent(wd, kw)
        .ok_or_else(|| Error::shape(format!("kernel {kw} too large for width {wd}")))?;
    Ok(Shape::new(n, co, oh, ow))
}

/// Accumulates one kernel tap of `src` into `dst`: `dst[o] += wv * src[o*s + off]`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn tap_forward(
    dst: &mut [f64],
    src: &[f64],
    wv: f64,
    kh_off: isize,
    kw_off: isize,
    p: ConvParams,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let (ylo, yhi) = valid_range(kh_off, p.stride, h, oh);
    let (xlo, xhi) = valid_range(kw_off, p.stride, w, ow);
    if xlo == xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = (oy * p.stride) as isize + kh_off;
        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
        if p.stride == 1 {
            let base = (xlo as isize + kw_off) as usize;
            let n = xhi - xlo;
            for (d, s) in dst_row[xlo..xhi].iter_mut().zip(&src_row[base..base + n]) {
                *d += wv * s;
            }
        } else {
            for ox in xlo..xhi {
                let ix = (ox * p.stride) as isize + kw_off;
                dst_row[ox] += wv * src_row[ix as usize];
            }
        }
    }
}

/// For one kernel tap: returns `sum_o gout[o] * src[o*s+off]` and scatters
/// `wv * gout[o]` into `gsrc`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn tap_backward(
    gout: &[f64],
    src: &[f64],
    gsrc: Option<&mut [f64]>,
    wv: f64,
    kh_off: isize,
    kw_off: isize,
    p: ConvParams,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> f64 {
    let (ylo, yhi) = valid_range(kh_off, p.stride, h, oh);
    let (xlo, xhi) = valid_range(kw_off, p.stride, w, ow);
    let mut gw = 0.0;
    match gsrc {
        Some(gsrc) => {
            for oy in ylo..yhi {
                let iy = ((oy * p.stride) as isize + kh_off) as usize;
                for ox in xlo..xhi {
                    let ix = ((ox * p.stride) as isize + kw_off) as usize;
                    let g = gout[oy * ow + ox];
                    gw += g * src[iy * w + ix];
                    gsrc[iy * w + ix] += wv * g;
                }
            }
        }
        None => {
            for oy in ylo..yhi {
                let iy = ((oy * p.stride) as isize + kh_off) as usize;
                for ox in xlo..xhi {
                    let ix = ((ox * p.stride) as isize + kw_off) as usize;
                    gw += gout[oy * ow + ox] * src[iy * w + ix];
                }
            }
        }
    }
    gw
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
    depthwise: bool,
) -> Result<Tensor> {
    let out_shape = conv_out_shape(x.shape(), w.shape(), depthwise, bias.map(|b| b.shape()), p)?;
    let [n, c, h, wd] = x.shape().0;
    let [co, ci, k, _] = w.shape().0;
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let mut out = vec![0.0; out_shape.numel()];
    let xd = x.data();
    let wdata = w.data();
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * out_plane..(b * co + o + 1) * out_plane];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            let inputs = if depthwise { o..o + 1 } else { 0..c };
            for i in inputs {
                let src = &xd[(b * c + i) * in_plane..(b * c + i + 1) * in_plane];
                let wi = if depthwise { 0 } else { i };
                for ky in 0..k {
                    let kh_off = (ky * p.dilation) as isize - p.pad as isize;
                    for kx in 0..k {
                        let wv = wdata[((o * ci + wi) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let kw_off = (kx * p.dilation) as isize - p.pad as isize;
                        tap_forward(dst, src, wv, kh_off, kw_off, p, (h, wd), (oh, ow));
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    out_shape: Shape,
    p: ConvParams,
    depthwise: bool,
    need_x: bool,
) -> ConvGrads {
    let [n, c, h, wd] = x.shape().0;
    let [co, ci, k, _] = w.shape().0;
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let xd = x.data();
    let wdata = w.data();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; co];
    for b in 0..n {
        for o in 0..co {
            let g = &gout[(b * co + o) * out_plane..(b * co + o + 1) * out_plane];
            gb[o] += g.iter().sum::<f64>();
            let inputs = if depthwise { o..o + 1 } else { 0..c };
            for i in inputs {
                let src = &xd[(b * c + i) * in_plane..(b * c + i + 1) * in_plane];
                let wi = if depthwise { 0 } else { i };
                for ky in 0..k {
                    let kh_off = (ky * p.dilation) as isize - p.pad as isize;
                    for kx in 0..k {
                        let widx = ((o * ci + wi) * k + ky) * k + kx;
                        let kw_off = (kx * p.dilation) as isize - p.pad as isize;
                        let gsrc = gx
                            .as_mut()
                            .map(|gx| &mut gx[(b * c + i) * in_plane..(b * c + i + 1) * in_plane]);
                        gw[widx] += tap_backward(
                            g,
                            src,
                            gsrc,
                            wdata[widx],
                            kh_off,
                            kw_off,
                            p,
                            (h, wd),
                            (oh, ow),
                        );
                    }
                }
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    }
}

/// 1×1 convolution: a per-pixel matrix product over channels.
pub(crate) fn pointwise_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [n, c, h, wd] = x.shape().0;
    let [co, ci, kh, kw] = w.shape().0;
    if kh != 1 || kw != 1 || ci != c {
        return Err(Error::shape(format!(
            "pointwise weights {} for input {}",
            w.shape(),
            x.shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(Error::shape(format!("bias {} for {co} outputs", b.shape())));
        }
    }
    let plane = h * wd;
    let mut out = vec![0.0; n * co * plane];
    let xd = x.data();
    let wdata = w.data();
    for b in 0..n {
        for o in 0..co {
            let dst = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            for i in 0..c {
                let wv = wdata[o * c + i];
                let src = &xd[(b * c + i) * plane..(b * c + i + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, co, h, wd), out)
}

pub(crate) fn pointwise_backward(x: &Tensor, w: &Tensor, gout: &[f64], need_x: bool) -> ConvGrads {
    let [n, c, h, wd] = x.shape().0;
    let co = w.shape().n();
    let plane = h * wd;
    let xd = x.data();
    let wdata = w.data();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; co];
    for b in 0..n {
        for o in 0..co {
            let g = &gout[(b * co + o) * plane..(b * co + o + 1) * plane];
            gb[o] += g.iter().sum::<f64>();
            for i in 0..c {
                let src = &xd[(b * c + i) * plane..(b * c + i + 1) * plane];
                gw[o * c + i] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                if let Some(gx) = gx.as_mut() {
                    let wv = wdata[o * c + i];
                    let dst = &mut gx[(b * c + i) * plane..(b * c + i + 1) * plane];
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    }
}
