//! im2col-based convolution kernels on raw row-major slices.
//!
//! `Conv2dGeom` always describes the *direct* convolution: `src` is the
//! spatially larger side (`h × w`) and `dst` the strided output (`oh × ow`).
//! A transposed convolution runs the same geometry with the roles of input
//! and output swapped.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    /// channels on the `h × w` side
    pub c_src: usize,
    /// channels on the `oh × ow` side
    pub c_dst: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_src * self.kh * self.kw
    }

    pub fn cols_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn src_item(&self) -> usize {
        self.c_src * self.h * self.w
    }

    pub fn dst_item(&self) -> usize {
        self.c_dst * self.oh * self.ow
    }
}

pub(crate) fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    Ok(())
}

/// Geometry of `conv2d(input [B,Cin,H,W], weight [Cout,Cin,kH,kW])`.
pub(crate) fn conv2d_geom(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Conv2dGeom> {
    check_stride(stride)?;
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
        )));
    }
    let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, wcin, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d input has {cin} channels, weight expects {wcin}"
        )));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if kh == 0 || kw == 0 || span_h < kh || span_w < kw {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
        )));
    }
    Ok(Conv2dGeom {
        batch: b,
        c_src: cin,
        c_dst: cout,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: (span_h - kh) / stride + 1,
        ow: (span_w - kw) / stride + 1,
    })
}

/// Geometry of `conv_transpose2d(input [B,Cin,H,W], weight [Cin,Cout,kH,kW])`,
/// expressed as the direct convolution it is the adjoint of.
pub(crate) fn conv_transpose2d_geom(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Conv2dGeom> {
    check_stride(stride)?;
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::dim(format!(
            "conv_transpose2d expects 4-d input and weight, got {input:?} and {weight:?}"
        )));
    }
    let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (wcin, cout, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv_transpose2d input has {cin} channels, weight expects {wcin}"
        )));
    }
    if h == 0 || w == 0 || kh == 0 || kw == 0 {
        return Err(Error::dim("conv_transpose2d with empty extent"));
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::dim(format!(
            "conv_transpose2d output would be empty (input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad})"
        )));
    }
    let out_h = full_h - 2 * pad;
    let out_w = full_w - 2 * pad;
    Ok(Conv2dGeom {
        batch: b,
        c_src: cout,
        c_dst: cin,
        h: out_h,
        w: out_w,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w,
    })
}

/// Unfold one `[c_src, h, w]` item into `[c_src·kh·kw, oh·ow]` columns.
pub(crate) fn im2col<T: Real>(g: &Conv2dGeom, src: &[T], cols: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.c_src {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back onto a `[c_src, h, w]` item, accumulating overlaps.
pub(crate) fn col2im<T: Real>(g: &Conv2dGeom, cols: &[T], dst: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.c_src {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let col = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &col[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = *v + *b);
    }
}

fn channel_sums<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *o = *o + g[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

// ---- direct convolution: src = input, dst = output ----

pub(crate) fn conv2d_forward<T: Real>(
    g: &Conv2dGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p) = (g.cols_rows(), g.cols_cols());
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.batch * g.dst_item()];
    for b in 0..g.batch {
        im2col(g, &input[b * g.src_item()..(b + 1) * g.src_item()], &mut cols);
        let o = &mut out[b * g.dst_item()..(b + 1) * g.dst_item()];
        T::gemm(g.c_dst, k, p, weight, false, &cols, false, T::zero(), o);
        if let Some(bias) = bias {
            add_channel_bias(o, bias, p);
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(g: &Conv2dGeom, weight: &[T], dout: &[T]) -> Vec<T> {
    let (k, p) = (g.cols_rows(), g.cols_cols());
    let mut dcols = vec![T::zero(); k * p];
    let mut dx = vec![T::zero(); g.batch * g.src_item()];
    for b in 0..g.batch {
        let d = &dout[b * g.dst_item()..(b + 1) * g.dst_item()];
        T::gemm(k, g.c_dst, p, weight, true, d, false, T::zero(), &mut dcols);
        col2im(g, &dcols, &mut dx[b * g.src_item()..(b + 1) * g.src_item()]);
    }
    dx
}

pub(crate) fn conv2d_backward_weight<T: Real>(g: &Conv2dGeom, input: &[T], dout: &[T]) -> Vec<T> {
    let (k, p) = (g.cols_rows(), g.cols_cols());
    let mut cols = vec![T::zero(); k * p];
    let mut dw = vec![T::zero(); g.c_dst * k];
    for b in 0..g.batch {
        im2col(g, &input[b * g.src_item()..(b + 1) * g.src_item()], &mut cols);
        let d = &dout[b * g.dst_item()..(b + 1) * g.dst_item()];
        T::gemm(g.c_dst, p, k, d, false, &cols, true, T::one(), &mut dw);
    }
    dw
}

pub(crate) fn conv2d_backward_bias<T: Real>(g: &Conv2dGeom, dout: &[T]) -> Vec<T> {
    channel_sums(dout, g.batch, g.c_dst, g.cols_cols())
}

// ---- transposed convolution: src = output, dst = input ----

pub(crate) fn conv_transpose2d_forward<T: Real>(
    g: &Conv2dGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p) = (g.cols_rows(), g.cols_cols());
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.batch * g.src_item()];
    for b in 0..g.batch {
        let x = &input[b * g.dst_item()..(b + 1) * g.dst_item()];
        T::gemm(k, g.c_dst, p, weight, true, x, false, T::zero(), &mut cols);
        let o = &mut out[b * g.src_item()..(b + 1) * g.src_item()];
        col2im(g, &cols, o);
        if let Some(bias) = bias {
            add_channel_bias(o, bias, g.h * g.w);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward_input<T: Real>(
    g: &Conv2dGeom,
    weight: &[T],
    dout: &[T],
) -> Vec<T> {
    // adjoint of the transposed convolution is the direct one
    conv2d_forward(g, dout, weight, None)
}

pub(crate) fn conv_transpose2d_backward_weight<T: Real>(
    g: &Conv2dGeom,
    input: &[T],
    dout: &[T],
) -> Vec<T> {
    let (k, p) = (g.cols_rows(), g.cols_cols());
    let mut cols = vec![T::zero(); k * p];
    let mut dw = vec![T::zero(); g.c_dst * k];
    for b in 0..g.batch {
        im2col(g, &dout[b * g.src_item()..(b + 1) * g.src_item()], &mut cols);
        let x = &input[b * g.dst_item()..(b + 1) * g.dst_item()];
        T::gemm(g.c_dst, p, k, x, false, &cols, true, T::one(), &mut dw);
    }
    dw
}

pub(crate) fn conv_transpose2d_backward_bias<T: Real>(g: &Conv2dGeom, dout: &[T]) -> Vec<T> {
    channel_sums(dout, g.batch, g.c_src, g.h * g.w)
}
