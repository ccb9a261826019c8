//! Forward and backward kernels for the layer primitives.
//!
//! These are plain functions on [`Tensor`]s; the tape in [`crate::autodiff`]
//! records calls to them and dispatches to the matching backward kernel.
//! Convolutions are lowered to `im2col` + GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero padding applied by [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding: output is `H - kh + 1`.
    Valid,
    /// Zero padding keeping the spatial size. For even kernels the extra
    /// row/column goes to the bottom/right.
    Same,
}

impl Padding {
    /// `(before, after)` padding along one axis for kernel extent `k`.
    pub fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
        }
    }
}

/// `C = A·B (+ C if accumulate)` with explicit strides, `A` is m×k, `B` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let cols_n = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * cols_n];
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * cols_n;
                for y in 0..g.oh {
                    let sy = y + i;
                    if sy < g.pad_t || sy - g.pad_t >= g.h {
                        continue;
                    }
                    let src = &plane[(sy - g.pad_t) * g.w..(sy - g.pad_t + 1) * g.w];
                    let dst = &mut cols[row + y * g.ow..row + (y + 1) * g.ow];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x + j;
                        if sx >= g.pad_l && sx - g.pad_l < g.w {
                            *d = src[sx - g.pad_l];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let cols_n = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * cols_n;
                for y in 0..g.oh {
                    let sy = y + i;
                    if sy < g.pad_t || sy - g.pad_t >= g.h {
                        continue;
                    }
                    let dst = &mut plane[(sy - g.pad_t) * g.w..(sy - g.pad_t + 1) * g.w];
                    let src = &cols[row + y * g.ow..row + (y + 1) * g.ow];
                    for (x, s) in src.iter().enumerate() {
                        let sx = x + j;
                        if sx >= g.pad_l && sx - g.pad_l < g.w {
                            dst[sx - g.pad_l] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<(Geometry, usize)> {
    let (c, h, w) = input.chw()?;
    let [c_out, c_in, kh, kw] = *kernels.shape() else {
        return Err(Error::Shape(format!(
            "conv2d kernels must be [C_out,C_in,kh,kw], got {:?}",
            kernels.shape()
        )));
    };
    if c_in != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, kernels expect {c_in}"
        )));
    }
    let (pt, pb) = padding.amounts(kh);
    let (pl, pr) = padding.amounts(kw);
    if kh > h + pt + pb || kw > w + pl + pr {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + pt + pb,
            w + pl + pr
        )));
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        pad_t: pt,
        pad_l: pl,
        oh: h + pt + pb - kh + 1,
        ow: w + pl + pr - kw + 1,
    };
    Ok((g, c_out))
}

/// Cross-correlation of `input [C_in,H,W]` with `kernels [C_out,C_in,kh,kw]`
/// plus a per-output-channel `bias [C_out]`, stride 1.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    Ok(conv2d_with_cols(input, kernels, bias, padding)?.0)
}

/// [`conv2d`] that also returns the `im2col` matrix for reuse in backward.
pub(crate) fn conv2d_with_cols(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
) -> Result<(Tensor, Vec<f64>)> {
    let (g, c_out) = conv_geometry(input, kernels, padding)?;
    bias.expect_shape(&[c_out], "conv2d bias")?;
    let cols = im2col(input.data(), &g);
    let kk = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let mut out = vec![0.0; c_out * n];
    for (o, b) in bias.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(*b);
    }
    gemm(c_out, kk, n, kernels.data(), kk, 1, &cols, n, 1, &mut out, true);
    Ok((Tensor::new(&[c_out, g.oh, g.ow], out)?, cols))
}

/// Gradients of [`conv2d`] with respect to `(input, kernels, bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    padding: Padding,
    cols: &[f64],
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g, c_out) = conv_geometry(input, kernels, padding)?;
    grad_out.expect_shape(&[c_out, g.oh, g.ow], "conv2d upstream gradient")?;
    let kk = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let go = grad_out.data();

    let mut d_kernels = vec![0.0; c_out * kk];
    gemm(c_out, n, kk, go, n, 1, cols, 1, n, &mut d_kernels, false);

    let d_bias: Vec<f64> = (0..c_out).map(|o| go[o * n..(o + 1) * n].iter().sum()).collect();

    let mut d_cols = vec![0.0; kk * n];
    gemm(kk, c_out, n, kernels.data(), 1, kk, go, n, 1, &mut d_cols, false);
    let d_input = col2im(&d_cols, &g);

    Ok((
        Tensor::new(input.shape(), d_input)?,
        Tensor::new(kernels.shape(), d_kernels)?,
        Tensor::new(&[c_out], d_bias)?,
    ))
}

fn transpose_geometry(input: &Tensor, kernels: &Tensor) -> Result<(Geometry, usize)> {
    let (c_in, h, w) = input.chw()?;
    let [kc_in, c_out, kh, kw] = *kernels.shape() else {
        return Err(Error::Shape(format!(
            "transpose_conv2d kernels must be [C_in,C_out,kh,kw], got {:?}",
            kernels.shape()
        )));
    };
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "transpose_conv2d: input has {c_in} channels, kernels expect {kc_in}"
        )));
    }
    // Geometry of the valid convolution this operator is the adjoint of.
    let g = Geometry {
        c: c_out,
        h: h + kh - 1,
        w: w + kw - 1,
        kh,
        kw,
        pad_t: 0,
        pad_l: 0,
        oh: h,
        ow: w,
    };
    Ok((g, c_in))
}

/// Stride-1 transpose convolution of `input [C_in,h,w]` with
/// `kernels [C_in,C_out,kh,kw]`, producing `[C_out, h+kh-1, w+kw-1]`.
///
/// The kernel layout matches [`conv2d`]'s so that
/// `transpose_conv2d(b, K)` is the adjoint of `conv2d(·, K, 0, Valid)`.
pub fn transpose_conv2d(input: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (g, c_in) = transpose_geometry(input, kernels)?;
    let kk = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let mut cols = vec![0.0; kk * n];
    gemm(kk, c_in, n, kernels.data(), 1, kk, input.data(), n, 1, &mut cols, false);
    Tensor::new(&[g.c, g.h, g.w], col2im(&cols, &g))
}

/// Gradients of [`transpose_conv2d`] with respect to `(input, kernels)`.
pub(crate) fn transpose_conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (g, c_in) = transpose_geometry(input, kernels)?;
    grad_out.expect_shape(&[g.c, g.h, g.w], "transpose_conv2d upstream gradient")?;
    let kk = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let cols = im2col(grad_out.data(), &g);

    let mut d_input = vec![0.0; c_in * n];
    gemm(c_in, kk, n, kernels.data(), kk, 1, &cols, n, 1, &mut d_input, false);

    let mut d_kernels = vec![0.0; c_in * kk];
    gemm(c_in, n, kk, input.data(), n, 1, &cols, 1, n, &mut d_kernels, false);

    Ok((Tensor::new(input.shape(), d_input)?, Tensor::new(kernels.shape(), d_kernels)?))
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per
/// output element, the flat input index it was taken from. Ties go to the
/// first element in row-major order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, argmax))
}

/// Softmax across the leading (label) axis of `[L,H,W]`, independently per pixel.
pub fn softmax_pixelwise(logits: &Tensor) -> Result<Tensor> {
    let (l, h, w) = logits.chw()?;
    if l < 2 {
        return Err(Error::Shape(format!("softmax needs at least 2 labels, got {l}")));
    }
    let n = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        let m = (0..l).map(|c| x[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..l {
            let e = (x[c * n + p] - m).exp();
            out[c * n + p] = e;
            z += e;
        }
        for c in 0..l {
            out[c * n + p] /= z;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Log-softmax across the label axis of `[L,H,W]`.
pub fn log_softmax_pixelwise(logits: &Tensor) -> Result<Tensor> {
    let (l, h, w) = logits.chw()?;
    if l < 2 {
        return Err(Error::Shape(format!("softmax needs at least 2 labels, got {l}")));
    }
    let n = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        let m = (0..l).map(|c| x[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..l).map(|c| (x[c * n + p] - m).exp()).sum();
        let lz = m + z.ln();
        for c in 0..l {
            out[c * n + p] = x[c * n + p] - lz;
        }
    }
    Tensor::new(logits.shape(), out)
}
