//! Forward and adjoint kernels for the dense operators.
//!
//! Convolutions are lowered to GEMM over an im2col buffer laid out as
//! `[C·k·k, N·OH·OW]`. `col2im` is the exact adjoint of `im2col`, so the
//! transposed convolution is the adjoint of the convolution by construction.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// `c = op(a)·op(b) + beta·c` with `op(a)` of extent `m×k` and `op(b)` of
/// extent `k×n`. When `a_t` is set, `a` is stored as `k×m`; likewise `b_t`
/// means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded cross-correlation from a large map
/// (`c × h × w`) to a small map (`oc × oh × ow`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of `conv2d` applied to an `n×c×h×w` input.
    pub fn forward(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(config_err!("kernel and stride must be ≥ 1"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < k || wp < k {
            return Err(config_err!(
                "kernel {k} exceeds padded input {hp}×{wp}"
            ));
        }
        if (hp - k) % stride != 0 || (wp - k) % stride != 0 {
            return Err(config_err!(
                "non-integral output extent: ({h}+2·{pad}−{k})/{stride}"
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (hp - k) / stride + 1,
            ow: (wp - k) / stride + 1,
        })
    }

    /// Geometry of the conv whose adjoint maps an `n×c_small×oh×ow` input to
    /// the transposed-convolution output `n×c×h×w`.
    pub fn transposed(n: usize, c: usize, oh: usize, ow: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(config_err!("kernel and stride must be ≥ 1"));
        }
        let full_h = (oh - 1) * stride + k;
        let full_w = (ow - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(config_err!(
                "transposed conv output extent non-positive (pad {pad} too large)"
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let mut col = vec![0.0; g.rows() * cols];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst[ni * ohw..(ni + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back to an image buffer.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src[ni * ohw..(ni + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, S] → [C, N·S]`
fn nchw_to_cn(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * s + ni * s..][..s].copy_from_slice(&x[(ni * c + ci) * s..][..s]);
        }
    }
    out
}

/// `[C, N·S] → [N, C, S]`
fn cn_to_nchw(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * s..][..s].copy_from_slice(&x[ci * n * s + ni * s..][..s]);
        }
    }
    out
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], n: usize, s: usize) {
    let c = bias.len();
    for ni in 0..n {
        for (ci, b) in bias.iter().enumerate() {
            for v in &mut y[(ni * c + ci) * s..][..s] {
                *v += b;
            }
        }
    }
}

fn channel_sums(dy: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += dy[(ni * c + ci) * s..][..s].iter().sum::<f64>();
        }
    }
    out
}

fn check_bias(b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(shape_err!("bias {:?} for {channels} channels", b.shape()));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(shape_err!("conv2d: input has {c} channels, weight expects {wc}"));
    }
    if kh != kw {
        return Err(config_err!("conv2d: only square kernels supported ({kh}×{kw})"));
    }
    Ok((ConvGeom::forward(n, c, h, wd, kh, stride, pad)?, o))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, o) = conv2d_geom(x, w, stride, pad)?;
    check_bias(b, o)?;
    let col = im2col(x.data(), &g);
    let mut y2 = vec![0.0; o * g.cols()];
    gemm(o, g.rows(), g.cols(), w.data(), false, &col, false, &mut y2, 0.0);
    let mut y = cn_to_nchw(&y2, g.n, o, g.oh * g.ow);
    if let Some(b) = b {
        add_channel_bias(&mut y, b.data(), g.n, g.oh * g.ow);
    }
    Ok(Tensor::from_parts(vec![g.n, o, g.oh, g.ow], y))
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let (g, o) = conv2d_geom(x, w, stride, pad)?;
    let s = g.oh * g.ow;
    let dy2 = nchw_to_cn(dy.data(), g.n, o, s);
    let db = Tensor::from_parts(vec![o], channel_sums(dy.data(), g.n, o, s));
    let dw = need_dw.then(|| {
        let col = im2col(x.data(), &g);
        let mut dw = vec![0.0; o * g.rows()];
        gemm(o, g.cols(), g.rows(), &dy2, false, &col, true, &mut dw, 0.0);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; g.rows() * g.cols()];
        gemm(g.rows(), o, g.cols(), w.data(), true, &dy2, false, &mut dcol, 0.0);
        Tensor::from_parts(x.shape().to_vec(), col2im(&dcol, &g))
    });
    Ok((dx, dw, db))
}

/// Geometry for a transposed convolution with weight `[C_in, C_out, k, k]`.
/// The returned geometry describes the forward conv mapping the output
/// (`C_out` channels, large map) back to the input (`C_in`, small map).
pub(crate) fn conv_transpose2d_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let (n, ci, h, wd) = x.dims4()?;
    let (wi, co, kh, kw) = w.dims4()?;
    if wi != ci {
        return Err(shape_err!(
            "conv_transpose2d: input has {ci} channels, weight expects {wi}"
        ));
    }
    if kh != kw {
        return Err(config_err!("conv_transpose2d: only square kernels supported"));
    }
    let g = ConvGeom::transposed(n, co, h, wd, kh, stride, pad)?;
    // The transposed extents must round-trip through the forward rule.
    ConvGeom::forward(n, co, g.h, g.w, kh, stride, pad)?;
    Ok((g, ci))
}

pub(crate) fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, ci) = conv_transpose2d_geom(x, w, stride, pad)?;
    check_bias(b, g.c)?;
    let x2 = nchw_to_cn(x.data(), g.n, ci, g.oh * g.ow);
    let mut col = vec![0.0; g.rows() * g.cols()];
    gemm(g.rows(), ci, g.cols(), w.data(), true, &x2, false, &mut col, 0.0);
    let mut y = col2im(&col, &g);
    if let Some(b) = b {
        add_channel_bias(&mut y, b.data(), g.n, g.h * g.w);
    }
    Ok(Tensor::from_parts(vec![g.n, g.c, g.h, g.w], y))
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let (g, ci) = conv_transpose2d_geom(x, w, stride, pad)?;
    let db = Tensor::from_parts(vec![g.c], channel_sums(dy.data(), g.n, g.c, g.h * g.w));
    let col_dy = im2col(dy.data(), &g);
    let dx = need_dx.then(|| {
        let mut dx2 = vec![0.0; ci * g.cols()];
        gemm(ci, g.rows(), g.cols(), w.data(), false, &col_dy, false, &mut dx2, 0.0);
        Tensor::from_parts(x.shape().to_vec(), cn_to_nchw(&dx2, g.n, ci, g.oh * g.ow))
    });
    let dw = need_dw.then(|| {
        let x2 = nchw_to_cn(x.data(), g.n, ci, g.oh * g.ow);
        let mut dw = vec![0.0; ci * g.rows()];
        gemm(ci, g.cols(), g.rows(), &x2, false, &col_dy, true, &mut dw, 0.0);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    Ok((dx, dw, db))
}

/// Max pooling; returns the output and, per output cell, the flat input
/// index of the first row-major argmax.
pub(crate) fn maxpool2d_forward(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(config_err!("maxpool: kernel and stride must be ≥ 1"));
    }
    if k > h || k > w {
        return Err(config_err!("maxpool window {k} larger than input {h}×{w}"));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

/// Per-channel layout of an `N×C×…` tensor: `(n, c, spatial)`.
pub(crate) fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(shape_err!("expected N×C×…, got {:?}", x.shape()));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    Ok((n, c, x.len() / (n * c)))
}

/// Per-channel mean and biased variance over all axes but the channel axis.
/// Two-pass for accuracy.
pub(crate) fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, s) = channel_layout(x)?;
    let m = (n * s) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    for ni in 0..n {
        for (ci, mu) in mean.iter_mut().enumerate() {
            *mu += xd[(ni * c + ci) * s..][..s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let mu = mean[ci];
            var[ci] += xd[(ni * c + ci) * s..][..s]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok((mean, var))
}

/// Normalizes with the given per-channel statistics, returning `(y, x̂)`.
pub(crate) fn batchnorm_apply(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    inv_std: &[f64],
    mean: &[f64],
) -> (Tensor, Vec<f64>) {
    let (n, c, s) = channel_layout(x).expect("validated by caller");
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            for j in off..off + s {
                let h = (xd[j] - mean[ci]) * inv_std[ci];
                xhat[j] = h;
                y[j] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), y), xhat)
}
