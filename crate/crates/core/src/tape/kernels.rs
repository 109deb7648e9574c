//! Slice-level forward and backward kernels.
//!
//! Every output element accumulates its terms sequentially in ascending
//! index order, so repeated runs are bitwise identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut max = x[at(0)];
            for a in 1..len {
                max = max.max(x[at(a)]);
            }
            let mut sum = T::ZERO;
            for a in 0..len {
                let e = (x[at(a)] - max).exp();
                y[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                y[at(a)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut dot = T::ZERO;
            for a in 0..len {
                dot += dy[at(a)] * y[at(a)];
            }
            for a in 0..len {
                dx[at(a)] += y[at(a)] * (dy[at(a)] - dot);
            }
        }
    }
}

/// Returns (output, per-row mean, per-row reciprocal std).
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let n = T::from_usize(cols);
    let mut y = vec![T::ZERO; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::ONE / (var + eps).sqrt();
        for c in 0..cols {
            y[r * cols + c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
    cols: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = x.len() / cols;
    let n = T::from_usize(cols);
    let xhat = |r: usize, c: usize| (x[r * cols + c] - means[r]) * rstds[r];
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] += dy[r * cols + c] * xhat(r, c);
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for c in 0..cols {
                db[c] += dy[r * cols + c];
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let mut mean_g = T::ZERO;
            let mut mean_gx = T::ZERO;
            for c in 0..cols {
                let g = dy[r * cols + c] * gamma[c];
                mean_g += g;
                mean_gx += g * xhat(r, c);
            }
            mean_g /= n;
            mean_gx /= n;
            for c in 0..cols {
                let g = dy[r * cols + c] * gamma[c];
                dx[r * cols + c] += rstds[r] * (g - mean_g - xhat(r, c) * mean_gx);
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Convolution geometry for channels-last `[H, W, C]` inputs and
/// `[k, k, Cin/groups, Cout]` kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &Shape, w: &Shape, stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let shape_err = |msg: alloc::string::String| Error::InvalidShape { op: "conv2d", msg };
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.clone(),
                right: w.clone(),
            });
        }
        let (h, wd, c_in) = (x.dim(0), x.dim(1), x.dim(2));
        let (k, k2, cin_g, c_out) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if stride == 0 || groups == 0 {
            return Err(shape_err(alloc::format!(
                "stride {stride} and groups {groups} must be positive"
            )));
        }
        if k != k2 {
            return Err(shape_err(alloc::format!("non-square kernel {w}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.clone(),
                right: w.clone(),
            });
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(alloc::format!(
                "kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(ConvGeom {
            h,
            w: wd,
            c_in,
            c_out,
            kernel: k,
            stride,
            pad,
            groups,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.h_out
            * self.w_out
            * self.c_out
            * self.kernel
            * self.kernel
            * (self.c_in / self.groups)) as u64
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }
}

fn pad_input<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = g.padded();
    let mut out = vec![T::ZERO; hp * wp * g.c_in];
    for y in 0..g.h {
        let src = &x[y * g.w * g.c_in..(y + 1) * g.w * g.c_in];
        let start = ((y + g.pad) * wp + g.pad) * g.c_in;
        out[start..start + src.len()].copy_from_slice(src);
    }
    out
}

/// Cross-correlation over an explicitly zero-padded input.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let xp = pad_input(x, g);
    let (_, wp) = g.padded();
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let k = g.kernel;
    let mut out = vec![T::ZERO; g.h_out * g.w_out * g.c_out];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let o = &mut out[(oy * g.w_out + ox) * g.c_out..(oy * g.w_out + ox + 1) * g.c_out];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy * g.stride + ky;
                    let ix = ox * g.stride + kx;
                    let xin = &xp[(iy * wp + ix) * g.c_in..(iy * wp + ix + 1) * g.c_in];
                    let wk =
                        &w[(ky * k + kx) * cin_g * g.c_out..(ky * k + kx + 1) * cin_g * g.c_out];
                    for grp in 0..g.groups {
                        let o_grp = &mut o[grp * cout_g..(grp + 1) * cout_g];
                        for ci in 0..cin_g {
                            let xv = xin[grp * cin_g + ci];
                            let w_row =
                                &wk[ci * g.c_out + grp * cout_g..ci * g.c_out + (grp + 1) * cout_g];
                            for (ov, &wv) in o_grp.iter_mut().zip(w_row) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
            for (ov, &b) in o.iter_mut().zip(bias) {
                *ov += b;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (hp, wp) = g.padded();
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let k = g.kernel;
    if let Some(db) = dbias {
        for p in 0..g.h_out * g.w_out {
            for (d, &v) in db.iter_mut().zip(&dy[p * g.c_out..(p + 1) * g.c_out]) {
                *d += v;
            }
        }
    }
    if let Some(dw) = dw {
        let xp = pad_input(x, g);
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let d = &dy[(oy * g.w_out + ox) * g.c_out..(oy * g.w_out + ox + 1) * g.c_out];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        let xin = &xp[(iy * wp + ix) * g.c_in..(iy * wp + ix + 1) * g.c_in];
                        let base = (ky * k + kx) * cin_g * g.c_out;
                        for grp in 0..g.groups {
                            for ci in 0..cin_g {
                                let xv = xin[grp * cin_g + ci];
                                let row = base + ci * g.c_out + grp * cout_g;
                                for (wv, &dv) in dw[row..row + cout_g]
                                    .iter_mut()
                                    .zip(&d[grp * cout_g..(grp + 1) * cout_g])
                                {
                                    *wv += xv * dv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        let mut dxp = vec![T::ZERO; hp * wp * g.c_in];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let d = &dy[(oy * g.w_out + ox) * g.c_out..(oy * g.w_out + ox + 1) * g.c_out];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        let base = (ky * k + kx) * cin_g * g.c_out;
                        let dxin = &mut dxp[(iy * wp + ix) * g.c_in..(iy * wp + ix + 1) * g.c_in];
                        for grp in 0..g.groups {
                            for ci in 0..cin_g {
                                let row = base + ci * g.c_out + grp * cout_g;
                                let mut acc = T::ZERO;
                                for (&wv, &dv) in w[row..row + cout_g]
                                    .iter()
                                    .zip(&d[grp * cout_g..(grp + 1) * cout_g])
                                {
                                    acc += wv * dv;
                                }
                                dxin[grp * cin_g + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        for y in 0..g.h {
            let start = ((y + g.pad) * wp + g.pad) * g.c_in;
            let src = &dxp[start..start + g.w * g.c_in];
            for (d, &v) in dx[y * g.w * g.c_in..(y + 1) * g.w * g.c_in]
                .iter_mut()
                .zip(src)
            {
                *d += v;
            }
        }
    }
}

// Tensor-level entry points without a tape.

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::ZERO; m * n];
    gemm_nn(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims(a: &Shape, b: &Shape) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.clone(),
            right: b.clone(),
        });
    }
    Ok((a.dim(0), a.dim(1), b.dim(1)))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().rank() {
        return Err(Error::InvalidAxis {
            axis,
            shape: x.shape().clone(),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    Ok(Tensor::from_parts(
        x.shape().clone(),
        softmax_forward(x.data(), outer, len, inner),
    ))
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let cols = x.shape().last();
    if x.shape().rank() == 0 || gamma.dims() != [cols] || beta.dims() != [cols] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().clone(),
            right: gamma.shape().clone(),
        });
    }
    let (y, _, _) = layer_norm_forward(x.data(), gamma.data(), beta.data(), cols, eps);
    Ok(Tensor::from_parts(x.shape().clone(), y))
}

pub fn gelu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().clone(),
        x.data().iter().map(|&v| gelu(v)).collect(),
    )
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, groups)?;
    if bias.dims() != [g.c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: w.shape().clone(),
            right: bias.shape().clone(),
        });
    }
    Tensor::new(
        &[g.h_out, g.w_out, g.c_out],
        conv2d_forward(x.data(), w.data(), bias.data(), &g),
    )
}
