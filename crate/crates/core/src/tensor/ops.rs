//! Forward and backward math for every primitive. Free functions so the
//! inference paths (no tape) reuse the exact same code the tape records.

use super::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::{Error, Result};

fn shape_err(op: &'static str, details: String) -> Error {
    Error::ShapeMismatch { op, details }
}

// ---------------------------------------------------------------- conv2d

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_dims<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?} (want rank 4)")));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc_in != c_in {
        return Err(shape_err(
            "conv2d",
            format!("input channels {c_in} != kernel channels {wc_in}"),
        ));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unfold one sample into a [c_in*kh*kw, oh*ow] column matrix (zero padded).
fn im2col<T: Real>(sample: &[T], d: &ConvDims, stride: usize, pad: usize, cols: &mut [T]) {
    let ohow = d.oh * d.ow;
    for c in 0..d.c_in {
        let plane = &sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oi in 0..d.oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut cols[row + oi * d.ow..row + (oi + 1) * d.ow];
                    if ii < 0 || ii >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for (oj, out) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *out = if jj < 0 || jj >= d.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto one input sample.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, stride: usize, pad: usize, sample: &mut [T]) {
    let ohow = d.oh * d.ow;
    for c in 0..d.c_in {
        let plane = &mut sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oi in 0..d.oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    let src = &cols[row + oi * d.ow..row + (oi + 1) * d.ow];
                    for (oj, &v) in src.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < d.w {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, stride, pad)?;
    let kdim = d.c_in * d.kh * d.kw;
    let ohow = d.oh * d.ow;
    let mut cols = vec![T::zero(); kdim * ohow];
    let mut out = vec![T::zero(); d.n * d.c_out * ohow];
    let sample_len = d.c_in * d.h * d.w;
    for n in 0..d.n {
        im2col(
            &x.data()[n * sample_len..(n + 1) * sample_len],
            &d,
            stride,
            pad,
            &mut cols,
        );
        gemm_nn(
            &mut out[n * d.c_out * ohow..(n + 1) * d.c_out * ohow],
            weight.data(),
            &cols,
            d.c_out,
            kdim,
            ohow,
        );
    }
    Tensor::new(&[d.n, d.c_out, d.oh, d.ow], out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x, weight, stride, pad)?;
    let kdim = d.c_in * d.kh * d.kw;
    let ohow = d.oh * d.ow;
    let sample_len = d.c_in * d.h * d.w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut cols = vec![T::zero(); kdim * ohow];
    let mut dcols = vec![T::zero(); kdim * ohow];
    for n in 0..d.n {
        let go = &grad_out.data()[n * d.c_out * ohow..(n + 1) * d.c_out * ohow];
        im2col(
            &x.data()[n * sample_len..(n + 1) * sample_len],
            &d,
            stride,
            pad,
            &mut cols,
        );
        // dW[co][kk] += sum_p go[co][p] * cols[kk][p]
        gemm_nt(gw.data_mut(), go, &cols, d.c_out, ohow, kdim);
        // dcols[kk][p] = sum_co W[co][kk] * go[co][p]
        dcols.fill(T::zero());
        gemm_tn(&mut dcols, weight.data(), go, d.c_out, kdim, ohow);
        col2im(
            &dcols,
            &d,
            stride,
            pad,
            &mut gx.data_mut()[n * sample_len..(n + 1) * sample_len],
        );
    }
    Ok((gx, gw))
}

// ---------------------------------------------------------------- matmul

pub fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
        return Err(shape_err("matmul", format!("{ashape:?} x {bshape:?}")));
    }
    let (n, k, m) = (ashape[0], ashape[1], bshape[1]);
    let mut out = vec![T::zero(); n * m];
    gemm_nn(&mut out, a.data(), b.data(), n, k, m);
    Tensor::new(&[n, m], out)
}

pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    // ga[n][k] = sum_m go[n][m] * b[k][m]
    gemm_nt(ga.data_mut(), grad_out.data(), b.data(), n, m, k);
    // gb[k][m] = sum_n a[n][k] * go[n][m]
    gemm_tn(gb.data_mut(), a.data(), grad_out.data(), n, k, m);
    (ga, gb)
}

// ----------------------------------------------------------- elementwise

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64(alpha);
    x.map(|v| if v > T::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64(alpha);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { a * g })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn add_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape().to_vec(),
        data,
    })
}

pub fn mul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor {
        shape: a.shape().to_vec(),
        data,
    })
}

// ------------------------------------------------------------- bias adds

/// `[N, M] + [M]`
pub fn add_bias_row_forward<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 2 || bias.shape() != [xs[1]] {
        return Err(shape_err(
            "add_bias_row",
            format!("x {xs:?} + bias {:?}", bias.shape()),
        ));
    }
    let m = xs[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn add_bias_row_backward<T: Real>(grad_out: &Tensor<T>, m: usize) -> Tensor<T> {
    let mut gb = Tensor::zeros(&[m]);
    for row in grad_out.data().chunks_exact(m) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    gb
}

/// `[N, C, H, W] + [C]`
pub fn add_bias_chan_forward<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || bias.shape() != [xs[1]] {
        return Err(shape_err(
            "add_bias_chan",
            format!("x {xs:?} + bias {:?}", bias.shape()),
        ));
    }
    let (c, hw) = (xs[1], xs[2] * xs[3]);
    let mut out = x.clone();
    for sample in out.data_mut().chunks_exact_mut(c * hw) {
        for (ci, plane) in sample.chunks_exact_mut(hw).enumerate() {
            let b = bias.data()[ci];
            for v in plane {
                *v += b;
            }
        }
    }
    Ok(out)
}

pub fn add_bias_chan_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    let (c, hw) = (gs[1], gs[2] * gs[3]);
    let mut gb = Tensor::zeros(&[c]);
    for sample in grad_out.data().chunks_exact(c * hw) {
        for (ci, plane) in sample.chunks_exact(hw).enumerate() {
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            gb.data_mut()[ci] += s;
        }
    }
    gb
}

// --------------------------------------------------------------- pooling

/// `[N, C, H, W] -> [N, C]` mean over the spatial plane.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("global_avg_pool", format!("{xs:?} (want rank 4)")));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = Vec::with_capacity(n * c);
    for plane in x.data().chunks_exact(hw) {
        let mut s = T::zero();
        for &v in plane {
            s += v;
        }
        out.push(s * inv);
    }
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(x_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::from_f64(1.0 / hw as f64);
    let mut gx = Tensor::zeros(x_shape);
    for (plane, &g) in gx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
        let v = g * inv;
        for p in plane {
            *p = v;
        }
    }
    gx
}

// -------------------------------------------------------- normalization

pub const NORM_EPS: f64 = 1e-12;

fn row_span(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(shape_err(
            "l2_normalize",
            format!("{shape:?} (want rank 1 or 2)"),
        )),
    }
}

/// Normalize each row of `[N, D]` (or the single row of `[D]`) to unit norm.
pub fn l2_normalize_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = row_span(x.shape())?;
    let eps = T::from_f64(NORM_EPS);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let norm = super::dot(row, row).sqrt();
        if norm < eps {
            return Err(Error::ZeroVector {
                context: "l2_normalize on a (near) zero row".into(),
            });
        }
        let inv = T::one() / norm;
        for v in row {
            *v *= inv;
        }
    }
    Ok(out)
}

pub fn l2_normalize_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (_, d) = row_span(x.shape()).expect("validated in forward");
    let mut gx = Tensor::zeros(x.shape());
    for ((xrow, grow), gxrow) in x
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
        .zip(gx.data_mut().chunks_exact_mut(d))
    {
        let norm = super::dot(xrow, xrow).sqrt();
        let inv = T::one() / norm;
        let g_dot_x = super::dot(xrow, grow) * inv * inv; // <g, x> / norm^2
        for ((gx_v, &g), &xv) in gxrow.iter_mut().zip(grow).zip(xrow) {
            *gx_v = (g - xv * g_dot_x) * inv;
        }
    }
    gx
}

// ------------------------------------------------------ cosine distance

/// `1 - <a, b> / (|a| |b|)` for rank-1 tensors; symmetric, in `[0, 2]`.
pub fn cosine_distance_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 1 || a.shape() != b.shape() {
        return Err(shape_err(
            "cosine_distance",
            format!("{:?} vs {:?} (want equal rank-1)", a.shape(), b.shape()),
        ));
    }
    let na = super::dot(a.data(), a.data()).sqrt();
    let nb = super::dot(b.data(), b.data()).sqrt();
    let eps = T::from_f64(NORM_EPS);
    if na < eps || nb < eps {
        return Err(Error::ZeroVector {
            context: "cosine_distance on a (near) zero vector".into(),
        });
    }
    let s = super::dot(a.data(), b.data()) / (na * nb);
    Ok(Tensor::scalar(T::one() - s))
}

pub fn cosine_distance_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: T,
) -> (Tensor<T>, Tensor<T>) {
    let na = super::dot(a.data(), a.data()).sqrt();
    let nb = super::dot(b.data(), b.data()).sqrt();
    let ab = super::dot(a.data(), b.data());
    let inv_nanb = T::one() / (na * nb);
    // d(1 - s)/da = -(b / (na nb) - ab * a / (na^3 nb))
    let ca = ab / (na * na);
    let cb = ab / (nb * nb);
    let ga = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&av, &bv)| -grad_out * inv_nanb * (bv - ca * av))
        .collect();
    let gb = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&av, &bv)| -grad_out * inv_nanb * (av - cb * bv))
        .collect();
    (
        Tensor {
            shape: a.shape().to_vec(),
            data: ga,
        },
        Tensor {
            shape: b.shape().to_vec(),
            data: gb,
        },
    )
}

// ------------------------------------------------------------ reductions

pub fn sum_all_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = T::zero();
    for &v in x.data() {
        s += v;
    }
    Tensor::scalar(s)
}

pub fn sum_all_backward<T: Real>(x_shape: &[usize], grad_out: T) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    gx.data_mut().fill(grad_out);
    gx
}

pub fn affine_forward<T: Real>(x: &Tensor<T>, a: f64, b: f64) -> Tensor<T> {
    let (ta, tb) = (T::from_f64(a), T::from_f64(b));
    x.map(|v| ta * v + tb)
}

pub fn affine_backward<T: Real>(grad_out: &Tensor<T>, a: f64) -> Tensor<T> {
    let ta = T::from_f64(a);
    grad_out.map(|g| ta * g)
}
