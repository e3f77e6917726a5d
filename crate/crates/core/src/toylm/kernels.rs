//! Dense kernels over row-major slices, shared by the forward and backward
//! passes. Weight matrices are stored `(n_out, n_in)`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the toy model: `f32` for training and
/// inference, `f64` for gradient checks.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` for strided `(m, k)`, `(k, n)` and
    /// `(m, n)` matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), beta: Self, c: &mut [Self], ldc: usize);
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rs: isize, cs: isize, rows: usize, cols: usize| {
                    (rows.max(1) - 1) * rs as usize + (cols.max(1) - 1) * cs as usize + 1
                };
                assert!(k == 0 || a.len() >= span(rsa, csa, m, k), "gemm: a too short");
                assert!(k == 0 || b.len() >= span(rsb, csb, k, n), "gemm: b too short");
                assert!(c.len() >= (m - 1) * ldc + n, "gemm: c too short");
                // SAFETY: the asserts above bound every index the routine
                // touches inside the three slices.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable")
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub fn add_into<T: Scalar>(y: &mut [T], x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + xi;
    }
}

/// `out[t, o] = bias[o] + sum_i inp[t, i] * w[o, i]`
pub fn matmul_forward<T: Scalar>(out: &mut [T], inp: &[T], w: &[T], bias: Option<&[T]>, n_in: usize, n_out: usize) {
    let rows = out.len() / n_out;
    match bias {
        Some(b) => out.chunks_exact_mut(n_out).for_each(|r| r.copy_from_slice(b)),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    T::gemm(rows, n_in, n_out, inp, (n_in as isize, 1), w, (1, n_in as isize), T::one(), out, n_out);
}

/// Accumulates input, weight and bias gradients of [`matmul_forward`].
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    dinp: &mut [T],
    dw: &mut [T],
    dbias: Option<&mut [T]>,
    dout: &[T],
    inp: &[T],
    w: &[T],
    n_in: usize,
    n_out: usize,
) {
    let rows = dout.len() / n_out;
    T::gemm(rows, n_out, n_in, dout, (n_out as isize, 1), w, (n_in as isize, 1), T::one(), dinp, n_in);
    T::gemm(n_out, rows, n_in, dout, (1, n_out as isize), inp, (n_in as isize, 1), T::one(), dw, n_in);
    if let Some(db) = dbias {
        for row in dout.chunks_exact(n_out) {
            add_into(db, row);
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization; records per-row mean and reciprocal std.
pub fn layernorm_forward<T: Scalar>(
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    inp: &[T],
    weight: &[T],
    bias: &[T],
    width: usize,
) {
    let n = lit::<T>(width as f64);
    let eps = lit::<T>(LN_EPS);
    for (t, (out_row, x)) in out.chunks_exact_mut(width).zip(inp.chunks_exact(width)).enumerate() {
        let m = x.iter().copied().sum::<T>() / n;
        let v = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<T>() / n;
        let r = T::one() / (v + eps).sqrt();
        for i in 0..width {
            out_row[i] = (x[i] - m) * r * weight[i] + bias[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dinp: &mut [T],
    dweight: &mut [T],
    dbias: &mut [T],
    dout: &[T],
    inp: &[T],
    weight: &[T],
    mean: &[T],
    rstd: &[T],
    width: usize,
) {
    let n = lit::<T>(width as f64);
    for (t, ((dx, dy), x)) in dinp
        .chunks_exact_mut(width)
        .zip(dout.chunks_exact(width))
        .zip(inp.chunks_exact(width))
        .enumerate()
    {
        let (m, r) = (mean[t], rstd[t]);
        let mut dnorm_mean = T::zero();
        let mut dnorm_norm_mean = T::zero();
        for i in 0..width {
            let norm = (x[i] - m) * r;
            let dnorm = weight[i] * dy[i];
            dnorm_mean = dnorm_mean + dnorm;
            dnorm_norm_mean = dnorm_norm_mean + dnorm * norm;
        }
        dnorm_mean = dnorm_mean / n;
        dnorm_norm_mean = dnorm_norm_mean / n;
        for i in 0..width {
            let norm = (x[i] - m) * r;
            let dnorm = weight[i] * dy[i];
            dbias[i] = dbias[i] + dy[i];
            dweight[i] = dweight[i] + norm * dy[i];
            dx[i] = dx[i] + (dnorm - dnorm_mean - norm * dnorm_norm_mean) * r;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu_forward<T: Scalar>(out: &mut [T], inp: &[T]) {
    let (half, scale, c) = (lit::<T>(0.5), lit::<T>(GELU_SCALE), lit::<T>(0.044715));
    for (o, &x) in out.iter_mut().zip(inp) {
        *o = half * x * (T::one() + (scale * (x + c * x * x * x)).tanh());
    }
}

pub fn gelu_backward<T: Scalar>(dinp: &mut [T], inp: &[T], dout: &[T]) {
    let (half, scale, c) = (lit::<T>(0.5), lit::<T>(GELU_SCALE), lit::<T>(0.044715));
    let c3 = lit::<T>(3.0 * 0.044715);
    for ((d, &x), &g) in dinp.iter_mut().zip(inp).zip(dout) {
        let u = scale * (x + c * x * x * x);
        let th = u.tanh();
        let sech2 = T::one() - th * th;
        let local = half * (T::one() + th) + half * x * sech2 * scale * (T::one() + c3 * x * x);
        *d = *d + local * g;
    }
}

/// Causal multi-head self-attention over a packed `(seq, 3 * width)` q/k/v
/// buffer. `att` receives the `(heads, seq, seq)` probabilities (upper
/// triangle left zero) and `out` the `(seq, width)` mixed values.
pub fn attention_forward<T: Scalar>(out: &mut [T], att: &mut [T], qkv: &[T], seq: usize, width: usize, heads: usize) {
    let hs = width / heads;
    let scale = T::one() / lit::<T>(hs as f64).sqrt();
    let stride = 3 * width;
    out.iter_mut().for_each(|v| *v = T::zero());
    for h in 0..heads {
        for t in 0..seq {
            let q = &qkv[t * stride + h * hs..t * stride + (h + 1) * hs];
            let row = &mut att[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let mut max = T::neg_infinity();
            for (t2, r) in row.iter_mut().enumerate().take(t + 1) {
                let k = &qkv[t2 * stride + width + h * hs..t2 * stride + width + (h + 1) * hs];
                *r = dot(q, k) * scale;
                if *r > max {
                    max = *r;
                }
            }
            let mut sum = T::zero();
            for r in row.iter_mut().take(t + 1) {
                *r = (*r - max).exp();
                sum = sum + *r;
            }
            let inv = T::one() / sum;
            for r in row.iter_mut().take(t + 1) {
                *r = *r * inv;
            }
            for r in row.iter_mut().skip(t + 1) {
                *r = T::zero();
            }
            let o = &mut out[t * width + h * hs..t * width + (h + 1) * hs];
            for t2 in 0..=t {
                let v = &qkv[t2 * stride + 2 * width + h * hs..t2 * stride + 2 * width + (h + 1) * hs];
                axpy(o, row[t2], v);
            }
        }
    }
}

pub fn attention_backward<T: Scalar>(
    dqkv: &mut [T],
    dout: &[T],
    qkv: &[T],
    att: &[T],
    seq: usize,
    width: usize,
    heads: usize,
) {
    let hs = width / heads;
    let scale = T::one() / lit::<T>(hs as f64).sqrt();
    let stride = 3 * width;
    let mut datt = vec![T::zero(); seq];
    let mut dq = vec![T::zero(); hs];
    for h in 0..heads {
        for t in 0..seq {
            let row = &att[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let dy = &dout[t * width + h * hs..t * width + (h + 1) * hs];
            for t2 in 0..=t {
                let voff = t2 * stride + 2 * width + h * hs;
                datt[t2] = dot(dy, &qkv[voff..voff + hs]);
                axpy(&mut dqkv[voff..voff + hs], row[t2], dy);
            }
            let weighted: T = (0..=t).map(|t2| row[t2] * datt[t2]).sum();
            dq.iter_mut().for_each(|v| *v = T::zero());
            let qoff = t * stride + h * hs;
            for t2 in 0..=t {
                let dpre = row[t2] * (datt[t2] - weighted) * scale;
                let koff = t2 * stride + width + h * hs;
                axpy(&mut dq, dpre, &qkv[koff..koff + hs]);
                axpy(&mut dqkv[koff..koff + hs], dpre, &qkv[qoff..qoff + hs]);
            }
            add_into(&mut dqkv[qoff..qoff + hs], &dq);
        }
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
