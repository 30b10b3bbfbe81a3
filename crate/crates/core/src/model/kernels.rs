//! Forward and backward kernels over flat row-major buffers.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the model. Implemented for `f32` (training)
/// and `f64` (gradient checks).
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]` on row-major buffers. With `ta` the
/// buffer `a` holds a `k x m` matrix; with `tb` the buffer `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    c: &mut [T], a: &[T], b: &[T],
    m: usize, k: usize, n: usize,
    ta: bool, tb: bool, accumulate: bool,
) {
    assert_eq!(c.len(), m * n, "output shape");
    assert_eq!(a.len(), m * k, "left operand shape");
    assert_eq!(b.len(), k * n, "right operand shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    // SAFETY: the asserts above pin every buffer to its matrix extent.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[N,oc] = inp[N,ic] * w[ic,oc] + bias`.
pub fn linear_forward<T: Real>(out: &mut [T], inp: &[T], w: &[T], bias: &[T], rows: usize, ic: usize, oc: usize) {
    for row in out.chunks_exact_mut(oc) {
        row.copy_from_slice(bias);
    }
    matmul(out, inp, w, rows, ic, oc, false, false, true);
}

/// Accumulates input, weight and bias gradients of [`linear_forward`].
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dinp: &mut [T], dw: &mut [T], dbias: &mut [T],
    dout: &[T], inp: &[T], w: &[T],
    rows: usize, ic: usize, oc: usize,
) {
    matmul(dinp, dout, w, rows, oc, ic, false, true, true);
    matmul(dw, inp, dout, ic, rows, oc, true, false, true);
    for row in dout.chunks_exact(oc) {
        for (db, &d) in dbias.iter_mut().zip(row) {
            *db += d;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Statistics are accumulated in f64.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_forward<T: Real>(
    out: &mut [T], mean: &mut [T], rstd: &mut [T],
    inp: &[T], gain: &[T], bias: &[T], c: usize,
) {
    for (r, (x, o)) in inp.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
        let m = x.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        let (m_t, s_t) = (T::of(m), T::of(s));
        for i in 0..c {
            o[i] = (x[i] - m_t) * s_t * gain[i] + bias[i];
        }
        mean[r] = m_t;
        rstd[r] = s_t;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dinp: &mut [T], dgain: &mut [T], dbias: &mut [T],
    dout: &[T], inp: &[T], gain: &[T], mean: &[T], rstd: &[T], c: usize,
) {
    let cf = c as f64;
    for (r, ((dx, x), dy)) in dinp
        .chunks_exact_mut(c)
        .zip(inp.chunks_exact(c))
        .zip(dout.chunks_exact(c))
        .enumerate()
    {
        let (m, s) = (mean[r], rstd[r]);
        let mut dnorm_mean = 0.0f64;
        let mut dnorm_norm_mean = 0.0f64;
        for i in 0..c {
            let norm = ((x[i] - m) * s).f64();
            let dnorm = (dy[i] * gain[i]).f64();
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= cf;
        dnorm_norm_mean /= cf;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = dy[i] * gain[i];
            dbias[i] += dy[i];
            dgain[i] += norm * dy[i];
            dx[i] += (dnorm - T::of(dnorm_mean) - norm * T::of(dnorm_norm_mean)) * s;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu_forward<T: Real>(out: &mut [T], inp: &[T]) {
    let (k, a, half) = (T::of(GELU_SCALE), T::of(0.044715), T::of(0.5));
    for (o, &x) in out.iter_mut().zip(inp) {
        let u = k * (x + a * x * x * x);
        *o = half * x * (T::one() + u.tanh());
    }
}

pub fn gelu_backward<T: Real>(dinp: &mut [T], inp: &[T], dout: &[T]) {
    let (k, a, half) = (T::of(GELU_SCALE), T::of(0.044715), T::of(0.5));
    let three = T::of(3.0);
    for ((d, &x), &g) in dinp.iter_mut().zip(inp).zip(dout) {
        let u = k * (x + a * x * x * x);
        let t = u.tanh();
        let sech2 = T::one() - t * t;
        let du = k * (T::one() + three * a * x * x);
        *d += g * (half * (T::one() + t) + half * x * sech2 * du);
    }
}

/// Copies head `h` of the q, k or v section (`part` 0, 1, 2) of one batch
/// row's `[T, 3C]` qkv block into a contiguous `[T, hd]` buffer.
pub fn gather_head<T: Real>(dst: &mut [T], qkv: &[T], seq: usize, c: usize, hd: usize, part: usize, h: usize) {
    for t in 0..seq {
        let src = &qkv[t * 3 * c + part * c + h * hd..][..hd];
        dst[t * hd..(t + 1) * hd].copy_from_slice(src);
    }
}

/// Adds a `[T, hd]` head buffer back into the matching qkv slots.
pub fn scatter_head_add<T: Real>(qkv: &mut [T], src: &[T], seq: usize, c: usize, hd: usize, part: usize, h: usize) {
    for t in 0..seq {
        let dst = &mut qkv[t * 3 * c + part * c + h * hd..][..hd];
        for (d, &s) in dst.iter_mut().zip(&src[t * hd..(t + 1) * hd]) {
            *d += s;
        }
    }
}

/// Causal, key-masked softmax of `scores[T,T]` into `probs`. Rows with no
/// visible key become all zeros.
pub fn masked_softmax<T: Real>(probs: &mut [T], scores: &[T], key_mask: &[u8], seq: usize) {
    for t in 0..seq {
        let row = &scores[t * seq..(t + 1) * seq];
        let out = &mut probs[t * seq..(t + 1) * seq];
        out.fill(T::zero());
        let visible = |s: usize| s <= t && key_mask[s] != 0;
        let mut max = f64::NEG_INFINITY;
        for s in (0..=t).filter(|&s| visible(s)) {
            max = max.max(row[s].f64());
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0f64;
        for s in (0..=t).filter(|&s| visible(s)) {
            let e = (row[s].f64() - max).exp();
            out[s] = T::of(e);
            sum += e;
        }
        let inv = T::of(1.0 / sum);
        for v in out[..=t].iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise log-softmax in f64.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}
