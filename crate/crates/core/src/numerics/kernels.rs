//! Slice-level kernels shared by the tape and the incremental decoder, so both
//! paths run identical arithmetic.

use super::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a'·b' + beta·c` where `a'` is `a` (m×k) or `aᵀ` when `a_t` (stored k×m),
/// and `b'` is `b` (k×n) or `bᵀ` when `b_t` (stored n×k).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe row-major m×k, k×n and m×n
    // views (or their transposes) that stay within the slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

const GELU_A: f64 = 0.044715;

fn gelu_inner<T: Real>(x: T) -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt()) * (x + T::from_f64(GELU_A) * x * x * x)
}

/// GPT-2 style tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    gelu_with_tanh(x).0
}

/// GELU together with the inner tanh, which the derivative reuses.
pub fn gelu_with_tanh<T: Real>(x: T) -> (T, T) {
    let t = gelu_inner(x).tanh();
    (T::from_f64(0.5) * x * (T::one() + t), t)
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    gelu_grad_from_tanh(x, gelu_inner(x).tanh())
}

/// Derivative of GELU at `x` given `t = tanh(inner(x))`.
pub fn gelu_grad_from_tanh<T: Real>(x: T, t: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let dinner = c * (T::one() + T::from_f64(3.0) * T::from_f64(GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Normalizes each row of `x` (rows×cols) into `out`, returning per-row
/// `(mean, 1/std)` pairs flattened.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
) -> Vec<T> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(cols as f64);
    let mut stats = Vec::with_capacity(2 * x.len() / cols.max(1));
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push(mean);
        stats.push(rstd);
    }
    stats
}

/// In-place numerically stable softmax over a contiguous slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of a logit row, computed in f64. The arg-max term is split off
/// so `ln(1 + rest)` keeps full precision when one logit dominates.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let (arg, max) = logits
        .iter()
        .map(|v| v.as_f64())
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v.as_f64() - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    logits.iter().map(|v| (v.as_f64() - max) - log_norm).collect()
}
