//! Raw numeric kernels shared by the tape ops and the cached decoder.

use super::scalar::Float;

/// Which keys a query row may attend to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnMask {
    /// Query `q` may only see keys `k <= q + (k_len - q_len)`.
    pub causal: bool,
    /// Per-key visibility; `false` keys are excluded (padding).
    pub keys: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self { causal: true, keys: None }
    }

    pub fn keys(visible: Vec<bool>) -> Self {
        Self {
            causal: false,
            keys: Some(visible),
        }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize, q_len: usize, k_len: usize) -> bool {
        if self.causal && k + q_len > q + k_len {
            return false;
        }
        match &self.keys {
            Some(keys) => keys[k],
            None => true,
        }
    }
}

/// `c (+)= op(a) @ op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `ta`, `a` is stored `k x m`; with `tb`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slices were length-checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm(
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

/// Strided view of a row-major matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub fn rows(offset: usize, rs: usize) -> Self {
        Self { offset, rs, cs: 1 }
    }

    /// Transposed view of a row-major block.
    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// `c = alpha * a @ b + beta * c` on strided views; `a` is `m x k`, `b` is
/// `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: Strided,
    b: &[T],
    bv: Strided,
    beta: T,
    c: &mut [T],
    cv: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (av.last(m, k) < a.len() && bv.last(k, n) < b.len()));
    assert!(cv.last(m, n) < c.len());
    // SAFETY: the last addressed element of every view is in bounds (checked
    // above) and `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Masked softmax over the last axis of a `[batch, q_len, k_len]` buffer.
/// Masked entries come out as exactly zero.
pub fn softmax_rows<T: Float>(x: &[T], out: &mut [T], q_len: usize, k_len: usize, mask: &AttnMask) {
    let rows = x.len() / k_len.max(1);
    for r in 0..rows {
        let q = r % q_len.max(1);
        let row = &x[r * k_len..(r + 1) * k_len];
        let dst = &mut out[r * k_len..(r + 1) * k_len];
        let mut max = T::neg_infinity();
        for (k, &v) in row.iter().enumerate() {
            if mask.allows(q, k, q_len, k_len) && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (k, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if mask.allows(q, k, q_len, k_len) {
                let e = (v - max).exp();
                *d = e;
                sum += e;
            } else {
                *d = T::zero();
            }
        }
        if sum > T::zero() {
            let inv = T::one() / sum;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
}

/// RMS normalisation of each `width`-sized row; returns per-row `1/rms`.
pub fn rms_norm_rows<T: Float>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> Vec<T> {
    let width = gain.len();
    let rows = x.len() / width;
    let mut inv = Vec::with_capacity(rows);
    let n = T::of(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        let ir = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in out[r * width..(r + 1) * width].iter_mut().zip(row).zip(gain) {
            *o = v * ir * g;
        }
        inv.push(ir);
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Bucket index for a signed `key - query` offset, log-spaced beyond
/// `num_buckets / 2` exact buckets (per direction when bidirectional).
pub fn relative_position_bucket(relative_position: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets;
    let mut base = 0usize;
    let distance = if bidirectional {
        buckets /= 2;
        if relative_position > 0 {
            base = buckets;
        }
        relative_position.unsigned_abs() as usize
    } else {
        (-relative_position.min(0)) as usize
    };
    let max_exact = buckets / 2;
    if distance < max_exact {
        return base + distance;
    }
    let scaled = (distance as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln() * (buckets - max_exact) as f64;
    let large = max_exact + scaled as usize;
    base + large.min(buckets - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        assert_eq!(c, naive);

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = [0.0f64, 0.0];
        let mut y = [0.0; 2];
        softmax_rows(&x, &mut y, 1, 2, &AttnMask::none());
        assert_eq!(y, [0.5, 0.5]);
    }

    #[test]
    fn causal_mask_zeroes_future_keys() {
        let x = [1.0f64; 9];
        let mut y = [0.0; 9];
        softmax_rows(&x, &mut y, 3, 3, &AttnMask::causal());
        assert_eq!(&y[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&y[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn buckets_match_reference_layout() {
        // exact region then log-spaced, capped at num_buckets - 1
        assert_eq!(relative_position_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_position_bucket(3, true, 32, 128), 19);
        assert_eq!(relative_position_bucket(-3, true, 32, 128), 3);
        assert_eq!(relative_position_bucket(-1000, true, 32, 128), 15);
        assert_eq!(relative_position_bucket(1000, true, 32, 128), 31);
        assert_eq!(relative_position_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(-5, false, 32, 128), 5);
        assert_eq!(relative_position_bucket(-1000, false, 32, 128), 31);
        // 8 exact buckets per direction; distance 8 maps to the first log bucket
        assert_eq!(relative_position_bucket(-8, true, 32, 128), 8);
        assert_eq!(relative_position_bucket(-127, true, 32, 128), 15);
    }
}
