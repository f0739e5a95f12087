//! Matrix kernels behind conv2d and matmul.
//!
//! All loops accumulate in a fixed order, so results are bit-reproducible
//! run to run and independent of worker count. The axpy-style inner loops
//! vectorize without float reassociation; `dot` keeps eight independent
//! lanes for the same reason.

use super::Real;

/// `c[m][n] += sum_k a[m][k] * b[k][n]`; all matrices row-major.
pub fn gemm_nn<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let a_row = &a[mi * k..(mi + 1) * k];
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for (ki, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[ki * n..(ki + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m][n] += sum_k a[k][m] * b[k][n]` (first operand used transposed).
pub fn gemm_tn<T: Real>(c: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for ki in 0..k {
        let a_row = &a[ki * m..(ki + 1) * m];
        let b_row = &b[ki * n..(ki + 1) * n];
        for (mi, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[mi * n..(mi + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m][n] += sum_k a[m][k] * b[n][k]` (second operand used transposed).
pub fn gemm_nt<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for mi in 0..m {
        let a_row = &a[mi * k..(mi + 1) * k];
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for (ni, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[ni * k..(ni + 1) * k];
            *cv += dot(a_row, b_row);
        }
    }
}

/// Dot product with eight independent accumulator lanes.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let off = c * LANES;
        for l in 0..LANES {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for mi in 0..m {
            for ki in 0..k {
                for ni in 0..n {
                    c[mi * n + ni] += a[mi * k + ki] * b[ki * n + ni];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&mut c, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored transposed: at[k][m]
        let mut at = vec![0.0; k * m];
        for mi in 0..m {
            for ki in 0..k {
                at[ki * m + mi] = a[mi * k + ki];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(&mut c, &at, &b, k, m, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b stored transposed: bt[n][k]
        let mut bt = vec![0.0; n * k];
        for ki in 0..k {
            for ni in 0..n {
                bt[ni * k + ki] = b[ki * n + ni];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(&mut c, &a, &bt, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        for len in [0usize, 1, 7, 8, 9, 31] {
            let a: Vec<f64> = (0..len).map(|i| i as f64 + 1.0).collect();
            let b: Vec<f64> = (0..len).map(|i| 2.0 * i as f64 - 3.0).collect();
            let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - want).abs() < 1e-9, "len {len}");
        }
    }
}
