//! Dense f64 matrix kernels.
//!
//! All kernels accumulate into `c` (callers zero fresh buffers). Row
//! parallelism splits the output into disjoint row blocks, so the
//! per-element summation order is independent of the thread count and
//! results stay bitwise deterministic.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Number of worker threads for intra-op parallelism.
///
/// Resolution order: value set through [`set_threads`], else the
/// `GENSHIN_THREADS` environment variable, else 1.
pub fn threads() -> usize {
    let cur = THREADS.load(Ordering::Relaxed);
    if cur != 0 {
        return cur;
    }
    let n = std::env::var("GENSHIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    THREADS.store(n, Ordering::Relaxed);
    n
}

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Runs `body` on disjoint row ranges `[lo, hi)` covering `0..m`.
fn par_rows<F: Fn(usize, usize, &mut [f64]) + Sync>(m: usize, row_width: usize, c: &mut [f64], body: F) {
    let nt = threads().min(m.max(1));
    if nt <= 1 || m < 2 * nt {
        body(0, m, c);
        return;
    }
    let chunk_rows = m.div_ceil(nt);
    std::thread::scope(|scope| {
        let mut rest = c;
        let mut lo = 0;
        while lo < m {
            let hi = (lo + chunk_rows).min(m);
            let (head, tail) = rest.split_at_mut((hi - lo) * row_width);
            rest = tail;
            let body = &body;
            scope.spawn(move || body(lo, hi, head));
            lo = hi;
        }
    });
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par_rows(m, n, c, |lo, hi, cc| {
        for i in lo..hi {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut cc[(i - lo) * n..(i - lo + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
    });
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (dot products of rows)
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par_rows(m, n, c, |lo, hi, cc| {
        for i in lo..hi {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut cc[(i - lo) * n..(i - lo + 1) * n];
            for (j, cj) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    s += x * y;
                }
                *cj += s;
            }
        }
    });
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par_rows(m, n, c, |lo, hi, cc| {
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in lo..hi {
                let api = a[p * m + i];
                if api == 0.0 {
                    continue;
                }
                let crow = &mut cc[(i - lo) * n..(i - lo + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += api * bj;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (m, k, n) = (64, 33, 29);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.13).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();

        set_threads(1);
        let mut c1 = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c1, m, k, n);

        set_threads(4);
        let mut c4 = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c4, m, k, n);
        set_threads(1);

        assert_eq!(c1, c4);
    }
}
