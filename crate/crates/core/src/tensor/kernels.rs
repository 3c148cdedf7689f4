//! Single-threaded dense kernels. Every output element is reduced in a fixed
//! order, so results are bit-reproducible.

use super::Real;

/// Dot product with eight interleaved partial sums combined in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += A·B` where `A[i,p] = a[i·rsa + p·csa]` and `b` is row-major
/// `k×n`. Each output element accumulates its `k` products in ascending `p`,
/// starting from its current value, so blocking never changes results.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Real>(
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let scalar = |c: &mut [T], i: usize, j: usize| {
        let mut acc = c[i * n + j];
        for p in 0..k {
            acc += a[i * rsa + p * csa] * b[p * n + j];
        }
        c[i * n + j] = acc;
    };
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..][..NR]);
            }
            for p in 0..k {
                let brow: &[T] = &b[p * n + j..][..NR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rsa + p * csa];
                    for l in 0..NR {
                        row[l] += av * brow[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..][..NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in i..i + MR {
            for jj in j..n {
                scalar(c, r, jj);
            }
        }
        i += MR;
    }
    for r in i..m {
        for j in 0..n {
            scalar(c, r, j);
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.fill(T::zero());
    gemm_acc(a, k, 1, b, c, m, k, n);
}

/// `c[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(a, 1, k, b, c, k, m, n);
}

/// `c[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm_acc(a, n, 1, &bt, c, m, n, k);
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        // covers full 4×8 blocks, row tails and column tails; the blocked
        // kernel sums in the same order as the naive loop, so equality is exact
        for (m, k, n) in [(5, 7, 3), (8, 5, 16), (9, 13, 19), (1, 1, 1), (4, 64, 8)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![1.0; m * n];
            matmul_into(&a, &b, &mut c, m, k, n);
            assert_eq!(c, want);

            // aᵀ·b with a stored as [k×m]
            let at = transpose(&a, m, k);
            let mut c2 = vec![0.0; m * n];
            matmul_at_b_acc(&at, &b, &mut c2, k, m, n);
            assert_eq!(c2, want);

            // a·bᵀ with b stored as [n×k]
            let bt = transpose(&b, k, n);
            let mut c3 = vec![0.0; m * n];
            matmul_a_bt_acc(&a, &bt, &mut c3, m, k, n);
            assert_eq!(c3, want);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(dot(&a, &a), (1..=11).map(|i| (i * i) as f64).sum::<f64>());
    }
}
