//! Slice-level numeric kernels shared by the tensor ops and the tape.
//!
//! Matrix products go through `matrixmultiply`'s blocked `dgemm`.
//!
//! Every output row depends only on its own input row and on the shared
//! right-hand operand, with a fixed summation order. That keeps per-image
//! results independent of batch composition, which the isolation and
//! reduction properties of the denoiser rely on.

use crate::par;

/// Rows per parallel work item for the matmul kernels.
const ROW_CHUNK: usize = 64;

/// `out = a * b` through `dgemm` with explicit strides, split into row
/// chunks when parallelism is on. `(rsa, csa)` and `(rsb, csb)` are the row
/// and column strides of the logical `[m,k]` and `[k,n]` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let run = |row0: usize, rows: usize, chunk: &mut [f64]| {
        // SAFETY: the operand slices cover `rows x k` and `k x n` elements at
        // the given strides, and `chunk` holds exactly `rows x n` outputs.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if par::parallel_enabled() && m > ROW_CHUNK {
        par::for_each_chunk_mut(&mut out, ROW_CHUNK * n, |ci, chunk| {
            run(ci * ROW_CHUNK, chunk.len() / n, chunk)
        });
    } else {
        run(0, m, &mut out);
    }
    out
}

/// `out[m,n] = a[m,k] * b[k,n]`, all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm(a, k, 1, b, n, 1, m, k, n)
}

/// `out[m,n] = a[m,k] * b[n,k]^T`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    gemm(a, k, 1, b, 1, k, m, k, n)
}

/// `out[k,n] = a[m,k]^T * b[m,n]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    gemm(a, 1, k, b, n, 1, k, m, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax of one row (max subtracted first).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}
