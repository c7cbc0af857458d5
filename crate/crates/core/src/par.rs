//! Data-parallel kernels with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks, whether the chunks
//! run on the rayon pool or in a plain loop, so both paths produce
//! bit-identical results. With the `parallel` feature disabled only the loop
//! exists. With it enabled the pool can still be bypassed at runtime through
//! [`set_parallel`], which the benches use to compare both paths in one build.

use std::mem::MaybeUninit;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Elements per chunk for elementwise kernels.
const MAP_CHUNK: usize = 16 * 1024;
/// Elements per partial sum in reductions.
const SUM_CHUNK: usize = 4096;
/// Output rows per gemm call.
const GEMM_ROWS: usize = 128;

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables the rayon path. No-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `body(chunk_index, chunk)` over `out` split into `chunk`-sized pieces.
fn for_chunks<T, F>(out: &mut [T], chunk: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        body(i, c);
    }
}

/// Allocates `n` values and fills them chunk by chunk without zeroing first.
/// `body` must write every element of the chunk it is given.
fn build<F>(n: usize, chunk: usize, body: F) -> Vec<f64>
where
    F: Fn(usize, &mut [MaybeUninit<f64>]) + Sync + Send,
{
    let mut out = Vec::with_capacity(n);
    for_chunks(&mut out.spare_capacity_mut()[..n], chunk, body);
    // SAFETY: every chunk body initializes all of its elements.
    unsafe { out.set_len(n) };
    out
}

/// `out[i] = f(input[i])`
pub(crate) fn map(input: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    build(input.len(), MAP_CHUNK, |ci, c| {
        let src = &input[ci * MAP_CHUNK..ci * MAP_CHUNK + c.len()];
        for (o, &x) in c.iter_mut().zip(src) {
            o.write(f(x));
        }
    })
}

/// `out[i] = f(a[i], b[i])`
pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    build(a.len(), MAP_CHUNK, |ci, c| {
        let off = ci * MAP_CHUNK;
        let sa = &a[off..off + c.len()];
        let sb = &b[off..off + c.len()];
        for ((o, &x), &y) in c.iter_mut().zip(sa).zip(sb) {
            o.write(f(x, y));
        }
    })
}

/// `acc[i] += scale * src[i]`
pub(crate) fn axpy(acc: &mut [f64], scale: f64, src: &[f64]) {
    debug_assert_eq!(acc.len(), src.len());
    for_chunks(acc, MAP_CHUNK, |ci, c| {
        let off = ci * MAP_CHUNK;
        let s = &src[off..off + c.len()];
        for (o, &x) in c.iter_mut().zip(s) {
            *o += scale * x;
        }
    });
}

/// `out = sum_k coeffs[k] * inputs[k]`, accumulated left to right.
pub(crate) fn lincomb(inputs: &[&[f64]], coeffs: &[f64]) -> Vec<f64> {
    build(inputs[0].len(), MAP_CHUNK, |ci, c| {
        let off = ci * MAP_CHUNK;
        for (j, o) in c.iter_mut().enumerate() {
            let mut s = 0.0;
            for (x, &k) in inputs.iter().zip(coeffs) {
                s += k * x[off + j];
            }
            o.write(s);
        }
    })
}

/// Sum with a fixed chunked association order.
pub(crate) fn sum(values: &[f64]) -> f64 {
    if values.len() <= SUM_CHUNK {
        return values.iter().sum();
    }
    let partials: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            if parallel_enabled() {
                values
                    .par_chunks(SUM_CHUNK)
                    .map(|c| c.iter().sum::<f64>())
                    .collect()
            } else {
                values.chunks(SUM_CHUNK).map(|c| c.iter().sum::<f64>()).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            values.chunks(SUM_CHUNK).map(|c| c.iter().sum::<f64>()).collect()
        }
    };
    partials.iter().sum()
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` storage, read as-is.
    pub fn normal(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Row-major `rows x cols` storage, read as its transpose.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

#[cfg(test)]
/// `c (m x n, row-major) = a (m x k) * b (k x n)` or `c += ...` when `accumulate`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    let block = GEMM_ROWS * n;
    for_chunks(c, block.max(1), |bi, cc| {
        let rows = cc.len() / n;
        // SAFETY: the operand slices cover every index reachable through the
        // given strides for `rows x k` (a) and `k x n` (b), and `cc` is an
        // exclusive `rows x n` row-major block.
        unsafe { block_gemm(bi * GEMM_ROWS, rows, k, n, a, b, beta, cc.as_mut_ptr()) }
    });
}

/// `a (m x k) * b (k x n)` into a new row-major buffer.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(m * n);
    let block = GEMM_ROWS * n;
    for_chunks(&mut out.spare_capacity_mut()[..m * n], block, |bi, cc| {
        let rows = cc.len() / n;
        // SAFETY: as in `gemm`; with beta = 0 the kernel only writes `cc`.
        unsafe { block_gemm(bi * GEMM_ROWS, rows, k, n, a, b, 0.0, cc.as_mut_ptr().cast()) }
    });
    // SAFETY: the row blocks cover the whole buffer and each was written.
    unsafe { out.set_len(m * n) };
    out
}

#[allow(clippy::too_many_arguments)]
unsafe fn block_gemm(row0: usize, rows: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: *mut f64) {
    if k == 0 {
        for i in 0..rows * n {
            let p = c.add(i);
            *p = if beta == 0.0 { 0.0 } else { *p * beta };
        }
        return;
    }
    let a_ptr = a.data.as_ptr().offset(row0 as isize * a.row_stride);
    matrixmultiply::dgemm(
        rows,
        k,
        n,
        1.0,
        a_ptr,
        a.row_stride,
        a.col_stride,
        b.data.as_ptr(),
        b.row_stride,
        b.col_stride,
        beta,
        c,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    #[test]
    fn gemm_matches_naive_across_row_blocks() {
        let (m, k, n) = (300, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, MatRef::normal(&a, k), MatRef::normal(&b, n), &mut c, false);
        assert_eq!(c, naive(m, k, n, &a, &b));
    }

    #[test]
    fn gemm_new_matches_gemm() {
        let (m, k, n) = (260, 4, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, MatRef::normal(&a, k), MatRef::normal(&b, n), &mut c, false);
        assert_eq!(gemm_new(m, k, n, MatRef::normal(&a, k), MatRef::normal(&b, n)), c);
        assert_eq!(gemm_new(3, 0, 2, MatRef::normal(&[], 0), MatRef::normal(&[], 2)), vec![0.0; 6]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a^T (2x3) * b^T (3x2) with a: 3x2, b: 2x3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 2.0, 0.0, 1.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, MatRef::transposed(&a, 2), MatRef::transposed(&b, 3), &mut c, false);
        // a^T = [[1,3,5],[2,4,6]], b^T = [[1,0],[0,1],[2,1]]
        assert_eq!(c, vec![11.0, 8.0, 14.0, 10.0]);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let v: Vec<f64> = (0..100_000).map(|i| (i as f64 * 0.37).sin()).collect();
        set_parallel(false);
        let s0 = sum(&v);
        let m0 = map(&v, f64::tanh);
        set_parallel(true);
        let s1 = sum(&v);
        let m1 = map(&v, f64::tanh);
        assert_eq!(s0.to_bits(), s1.to_bits());
        assert_eq!(m0, m1);
    }
}
