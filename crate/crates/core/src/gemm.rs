//! Matrix multiply with a fixed accumulation order.
//!
//! Every output element is `sum_{k ascending} a[i,k] * b[k,j]`, accumulated in
//! the element type starting from zero, with the optional initial value added
//! once at the end. Blocking happens only over `i` and `j`, so results are
//! bit-identical to a plain triple loop and reproducible across runs and
//! thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows handed to one rayon task.
const ROW_BLOCK: usize = 16;
/// Below this many multiply-adds the call stays on the current thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// FLOPs of an `m×k` by `k×n` product, counted as `2mkn`.
#[inline]
pub fn gemm_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

/// `C = A·B (+ C_init)` on matrices.
pub fn gemm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c_init: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "gemm inner dimensions disagree: {m}×{k} by {k2}×{n}"
        )));
    }
    let mut out = match c_init {
        Some(c) => {
            if c.shape() != [m, n] {
                return Err(Error::shape(format!(
                    "gemm initial value has shape {:?}, expected [{m}, {n}]",
                    c.shape()
                )));
            }
            c.clone()
        }
        None => Tensor::zeros(vec![m, n])?,
    };
    gemm_slices(m, k, n, a.data(), b.data(), out.data_mut(), c_init.is_some());
    Ok(out)
}

/// `x·W` where `x` holds `rows` row-major rows of width `W.rows`.
pub fn matmul_rows<T: Scalar>(rows: usize, x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = w.dims2().expect("weight is a matrix");
    let mut out = vec![T::zero(); rows * n];
    gemm_slices(rows, k, n, x, w.data(), &mut out, false);
    out
}

/// Adds `bias` to every row of `out`.
pub fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Row-major transpose of a `rows×cols` slice.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
    dst
}

/// Raw-slice GEMM. `b` is `k×n` row-major. When `accumulate` is set the
/// existing contents of `out` are added after the dot product.
pub fn gemm_slices<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T], accumulate: bool) {
    let bt = transpose(k, n, b);
    gemm_bt(m, k, n, a, &bt, out, accumulate);
}

/// GEMM against a pre-transposed right operand `bt` (`n×k` row-major).
pub fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], bt: &[T], out: &mut [T], accumulate: bool) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(bt.len(), n * k, "gemm rhs length");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if m * n * k >= PAR_THRESHOLD && m > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(o, a_blk)| rows_kernel(k, n, a_blk, bt, o, accumulate));
    } else {
        rows_kernel(k, n, a, bt, out, accumulate);
    }
}

fn rows_kernel<T: Scalar>(k: usize, n: usize, a: &[T], bt: &[T], out: &mut [T], accumulate: bool) {
    for (a_row, o_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
        let mut j = 0;
        // Four independent accumulators; each keeps ascending-k order.
        while j + 4 <= n {
            let b0 = &bt[j * k..(j + 1) * k];
            let b1 = &bt[(j + 1) * k..(j + 2) * k];
            let b2 = &bt[(j + 2) * k..(j + 3) * k];
            let b3 = &bt[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
            for p in 0..k {
                let x = a_row[p];
                s0 += x * b0[p];
                s1 += x * b1[p];
                s2 += x * b2[p];
                s3 += x * b3[p];
            }
            store(&mut o_row[j], s0, accumulate);
            store(&mut o_row[j + 1], s1, accumulate);
            store(&mut o_row[j + 2], s2, accumulate);
            store(&mut o_row[j + 3], s3, accumulate);
            j += 4;
        }
        while j < n {
            let bj = &bt[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s += a_row[p] * bj[p];
            }
            store(&mut o_row[j], s, accumulate);
            j += 1;
        }
    }
}

#[inline(always)]
fn store<T: Scalar>(slot: &mut T, dot: T, accumulate: bool) {
    *slot = if accumulate { dot + *slot } else { dot };
}
