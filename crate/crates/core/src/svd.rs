//! Deterministic singular value decomposition.
//!
//! One-sided (Hestenes) Jacobi in f64 regardless of the element type, with
//! results rounded back into `T`. Conventions:
//!
//! * singular values are sorted nonincreasing; equal values keep ascending
//!   order of the Jacobi column they came from;
//! * the largest-magnitude entry of every column of `U` is positive (the
//!   first such entry on ties), and the matching row of `Vt` is flipped with it;
//! * left vectors of numerically zero singular values are completed to an
//!   orthonormal set by Gram-Schmidt over the standard basis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// `A = U · diag(S) · Vt` with `p = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T> {
    /// `m × p`, orthonormal columns.
    pub u: Tensor<T>,
    /// `p` nonnegative, nonincreasing values.
    pub s: Vec<T>,
    /// `p × n`, orthonormal rows.
    pub vt: Tensor<T>,
}

/// Even split of a rank-`r` truncation: `left = U_r Σ_r^{1/2}`, `right = Σ_r^{1/2} Vt_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPair<T> {
    /// `m × r`
    pub left: Tensor<T>,
    /// `r × n`
    pub right: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rows(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.vt.shape()[1]
    }

    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    /// Sum of squared singular values past the first `r`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.s
            .iter()
            .skip(r)
            .map(|&x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum()
    }

    /// `U · diag(S) · Vt`, accumulated in f64.
    pub fn reconstruct(&self) -> Tensor<T> {
        let (m, n, p) = (self.rows(), self.cols(), self.s.len());
        Tensor::from_fn(vec![m, n], |ix| {
            let mut acc = 0.0f64;
            for k in 0..p {
                acc += self.u.at2(ix[0], k).to_f64_lossy()
                    * self.s[k].to_f64_lossy()
                    * self.vt.at2(k, ix[1]).to_f64_lossy();
            }
            T::from_f64_lossy(acc)
        })
        .expect("svd factors have valid shape")
    }
}

/// Full thin SVD of an `m × n` matrix.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = a.dims2()?;
    if !a.is_finite() {
        return Err(Error::Numeric("svd input contains non-finite entries".into()));
    }
    // Work on a tall matrix W (rows >= cols); for wide inputs W = Aᵀ.
    let transposed = m < n;
    let (rows, cols) = if transposed { (n, m) } else { (m, n) };
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| {
                    let v = if transposed { a.at2(j, i) } else { a.at2(i, j) };
                    v.to_f64_lossy()
                })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    jacobi_sweeps(&mut w, &mut v, rows);

    let sigma: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // Stable: ties keep ascending column index.
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let smax = order.first().map_or(0.0, |&j| sigma[j]);
    let floor = smax * f64::EPSILON * rows.max(cols) as f64;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut s_sorted = Vec::with_capacity(cols);
    let mut degenerate = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        s_sorted.push(sigma[j]);
        right.push(v[j].clone());
        if sigma[j] > floor && sigma[j] > 0.0 {
            left.push(w[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            left.push(Vec::new());
            degenerate.push(slot);
        }
    }
    complete_basis(&mut left, &degenerate, rows);

    // Sign convention on the output U, which is `left` unless transposed.
    for j in 0..cols {
        let anchor = if transposed { &right[j] } else { &left[j] };
        if anchor[argmax_abs(anchor)] < 0.0 {
            left[j].iter_mut().for_each(|x| *x = -*x);
            right[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let (u_cols, vt_rows) = if transposed { (&right, &left) } else { (&left, &right) };
    let p = cols;
    let u = Tensor::from_fn(vec![m, p], |ix| T::from_f64_lossy(u_cols[ix[1]][ix[0]]))?;
    let vt = Tensor::from_fn(vec![p, n], |ix| T::from_f64_lossy(vt_rows[ix[0]][ix[1]]))?;
    let s = s_sorted.into_iter().map(T::from_f64_lossy).collect();
    Ok(SvdResult { u, s, vt })
}

/// Rank-`r` truncation with the singular values split evenly between factors.
pub fn truncate_even_split<T: Scalar>(s: &SvdResult<T>, r: usize) -> Result<FactorizedPair<T>> {
    let p = s.rank_capacity();
    if r == 0 || r > p {
        return Err(Error::Rank { requested: r, max: p });
    }
    let (m, n) = (s.rows(), s.cols());
    let root: Vec<f64> = s.s[..r].iter().map(|x| x.to_f64_lossy().sqrt()).collect();
    let left = Tensor::from_fn(vec![m, r], |ix| {
        T::from_f64_lossy(s.u.at2(ix[0], ix[1]).to_f64_lossy() * root[ix[1]])
    })?;
    let right = Tensor::from_fn(vec![r, n], |ix| {
        T::from_f64_lossy(root[ix[0]] * s.vt.at2(ix[0], ix[1]).to_f64_lossy())
    })?;
    Ok(FactorizedPair { left, right })
}

fn jacobi_sweeps(w: &mut [Vec<f64>], v: &mut [Vec<f64>], rows: usize) {
    let cols = w.len();
    let tol = f64::EPSILON * rows as f64;
    let mut norms: Vec<f64> = w.iter().map(|c| dot(c, c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w[p], &w[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wp, wq) = pair_mut(w, p, q);
                rotate(wp, wq, c, s);
                let (vp, vq) = pair_mut(v, p, q);
                rotate(vp, vq, c, s);
                norms[p] = dot(&w[p], &w[p]);
                norms[q] = dot(&w[q], &w[q]);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn pair_mut<X>(v: &mut [X], p: usize, q: usize) -> (&mut X, &mut X) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn argmax_abs(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > x[best].abs() {
            best = i;
        }
    }
    best
}

/// Fills the empty slots of `basis` with unit vectors orthogonal to every
/// filled slot, trying `e_0, e_1, ...` in order.
fn complete_basis(basis: &mut [Vec<f64>], empty: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in empty {
        loop {
            assert!(candidate < dim, "orthonormal completion ran out of candidates");
            let mut x = vec![0.0; dim];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in basis.iter().filter(|b| !b.is_empty()) {
                    let proj = dot(b, &x);
                    x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= proj * bi);
                }
            }
            let norm = dot(&x, &x).sqrt();
            if norm > 0.5 {
                x.iter_mut().for_each(|xi| *xi /= norm);
                basis[slot] = x;
                break;
            }
        }
    }
}
