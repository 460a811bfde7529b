//! Singular value decomposition by one-sided Jacobi rotations.
//!
//! Always runs in f64 regardless of the tensor element type. Output signs are
//! fixed so that the largest-magnitude entry of every left singular vector is
//! positive, which makes the decomposition a deterministic function of its
//! input.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Truncated SVD `m ~ u * diag(s) * vt`.
#[derive(Clone, Debug)]
pub struct SvdResult<T> {
    /// `rows x r`, orthonormal columns.
    pub u: Tensor<T>,
    /// Non-increasing, non-negative singular values.
    pub s: Vec<T>,
    /// `r x cols`, orthonormal rows.
    pub vt: Tensor<T>,
    /// Sum of squares of the singular values beyond `r`.
    pub discarded_sq: f64,
    /// Numerical rank of the input.
    pub numerical_rank: usize,
}

/// Full thin SVD in f64, row-major factors.
#[derive(Clone, Debug)]
pub(crate) struct FullSvd {
    pub rows: usize,
    pub cols: usize,
    /// `rows x k`, `k = min(rows, cols)`.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// `k x cols`.
    pub vt: Vec<f64>,
}

impl FullSvd {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// Singular values above `max(rows, cols) * eps * s_max`.
    pub fn numerical_rank(&self) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        let tol = self.rows.max(self.cols) as f64 * f64::EPSILON * smax;
        self.s.iter().filter(|&&v| v > tol).count()
    }

    pub fn tail_sq(&self, r: usize) -> f64 {
        self.s[r.min(self.k())..].iter().map(|v| v * v).sum()
    }

    /// First `r` columns of `u`, row-major `rows x r`.
    pub fn u_cols(&self, r: usize) -> Vec<f64> {
        let k = self.k();
        let mut out = Vec::with_capacity(self.rows * r);
        for i in 0..self.rows {
            out.extend_from_slice(&self.u[i * k..i * k + r]);
        }
        out
    }

    /// First `r` rows of `vt`, row-major `r x cols`.
    pub fn vt_rows(&self, r: usize) -> &[f64] {
        &self.vt[..r * self.cols]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on the columns of a tall `m x n` matrix (`m >= n`).
///
/// `cols` holds the matrix column-major and is overwritten by `U * diag(s)`;
/// returns `V` column-major (`n` columns of length `n`).
fn jacobi_columns(m: usize, n: usize, cols: &mut [f64]) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = cols.split_at_mut(q * m);
                let ap = &mut head[p * m..(p + 1) * m];
                let aq = &mut tail[..m];
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                let gamma = dot(ap, aq);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (vh, vt) = v.split_at_mut(q * n);
                let vp = &mut vh[p * n..(p + 1) * n];
                let vq = &mut vt[..n];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

/// Extends a set of orthonormal columns (column-major, length `m`) to cover
/// the slots in `missing` by Gram-Schmidt against unit vectors.
fn complete_basis(m: usize, u: &mut [f64], filled: &[bool]) {
    let k = filled.len();
    let mut done: Vec<usize> = (0..k).filter(|&j| filled[j]).collect();
    let mut candidate = 0usize;
    for j in 0..k {
        if filled[j] {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for &d in &done {
                    let col = &u[d * m..(d + 1) * m];
                    let proj = dot(col, &e);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = libm::sqrt(dot(&e, &e));
            if norm > 1e-6 {
                for (slot, x) in u[j * m..(j + 1) * m].iter_mut().zip(&e) {
                    *slot = x / norm;
                }
                done.push(j);
                break;
            }
        }
    }
}

/// Full thin SVD of a row-major `rows x cols` f64 matrix.
pub(crate) fn svd_full(rows: usize, cols: usize, a: &[f64]) -> Result<FullSvd> {
    if a.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "svd input contains non-finite entries");
    }
    let transposed = rows < cols;
    let (m, n) = if transposed { (cols, rows) } else { (rows, cols) };
    // column-major copy of the tall matrix
    let mut work = vec![0.0; m * n];
    for i in 0..rows {
        for j in 0..cols {
            let v = a[i * cols + j];
            if transposed {
                // tall = a^T: column i of the tall matrix is row i of a
                work[i * m + j] = v;
            } else {
                work[j * m + i] = v;
            }
        }
    }
    let v = jacobi_columns(m, n, &mut work);

    let norms: Vec<f64> = (0..n).map(|j| libm::sqrt(dot(&work[j * m..(j + 1) * m], &work[j * m..(j + 1) * m]))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = m as f64 * f64::EPSILON * smax;

    // tall-side left vectors (column-major m x n) and right vectors (column-major n x n)
    let mut left = vec![0.0; m * n];
    let mut right = vec![0.0; n * n];
    let mut filled = vec![false; n];
    for (slot, &j) in order.iter().enumerate() {
        right[slot * n..(slot + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
        if s[slot] > tol && s[slot] > 0.0 {
            for (dst, src) in left[slot * m..(slot + 1) * m].iter_mut().zip(&work[j * m..(j + 1) * m]) {
                *dst = src / s[slot];
            }
            filled[slot] = true;
        }
    }
    if filled.iter().any(|f| !f) {
        complete_basis(m, &mut left, &filled);
    }

    // Map back: for a = tall, U = left, V = right; for a = tall^T, U = right, V = left.
    let k = n;
    let (u_cm, u_len, v_cm, v_len) = if transposed { (&right, n, &left, m) } else { (&left, m, &right, n) };
    let mut u = vec![0.0; rows * k];
    let mut vt = vec![0.0; k * cols];
    debug_assert_eq!(u_len, rows);
    debug_assert_eq!(v_len, cols);
    for r in 0..k {
        let ucol = &u_cm[r * u_len..(r + 1) * u_len];
        let vcol = &v_cm[r * v_len..(r + 1) * v_len];
        // sign: largest-magnitude entry of the left vector positive (first wins ties)
        let mut best = 0;
        for i in 1..rows {
            if ucol[i].abs() > ucol[best].abs() {
                best = i;
            }
        }
        let sign = if ucol[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[i * k + r] = sign * ucol[i];
        }
        for j in 0..cols {
            vt[r * cols + j] = sign * vcol[j];
        }
    }
    Ok(FullSvd { rows, cols, u, s, vt })
}

/// Best rank-`max_rank` approximation of a matrix.
///
/// Returns `r = min(max_rank, rows, cols)` singular triplets; `discarded_sq`
/// is the squared Frobenius norm of everything dropped.
pub fn truncated_svd<T: Scalar>(m: &Tensor<T>, max_rank: usize) -> Result<SvdResult<T>> {
    if m.rank() != 2 {
        bail!(Shape, "truncated_svd needs a matrix, got shape {:?}", m.shape());
    }
    if max_rank == 0 {
        bail!(Domain, "max_rank must be at least 1");
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let full = svd_full(rows, cols, &a)?;
    let r = max_rank.min(full.k());
    let u = Tensor::new([rows, r], full.u_cols(r).into_iter().map(T::from_f64).collect())?;
    let vt = Tensor::new([r, cols], full.vt_rows(r).iter().map(|&v| T::from_f64(v)).collect())?;
    Ok(SvdResult {
        u,
        s: full.s[..r].iter().map(|&v| T::from_f64(v)).collect(),
        vt,
        discarded_sq: full.tail_sq(r),
        numerical_rank: full.numerical_rank(),
    })
}

impl<T: Scalar> SvdResult<T> {
    /// `u * diag(s) * vt`.
    pub fn reconstruct(&self) -> Tensor<T> {
        let r = self.s.len();
        let mut us = self.u.clone();
        let rows = us.shape()[0];
        let data = us.data_mut();
        for i in 0..rows {
            for j in 0..r {
                data[i * r + j] *= self.s[j];
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformable")
    }
}
