//! Dense row-major tensors.
//!
//! Tensors are plain values: every operation returns a fresh tensor and
//! never mutates its inputs. Views and strides are deliberately absent;
//! at the sizes this crate targets a copy is cheaper than the bookkeeping.

mod svd;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::scalar::Scalar;

pub use svd::{truncated_svd, SvdResult};
pub(crate) use svd::svd_full;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        out[k] = out[k + 1] * shape[k + 1];
    }
    out
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if let Some(k) = shape.iter().position(|&e| e == 0) {
        bail!(Shape, "extent {k} of {shape:?} is zero");
    }
    Ok(())
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        bail!(Shape, "permutation {axes:?} has length {} for rank {rank}", axes.len());
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            bail!(Shape, "{axes:?} is not a permutation of 0..{rank}");
        }
        seen[a] = true;
    }
    Ok(())
}

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// Row-major transpose of an `m x n` block into `n x m`.
pub(crate) fn transpose_into<T: Copy>(m: usize, n: usize, src: &[T], dst: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_extents(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            bail!(Shape, "shape {shape:?} needs {len} elements, got {}", data.len());
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(f).collect() }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (k, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of bounds for axis {k} with extent {e}");
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(mut self, new_shape: &[usize]) -> Result<Self> {
        check_extents(new_shape)?;
        let len: usize = new_shape.iter().product();
        if len != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {new_shape:?}", self.shape);
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Reorders axes: `out.shape[k] == self.shape[axes[k]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.rank())?;
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let rank = out_shape.len();
        let inner = out_shape[rank - 1];
        let inner_stride = src_strides[rank - 1];

        let mut data = Vec::with_capacity(self.data.len());
        let mut counter = vec![0usize; rank - 1];
        let mut base = 0usize;
        loop {
            let mut src = base;
            for _ in 0..inner {
                data.push(self.data[src]);
                src += inner_stride;
            }
            // advance the odometer over the outer axes
            let mut k = rank - 1;
            loop {
                if k == 0 {
                    return Ok(Self { shape: out_shape, data });
                }
                k -= 1;
                counter[k] += 1;
                base += src_strides[k];
                if counter[k] < out_shape[k] {
                    break;
                }
                base -= src_strides[k] * out_shape[k];
                counter[k] = 0;
            }
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            bail!(Shape, "transpose needs rank 2, got {:?}", self.shape);
        }
        self.permute(&[1, 0])
    }

    /// Contracts `a_axes` of `self` with `b_axes` of `other`.
    ///
    /// The result carries the free axes of `self` followed by the free axes
    /// of `other`, each in their original order.
    pub fn tensordot(&self, other: &Self, a_axes: &[usize], b_axes: &[usize]) -> Result<Self> {
        if a_axes.len() != b_axes.len() {
            bail!(Shape, "tensordot axis lists differ in length: {a_axes:?} vs {b_axes:?}");
        }
        let (perm_a, free_a) = split_axes(self.rank(), a_axes)?;
        let (perm_b_free, free_b) = split_axes(other.rank(), b_axes)?;
        for (&ia, &ib) in a_axes.iter().zip(b_axes) {
            if self.shape[ia] != other.shape[ib] {
                bail!(
                    Shape,
                    "tensordot extent mismatch: axis {ia} of {:?} vs axis {ib} of {:?}",
                    self.shape,
                    other.shape
                );
            }
        }
        let m: usize = free_a.iter().map(|&a| self.shape[a]).product();
        let k: usize = a_axes.iter().map(|&a| self.shape[a]).product();
        let n: usize = free_b.iter().map(|&b| other.shape[b]).product();

        let a_perm = self.permute(&perm_a)?;
        // contracted axes of b first, then its free axes
        let mut perm_b: Vec<usize> = b_axes.to_vec();
        perm_b.extend_from_slice(&free_b);
        debug_assert_eq!(perm_b.len(), perm_b_free.len());
        let b_perm = other.permute(&perm_b)?;

        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &a_perm.data, &b_perm.data, &mut out);
        let mut shape: Vec<usize> = free_a.iter().map(|&a| self.shape[a]).collect();
        shape.extend(free_b.iter().map(|&b| other.shape[b]));
        Ok(Self { shape, data: out })
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            bail!(Shape, "matmul needs rank-2 operands, got {:?} and {:?}", self.shape, other.shape);
        }
        self.tensordot(other, &[1], &[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            bail!(Shape, "shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum())
    }

    /// `||self - approx||_F / ||self||_F`.
    pub fn relative_error(&self, approx: &Self) -> Result<f64> {
        relative_error(self, approx)
    }
}

/// Returns `(free ++ contracted, free)` axis lists for a tensordot operand.
fn split_axes(rank: usize, contracted: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut used = vec![false; rank];
    for &a in contracted {
        if a >= rank || used[a] {
            bail!(Shape, "invalid contraction axes {contracted:?} for rank {rank}");
        }
        used[a] = true;
    }
    let free: Vec<usize> = (0..rank).filter(|&a| !used[a]).collect();
    let mut perm = free.clone();
    perm.extend_from_slice(contracted);
    Ok((perm, free))
}

pub fn frobenius_norm<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.frobenius_norm()
}

/// Relative Frobenius error `||w - w_hat||_F / ||w||_F`.
pub fn relative_error<T: Scalar>(w: &Tensor<T>, w_hat: &Tensor<T>) -> Result<f64> {
    if w.shape != w_hat.shape {
        bail!(Shape, "relative_error shape mismatch {:?} vs {:?}", w.shape, w_hat.shape);
    }
    let reference = w.frobenius_norm();
    if reference == 0.0 {
        bail!(Domain, "relative error against a zero-norm reference");
    }
    let diff: f64 = w
        .data
        .iter()
        .zip(&w_hat.data)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(libm::sqrt(diff) / reference)
}
