//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] records every operation of one forward pass in order. Calling
//! [`Tape::backward`] walks the records in exact reverse order and
//! accumulates gradients into every node that requires them. The graph is
//! rebuilt for every step; a tape is not meant to outlive one forward pass.
//!
//! ```
//! use mpogpt_core::{autograd::Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([2], vec![3.0, 4.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 8.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Additive bias applied to masked attention scores before the softmax.
pub const MASK_VALUE: f64 = -1e9;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    Sum { a: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Tensordot { a: usize, b: usize, a_axes: Vec<usize>, b_axes: Vec<usize> },
    Matmul { a: usize, b: usize, trans_b: bool },
    Gather { table: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: usize },
    Relu { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sums `g` (shape `outer ++ suffix`) down to `suffix`.
fn reduce_leading<T: Scalar>(g: &Tensor<T>, suffix: &[usize]) -> Tensor<T> {
    let inner: usize = suffix.iter().product();
    let mut out = vec![T::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(suffix.to_vec(), out).expect("suffix shape is valid")
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (k, &a) in axes.iter().enumerate() {
        inv[a] = k;
    }
    inv
}

/// `c += a^T b` with `a: k x m`, `b: k x n`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            for (c_ij, &b_pj) in c[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// `c += a b^T` with `a: m x k`, `b: n x k`.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], scratch: &mut Vec<T>) {
    scratch.clear();
    scratch.resize(k * n, T::zero());
    crate::tensor::transpose_into(n, k, b, scratch);
    gemm(m, k, n, a, scratch, c);
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        bail!(Shape, "matmul operands need rank >= 2, got {a:?} and {b:?}");
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != bk {
        bail!(Shape, "matmul inner extents differ: {a:?} x {b:?} (trans_b = {trans_b})");
    }
    let batch_a = &a[..a.len() - 2];
    let batch_b = &b[..b.len() - 2];
    let shared_b = batch_b.is_empty();
    if !shared_b && batch_a != batch_b {
        bail!(Shape, "matmul batch extents differ: {a:?} x {b:?}");
    }
    Ok(MatmulDims { batch: batch_a.iter().product(), m, k, n, shared_b })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            bail!(Usage, "variable from tape {} used on tape {}", v.tape, self.id);
        }
        if v.index >= self.nodes.len() {
            bail!(Usage, "variable index {} out of range", v.index);
        }
        Ok(v.index)
    }

    fn record(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable belongs to this tape");
        &self.nodes[i].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.check(v).ok()?;
        self.nodes[i].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let i = self.check(v).ok()?;
        self.nodes[i].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// `a + b`, where `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !is_suffix(va.shape(), vb.shape()) {
            bail!(Shape, "add: {:?} does not broadcast onto {:?}", vb.shape(), va.shape());
        }
        let inner = vb.len();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(Op::Add { a: ia, b: ib }, out, &[ia, ib]))
    }

    /// Elementwise `a * b`, where `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !is_suffix(va.shape(), vb.shape()) {
            bail!(Shape, "mul: {:?} does not broadcast onto {:?}", vb.shape(), va.shape());
        }
        let inner = vb.len();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(Op::Mul { a: ia, b: ib }, out, &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.scale(c);
        Ok(self.record(Op::Scale { a: ia, c }, out, &[ia]))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.record(Op::Sum { a: ia }, out, &[ia]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.record(Op::Reshape { a: ia }, out, &[ia]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.permute(axes)?;
        Ok(self.record(Op::Permute { a: ia, axes: axes.to_vec() }, out, &[ia]))
    }

    pub fn tensordot(&mut self, a: Var, b: Var, a_axes: &[usize], b_axes: &[usize]) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.tensordot(&self.nodes[ib].value, a_axes, b_axes)?;
        let op = Op::Tensordot { a: ia, b: ib, a_axes: a_axes.to_vec(), b_axes: b_axes.to_vec() };
        Ok(self.record(op, out, &[ia, ib]))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let d = matmul_dims(va.shape(), vb.shape(), trans_b)?;
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        let mut scratch = Vec::new();
        let b_stride = if d.shared_b { 0 } else { d.k * d.n };
        for bi in 0..d.batch {
            let a_blk = &va.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let b_blk = &vb.data()[bi * b_stride..bi * b_stride + d.k * d.n];
            let c_blk = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            if trans_b {
                gemm_nt(d.m, d.k, d.n, a_blk, b_blk, c_blk, &mut scratch);
            } else {
                gemm(d.m, d.k, d.n, a_blk, b_blk, c_blk);
            }
        }
        let mut shape = va.shape()[..va.rank() - 2].to_vec();
        shape.extend([d.m, d.n]);
        let out = Tensor::new(shape, out)?;
        Ok(self.record(Op::Matmul { a: ia, b: ib, trans_b }, out, &[ia, ib]))
    }

    /// Batched `a @ b` over the last two axes. A rank-2 `b` is shared by all batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Rows of a `V x D` table selected by `ids`; output `len(ids) x D`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tv = &self.nodes[it].value;
        if tv.rank() != 2 {
            bail!(Shape, "gather needs a rank-2 table, got {:?}", tv.shape());
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            bail!(Input, "gather with no ids");
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                bail!(Input, "index {id} out of range for table with {rows} rows");
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new([ids.len(), dim], data)?;
        Ok(self.record(Op::Gather { table: it, ids: ids.to_vec() }, out, &[it]))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (vx, vg, vb) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let dim = *vx.shape().last().ok_or_else(|| crate::Error::Shape("layer_norm on scalar".into()))?;
        if vg.shape() != [dim] || vb.shape() != [dim] {
            bail!(Shape, "layer_norm parameters must have shape [{dim}], got {:?} / {:?}", vg.shape(), vb.shape());
        }
        let rows = vx.len() / dim;
        let inv_dim = T::one() / T::from_usize(dim);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(dim) {
            let mean = row.iter().copied().sum::<T>() * inv_dim;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.record(Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }, out, &[ix, ig, ib]))
    }

    /// Softmax over the last axis. With `causal`, the last two axes are a
    /// square score matrix and entry `(i, j)` with `j > i` receives
    /// [`MASK_VALUE`] before normalisation.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let dim = *va.shape().last().ok_or_else(|| crate::Error::Shape("softmax on scalar".into()))?;
        if causal && (va.rank() < 2 || va.shape()[va.rank() - 2] != dim) {
            bail!(Shape, "causal softmax needs square trailing axes, got {:?}", va.shape());
        }
        let mask = T::from_f64(MASK_VALUE);
        let mut out = Vec::with_capacity(va.len());
        let mut buf = vec![T::zero(); dim];
        for (r, row) in va.data().chunks(dim).enumerate() {
            let pos = r % dim;
            for (j, (b, &v)) in buf.iter_mut().zip(row).enumerate() {
                *b = if causal && j > pos { v + mask } else { v };
            }
            let max = buf.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                total += *b;
            }
            out.extend(buf.iter().map(|&b| b / total));
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.record(Op::Softmax { a: ia }, out, &[ia]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.record(Op::Relu { a: ia }, out, &[ia]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// `logits` has the class axis last; `targets` holds one class per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = &self.nodes[il].value;
        let classes = *vl.shape().last().ok_or_else(|| crate::Error::Shape("cross_entropy on scalar".into()))?;
        let rows = vl.len() / classes;
        if targets.len() != rows {
            bail!(Shape, "cross_entropy: {} targets for {rows} rows", targets.len());
        }
        let mut probs = Vec::with_capacity(vl.len());
        let mut total = 0.0f64;
        for (row, &t) in vl.data().chunks(classes).zip(targets) {
            if t >= classes {
                bail!(Input, "target {t} out of range for {classes} classes");
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += (log_z - row[t]).as_f64();
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let out = Tensor::scalar(T::from_f64(total / rows as f64));
        Ok(self.record(Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs }, out, &[il]))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.nodes[il].value.shape());
        }
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[il].value.shape().to_vec();
        self.nodes[il].grad = Some(Tensor::ones(&shape));
        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.backward_rule(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.nodes[target].grad {
                    Some(acc) => {
                        for (x, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *x += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_leading(g, self.nodes[*b].value.shape())));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let inner = vb.len();
                if self.wants(*a) {
                    let mut d = g.data().to_vec();
                    for chunk in d.chunks_mut(inner) {
                        for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                            *x *= y;
                        }
                    }
                    out.push((*a, Tensor::new(va.shape().to_vec(), d)?));
                }
                if self.wants(*b) {
                    let prod = g.zip_map(va, |x, y| x * y)?;
                    out.push((*b, reduce_leading(&prod, vb.shape())));
                }
            }
            Op::Scale { a, c } => out.push((*a, g.scale(*c))),
            Op::Sum { a } => {
                let shape = self.nodes[*a].value.shape();
                out.push((*a, Tensor::full(shape, g.item())));
            }
            Op::Reshape { a } => out.push((*a, g.reshape(self.nodes[*a].value.shape())?)),
            Op::Permute { a, axes } => out.push((*a, g.permute(&inverse_permutation(axes))?)),
            Op::Tensordot { a, b, a_axes, b_axes } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let free_a: Vec<usize> = (0..va.rank()).filter(|x| !a_axes.contains(x)).collect();
                let free_b: Vec<usize> = (0..vb.rank()).filter(|x| !b_axes.contains(x)).collect();
                let nfa = free_a.len();
                if self.wants(*a) {
                    // contract g's free-b block against b's free axes
                    let g_axes: Vec<usize> = (nfa..nfa + free_b.len()).collect();
                    let t = g.tensordot(vb, &g_axes, &free_b)?;
                    // t axes: free_a, then b's contracted axes in increasing order
                    let mut pairs: Vec<(usize, usize)> = b_axes.iter().copied().zip(a_axes.iter().copied()).collect();
                    pairs.sort_unstable();
                    let mut origin: Vec<usize> = free_a.clone();
                    origin.extend(pairs.iter().map(|&(_, ax)| ax));
                    out.push((*a, t.permute(&inverse_permutation(&origin))?));
                }
                if self.wants(*b) {
                    let g_axes: Vec<usize> = (0..nfa).collect();
                    let t = va.tensordot(g, &free_a, &g_axes)?;
                    // t axes: a's contracted axes in increasing order, then free_b
                    let mut pairs: Vec<(usize, usize)> = a_axes.iter().copied().zip(b_axes.iter().copied()).collect();
                    pairs.sort_unstable();
                    let mut origin: Vec<usize> = pairs.iter().map(|&(_, bx)| bx).collect();
                    origin.extend(free_b.iter().copied());
                    out.push((*b, t.permute(&inverse_permutation(&origin))?));
                }
            }
            Op::Matmul { a, b, trans_b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let d = matmul_dims(va.shape(), vb.shape(), *trans_b)?;
                let (m, k, n) = (d.m, d.k, d.n);
                let b_stride = if d.shared_b { 0 } else { k * n };
                let mut scratch = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for bi in 0..d.batch {
                        let g_blk = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &vb.data()[bi * b_stride..bi * b_stride + k * n];
                        let ga_blk = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B: n x k  =>  dA = G B
                            gemm(m, n, k, g_blk, b_blk, ga_blk);
                        } else {
                            // C = A B, B: k x n  =>  dA = G B^T
                            gemm_nt(m, n, k, g_blk, b_blk, ga_blk, &mut scratch);
                        }
                    }
                    out.push((*a, Tensor::new(va.shape().to_vec(), ga)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for bi in 0..d.batch {
                        let g_blk = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let gb_blk = &mut gb[bi * b_stride..bi * b_stride + k * n];
                        if *trans_b {
                            // dB (n x k) = G^T A
                            gemm_tn(n, m, k, g_blk, a_blk, gb_blk);
                        } else {
                            // dB (k x n) = A^T G
                            gemm_tn(k, m, n, a_blk, g_blk, gb_blk);
                        }
                    }
                    out.push((*b, Tensor::new(vb.shape().to_vec(), gb)?));
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.nodes[*table].value.shape();
                let dim = shape[1];
                let mut gt = vec![T::zero(); shape[0] * dim];
                for (row, &id) in g.data().chunks(dim).zip(ids) {
                    for (x, &v) in gt[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *x += v;
                    }
                }
                out.push((*table, Tensor::new(shape.to_vec(), gt)?));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = &self.nodes[*gain].value;
                let dim = vg.len();
                let inv_dim = T::one() / T::from_usize(dim);
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    let mut gy = vec![T::zero(); dim];
                    for ((grow, hrow), &r) in g.data().chunks(dim).zip(xhat.chunks(dim)).zip(rstd) {
                        let mut mean_gy = T::zero();
                        let mut mean_gyh = T::zero();
                        for j in 0..dim {
                            gy[j] = grow[j] * vg.data()[j];
                            mean_gy += gy[j];
                            mean_gyh += gy[j] * hrow[j];
                        }
                        mean_gy *= inv_dim;
                        mean_gyh *= inv_dim;
                        for j in 0..dim {
                            gx.push(r * (gy[j] - mean_gy - hrow[j] * mean_gyh));
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), gx)?));
                }
                if self.wants(*gain) {
                    let mut gg = vec![T::zero(); dim];
                    for (grow, hrow) in g.data().chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    out.push((*gain, Tensor::new([dim], gg)?));
                }
                if self.wants(*bias) {
                    out.push((*bias, reduce_leading(g, &[dim])));
                }
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let dim = *y.shape().last().expect("softmax output has rank >= 1");
                let mut ga = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(dim).zip(g.data().chunks(dim)) {
                    let dotp: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    ga.extend(yrow.iter().zip(grow).map(|(&p, &q)| p * (q - dotp)));
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), ga)?));
            }
            Op::Relu { a } => {
                let va = &self.nodes[*a].value;
                out.push((*a, va.zip_map(g, |x, d| if x > T::zero() { d } else { T::zero() })?));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.nodes[*logits].value.shape();
                let classes = *shape.last().expect("logits rank >= 1");
                let scale = g.item() / T::from_usize(targets.len());
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * classes + t] -= scale;
                }
                out.push((*logits, Tensor::new(shape.to_vec(), gl)?));
            }
        }
        Ok(out)
    }
}

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    /// True when any loss evaluation or gradient entry was NaN or infinite.
    pub non_finite: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_deviation <= self.tolerance
    }
}

/// Default absolute floor used by [`grad_check`] for near-zero gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function with central finite
/// differences of step `h` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_deviation: 0.0,
        max_abs_deviation: 0.0,
        non_finite: !analytic.is_finite(),
        tolerance,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            report.non_finite = true;
            continue;
        }
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.max_abs_deviation = report.max_abs_deviation.max(abs);
        report.max_rel_deviation = report.max_rel_deviation.max(rel);
    }
    Ok(report)
}
