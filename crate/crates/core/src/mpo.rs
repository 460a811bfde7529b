//! Matrix product operator (MPO) weights.
//!
//! A weight `W` of shape `out x in` is factorised as `out = prod(d_out)`,
//! `in = prod(d_in)` and written as a chain of four-index cores
//! `A[l]` of shape `(bond[l], d_out[l], d_in[l], bond[l + 1])` with unit
//! boundary bonds. Entry `W[(i1..iL), (j1..jL)]` is the product of the core
//! slices `A[l][:, il, jl, :]` along the chain, with `i1` the most
//! significant digit of the row index.
//!
//! This module converts dense weights to cores ([`tt_svd`]), cores back to
//! dense weights ([`reconstruct`]), applies cores to activations without
//! forming the dense weight ([`apply_direct`]), and computes per-core
//! gradients from left/right environments ([`environment_gradient`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{svd_full, Tensor};

/// Local dimensions and bond cap of an MPO layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorizationPlan {
    pub out_dims: Vec<usize>,
    pub in_dims: Vec<usize>,
    pub chi: usize,
}

impl FactorizationPlan {
    pub fn new(out_dims: Vec<usize>, in_dims: Vec<usize>, chi: usize) -> Result<Self> {
        let plan = Self { out_dims, in_dims, chi };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dims.is_empty() || self.out_dims.len() != self.in_dims.len() {
            bail!(
                Config,
                "plan needs equally many (>= 1) output and input dims, got {:?} / {:?}",
                self.out_dims,
                self.in_dims
            );
        }
        if self.out_dims.iter().chain(&self.in_dims).any(|&d| d == 0) {
            bail!(Config, "local dimensions must be positive: {:?} / {:?}", self.out_dims, self.in_dims);
        }
        if self.chi == 0 {
            bail!(Config, "bond dimension must be at least 1");
        }
        Ok(())
    }

    /// Same factorisation with a different bond cap.
    pub fn with_chi(&self, chi: usize) -> Self {
        Self { chi, ..self.clone() }
    }

    pub fn sites(&self) -> usize {
        self.out_dims.len()
    }

    pub fn out_features(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_features(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn matches(&self, out: usize, inp: usize) -> bool {
        self.out_features() == out && self.in_features() == inp
    }

    /// Bond dimensions `(bond_0, .., bond_L)` after clipping every interior
    /// bond to `min(chi, bond_{l-1} * d_out[l] * d_in[l], prod of the
    /// remaining site dims)`.
    pub fn bond_dims(&self) -> Vec<usize> {
        let sites = self.sites();
        let local: Vec<usize> = self.out_dims.iter().zip(&self.in_dims).map(|(o, i)| o * i).collect();
        let mut bonds = vec![1usize; sites + 1];
        for l in 1..sites {
            let left = bonds[l - 1].saturating_mul(local[l - 1]);
            let right = local[l..].iter().fold(1usize, |acc, &d| acc.saturating_mul(d));
            bonds[l] = self.chi.min(left).min(right);
        }
        bonds
    }

    /// Shapes of the cores implied by [`Self::bond_dims`].
    pub fn core_shapes(&self) -> Vec<[usize; 4]> {
        let bonds = self.bond_dims();
        (0..self.sites()).map(|l| [bonds[l], self.out_dims[l], self.in_dims[l], bonds[l + 1]]).collect()
    }

    pub fn dense_count(&self) -> usize {
        self.out_features() * self.in_features()
    }
}

/// Exact number of MPO parameters for `plan` with clipped bonds.
pub fn param_count(plan: &FactorizationPlan) -> usize {
    plan.core_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Core standard deviation `n_in^(-1/4) * chi^(-(L-1)/(2L))`.
pub fn init_scale(plan: &FactorizationPlan, n_in: usize) -> f64 {
    let sites = plan.sites() as f64;
    let n_in = n_in.max(1) as f64;
    libm::pow(n_in, -0.25) * libm::pow(plan.chi as f64, -(sites - 1.0) / (2.0 * sites))
}

/// Ordered chain of MPO cores.
#[derive(Clone, Debug, PartialEq)]
pub struct MpoCores<T> {
    cores: Vec<Tensor<T>>,
}

impl<T: Scalar> MpoCores<T> {
    pub fn new(cores: Vec<Tensor<T>>) -> Result<Self> {
        if cores.is_empty() {
            bail!(Shape, "an MPO needs at least one core");
        }
        for (l, c) in cores.iter().enumerate() {
            if c.rank() != 4 {
                bail!(Shape, "core {l} has shape {:?}, expected four indices", c.shape());
            }
        }
        if cores[0].shape()[0] != 1 || cores[cores.len() - 1].shape()[3] != 1 {
            bail!(Shape, "boundary bonds must be 1");
        }
        for l in 1..cores.len() {
            if cores[l - 1].shape()[3] != cores[l].shape()[0] {
                bail!(
                    Shape,
                    "bond mismatch between core {} {:?} and core {l} {:?}",
                    l - 1,
                    cores[l - 1].shape(),
                    cores[l].shape()
                );
            }
        }
        Ok(Self { cores })
    }

    /// Zero cores with every interior bond of size 1.
    pub fn zeros(out_dims: &[usize], in_dims: &[usize]) -> Self {
        let cores = out_dims.iter().zip(in_dims).map(|(&o, &i)| Tensor::zeros(&[1, o, i, 1])).collect();
        Self { cores }
    }

    pub fn cores(&self) -> &[Tensor<T>] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<Tensor<T>> {
        self.cores
    }

    pub fn sites(&self) -> usize {
        self.cores.len()
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        let mut bonds: Vec<usize> = self.cores.iter().map(|c| c.shape()[0]).collect();
        bonds.push(1);
        bonds
    }

    pub fn out_dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[1]).collect()
    }

    pub fn in_dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[2]).collect()
    }

    pub fn out_features(&self) -> usize {
        self.out_dims().iter().product()
    }

    pub fn in_features(&self) -> usize {
        self.in_dims().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> MpoCores<U> {
        MpoCores { cores: self.cores.iter().map(Tensor::cast).collect() }
    }
}

fn check_plan_shape<T: Scalar>(w: &Tensor<T>, plan: &FactorizationPlan) -> Result<()> {
    plan.validate()?;
    if w.rank() != 2 || !plan.matches(w.shape()[0], w.shape()[1]) {
        bail!(
            Shape,
            "weight of shape {:?} does not match plan {:?} x {:?}",
            w.shape(),
            plan.out_dims,
            plan.in_dims
        );
    }
    Ok(())
}

/// Reshapes `out x in` into `(d_out[0], d_in[0], .., d_out[L-1], d_in[L-1])`.
pub fn interleave<T: Scalar>(w: &Tensor<T>, plan: &FactorizationPlan) -> Result<Tensor<T>> {
    check_plan_shape(w, plan)?;
    let sites = plan.sites();
    let mut split = plan.out_dims.clone();
    split.extend_from_slice(&plan.in_dims);
    let axes: Vec<usize> = (0..sites).flat_map(|l| [l, sites + l]).collect();
    w.reshape(&split)?.permute(&axes)
}

/// Inverse of [`interleave`].
pub fn deinterleave<T: Scalar>(t: &Tensor<T>, plan: &FactorizationPlan) -> Result<Tensor<T>> {
    plan.validate()?;
    let sites = plan.sites();
    let expect: Vec<usize> = (0..sites).flat_map(|l| [plan.out_dims[l], plan.in_dims[l]]).collect();
    if t.shape() != expect.as_slice() {
        bail!(Shape, "interleaved tensor has shape {:?}, expected {expect:?}", t.shape());
    }
    let axes: Vec<usize> = (0..sites).map(|l| 2 * l).chain((0..sites).map(|l| 2 * l + 1)).collect();
    t.permute(&axes)?.into_reshape(&[plan.out_features(), plan.in_features()])
}

/// Result of a TT-SVD sweep.
#[derive(Clone, Debug)]
pub struct TtSvd<T> {
    pub cores: MpoCores<T>,
    /// Squared singular values dropped at each of the `L - 1` unfoldings.
    pub discarded_sq: Vec<f64>,
}

impl<T> TtSvd<T> {
    /// Upper bound on `||W - W_hat||_F^2`.
    pub fn error_bound_sq(&self) -> f64 {
        self.discarded_sq.iter().sum()
    }
}

/// Compresses `w` into MPO cores by a left-to-right sequence of truncated
/// SVDs. Each bond keeps `min(chi, numerical rank of the unfolding)`
/// singular vectors; cores come out left-canonical with the singular values
/// carried into the remainder. Arithmetic is done in f64.
pub fn tt_svd_detailed<T: Scalar>(w: &Tensor<T>, plan: &FactorizationPlan) -> Result<TtSvd<T>> {
    check_plan_shape(w, plan)?;
    if !w.is_finite() {
        bail!(Numeric, "tt_svd input contains non-finite entries");
    }
    let sites = plan.sites();
    if w.frobenius_norm() == 0.0 {
        return Ok(TtSvd {
            cores: MpoCores::zeros(&plan.out_dims, &plan.in_dims),
            discarded_sq: vec![0.0; sites - 1],
        });
    }
    let t: Tensor<f64> = interleave(&w.cast::<f64>(), plan)?;
    let mut remainder = t.into_data();
    let mut bond_left = 1usize;
    let mut cores = Vec::with_capacity(sites);
    let mut discarded_sq = Vec::with_capacity(sites.saturating_sub(1));
    for l in 0..sites - 1 {
        let (o, i) = (plan.out_dims[l], plan.in_dims[l]);
        let rows = bond_left * o * i;
        let cols = remainder.len() / rows;
        let svd = svd_full(rows, cols, &remainder)?;
        let r = plan.chi.min(svd.numerical_rank().max(1));
        let u = svd.u_cols(r);
        cores.push(Tensor::new([bond_left, o, i, r], u.into_iter().map(T::from_f64).collect())?);
        let mut next = svd.vt_rows(r).to_vec();
        for (row, s) in next.chunks_mut(cols).zip(&svd.s) {
            for v in row {
                *v *= s;
            }
        }
        discarded_sq.push(svd.tail_sq(r));
        remainder = next;
        bond_left = r;
    }
    let (o, i) = (plan.out_dims[sites - 1], plan.in_dims[sites - 1]);
    cores.push(Tensor::new([bond_left, o, i, 1], remainder.into_iter().map(T::from_f64).collect())?);
    Ok(TtSvd { cores: MpoCores::new(cores)?, discarded_sq })
}

pub fn tt_svd<T: Scalar>(w: &Tensor<T>, plan: &FactorizationPlan) -> Result<MpoCores<T>> {
    Ok(tt_svd_detailed(w, plan)?.cores)
}

/// Contracts the chain back into the dense `out x in` weight.
pub fn reconstruct<T: Scalar>(mpo: &MpoCores<T>) -> Result<Tensor<T>> {
    let cores = mpo.cores();
    let first = &cores[0];
    let (o0, i0, b0) = (first.shape()[1], first.shape()[2], first.shape()[3]);
    let mut acc = first.reshape(&[o0, i0, b0])?;
    for core in &cores[1..] {
        let (p_out, p_in) = (acc.shape()[0], acc.shape()[1]);
        let (o, i, b) = (core.shape()[1], core.shape()[2], core.shape()[3]);
        acc = acc
            .tensordot(core, &[2], &[0])?
            .permute(&[0, 2, 1, 3, 4])?
            .into_reshape(&[p_out * o, p_in * i, b])?;
    }
    let (out, inp) = (acc.shape()[0], acc.shape()[1]);
    acc.into_reshape(&[out, inp])
}

/// Differentiable [`reconstruct`] over core variables.
pub fn reconstruct_var<T: Scalar>(tape: &mut Tape<T>, cores: &[Var]) -> Result<Var> {
    let Some(&first) = cores.first() else { bail!(Shape, "an MPO needs at least one core") };
    let shape = tape.value(first).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        bail!(Shape, "first core has shape {shape:?}, expected (1, d_out, d_in, bond)");
    }
    let mut acc = tape.reshape(first, &[shape[1], shape[2], shape[3]])?;
    for &core in &cores[1..] {
        let acc_shape = tape.value(acc).shape().to_vec();
        let core_shape = tape.value(core).shape().to_vec();
        if core_shape.len() != 4 {
            bail!(Shape, "core has shape {core_shape:?}, expected four indices");
        }
        let (o, i, b) = (core_shape[1], core_shape[2], core_shape[3]);
        let t = tape.tensordot(acc, core, &[2], &[0])?;
        let t = tape.permute(t, &[0, 2, 1, 3, 4])?;
        acc = tape.reshape(t, &[acc_shape[0] * o, acc_shape[1] * i, b])?;
    }
    let s = tape.value(acc).shape().to_vec();
    if s[2] != 1 {
        bail!(Shape, "last core must close with bond 1, got {}", s[2]);
    }
    tape.reshape(acc, &[s[0], s[1]])
}

fn split_rows(x_shape: &[usize], in_features: usize) -> Result<usize> {
    match x_shape.last() {
        Some(&last) if last == in_features => Ok(x_shape.iter().product::<usize>() / in_features),
        _ => bail!(Shape, "input of shape {x_shape:?} does not end in {in_features} features"),
    }
}

/// `x @ W_hat^T` computed by sweeping `x` through the cores one site at a
/// time. The dense weight is never formed; intermediate tensors have shape
/// `(batch, outputs so far, bond, remaining inputs)`.
pub fn apply_direct<T: Scalar>(mpo: &MpoCores<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let in_dims = mpo.in_dims();
    let in_features: usize = in_dims.iter().product();
    let batch = split_rows(x.shape(), in_features)?;
    let mut rest = in_features / in_dims[0];
    let mut state = x.reshape(&[batch, 1, 1, in_dims[0], rest])?;
    let mut p_out = 1;
    for (l, core) in mpo.cores().iter().enumerate() {
        let (o, b) = (core.shape()[1], core.shape()[3]);
        // (batch, p_out, rest, o, b) -> (batch, p_out, o, b, rest)
        let t = state.tensordot(core, &[2, 3], &[0, 2])?.permute(&[0, 1, 3, 4, 2])?;
        p_out *= o;
        state = match in_dims.get(l + 1) {
            Some(&next) => {
                rest /= next;
                t.into_reshape(&[batch, p_out, b, next, rest])?
            }
            None => t.into_reshape(&[batch, p_out])?,
        };
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("x has rank >= 1") = p_out;
    state.into_reshape(&shape)
}

/// Differentiable [`apply_direct`].
pub fn apply_direct_var<T: Scalar>(tape: &mut Tape<T>, cores: &[Var], x: Var) -> Result<Var> {
    let in_dims: Vec<usize> = cores.iter().map(|&c| tape.value(c).shape()[2]).collect();
    if in_dims.is_empty() {
        bail!(Shape, "an MPO needs at least one core");
    }
    let in_features: usize = in_dims.iter().product();
    let x_shape = tape.value(x).shape().to_vec();
    let batch = split_rows(&x_shape, in_features)?;
    let mut rest = in_features / in_dims[0];
    let mut state = tape.reshape(x, &[batch, 1, 1, in_dims[0], rest])?;
    let mut p_out = 1;
    for (l, &core) in cores.iter().enumerate() {
        let (o, b) = (tape.value(core).shape()[1], tape.value(core).shape()[3]);
        let t = tape.tensordot(state, core, &[2, 3], &[0, 2])?;
        let t = tape.permute(t, &[0, 1, 3, 4, 2])?;
        p_out *= o;
        state = match in_dims.get(l + 1) {
            Some(&next) => {
                rest /= next;
                tape.reshape(t, &[batch, p_out, b, next, rest])?
            }
            None => tape.reshape(t, &[batch, p_out])?,
        };
    }
    let mut shape = x_shape;
    *shape.last_mut().expect("x has rank >= 1") = p_out;
    tape.reshape(state, &shape)
}

/// Left environment of `site`: cores `0..site` contracted into
/// `(prod d_out, prod d_in, bond)`.
fn left_environment<T: Scalar>(cores: &[Tensor<T>], site: usize) -> Result<Tensor<T>> {
    let mut acc = Tensor::ones(&[1, 1, 1]);
    for core in &cores[..site] {
        let (p_out, p_in) = (acc.shape()[0], acc.shape()[1]);
        let (o, i, b) = (core.shape()[1], core.shape()[2], core.shape()[3]);
        acc = acc
            .tensordot(core, &[2], &[0])?
            .permute(&[0, 2, 1, 3, 4])?
            .into_reshape(&[p_out * o, p_in * i, b])?;
    }
    Ok(acc)
}

/// Right environment of `site`: cores `site+1..L` contracted into
/// `(bond, prod d_out, prod d_in)`.
fn right_environment<T: Scalar>(cores: &[Tensor<T>], site: usize) -> Result<Tensor<T>> {
    let mut acc = Tensor::ones(&[1, 1, 1]);
    for core in cores[site + 1..].iter().rev() {
        let (r_out, r_in) = (acc.shape()[1], acc.shape()[2]);
        let (b, o, i) = (core.shape()[0], core.shape()[1], core.shape()[2]);
        // (b, o, i, r_out, r_in) -> (b, o, r_out, i, r_in)
        acc = core
            .tensordot(&acc, &[3], &[0])?
            .permute(&[0, 1, 3, 2, 4])?
            .into_reshape(&[b, o * r_out, i * r_in])?;
    }
    Ok(acc)
}

/// Gradient of a loss with respect to core `site`, given the upstream
/// gradient `dL/dW_hat` of shape `out x in`, by contracting it with the
/// left and right environments of that site.
pub fn environment_gradient<T: Scalar>(mpo: &MpoCores<T>, upstream: &Tensor<T>, site: usize) -> Result<Tensor<T>> {
    let cores = mpo.cores();
    if site >= cores.len() {
        bail!(Shape, "site {site} out of range for {} cores", cores.len());
    }
    let (out, inp) = (mpo.out_features(), mpo.in_features());
    if upstream.shape() != [out, inp] {
        bail!(Shape, "upstream gradient has shape {:?}, expected [{out}, {inp}]", upstream.shape());
    }
    let left = left_environment(cores, site)?;
    let right = right_environment(cores, site)?;
    let (o, i) = (cores[site].shape()[1], cores[site].shape()[2]);
    let (l_out, l_in) = (left.shape()[0], left.shape()[1]);
    let (r_out, r_in) = (right.shape()[1], right.shape()[2]);
    let g = upstream.reshape(&[l_out, o, r_out, l_in, i, r_in])?;
    // (a, o, r_out, i, r_in) then contract r_out, r_in with the right environment
    left.tensordot(&g, &[0, 1], &[0, 3])?.tensordot(&right, &[2, 4], &[1, 2])
}

/// Gaussian cores with standard deviation [`init_scale`]`(plan, in)` and
/// clipped bonds.
pub fn random_init_with<T: Scalar, R: Rng + ?Sized>(plan: &FactorizationPlan, rng: &mut R) -> Result<MpoCores<T>> {
    plan.validate()?;
    let sigma = init_scale(plan, plan.in_features());
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::Numeric(format!("{e}")))?;
    let cores = plan
        .core_shapes()
        .iter()
        .map(|shape| Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng))))
        .collect();
    MpoCores::new(cores)
}

pub fn random_init<T: Scalar>(plan: &FactorizationPlan, seed: u64) -> Result<MpoCores<T>> {
    random_init_with(plan, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// How an MPO layer applies its weight in the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyPath {
    /// Rebuild the dense weight, then multiply.
    #[default]
    Reconstruct,
    /// Contract activations through the chain.
    Direct,
}

/// Linear layer `y = x W_hat^T + b` whose weight is an MPO chain.
#[derive(Clone, Debug, PartialEq)]
pub struct MpoLinear {
    pub plan: FactorizationPlan,
    pub cores: Vec<ParamId>,
    pub bias: Option<ParamId>,
}

impl MpoLinear {
    /// Registers `cores` (and an optional dense bias) under `name`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        plan: FactorizationPlan,
        cores: MpoCores<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if cores.out_dims() != plan.out_dims || cores.in_dims() != plan.in_dims {
            bail!(Shape, "cores do not match plan {:?} x {:?}", plan.out_dims, plan.in_dims);
        }
        if let Some(b) = &bias {
            if b.shape() != [plan.out_features()] {
                bail!(Shape, "bias of shape {:?} for {} outputs", b.shape(), plan.out_features());
            }
        }
        let ids = cores
            .into_cores()
            .into_iter()
            .enumerate()
            .map(|(l, c)| store.push(format!("{name}.core{l}"), ParamKind::MpoCore, c))
            .collect();
        let bias = bias.map(|b| store.push(format!("{name}.bias"), ParamKind::Bias, b));
        Ok(Self { plan, cores: ids, bias })
    }

    pub fn mpo<T: Scalar>(&self, store: &ParamStore<T>) -> Result<MpoCores<T>> {
        MpoCores::new(self.cores.iter().map(|&id| store.value(id).clone()).collect())
    }

    pub fn weight<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        reconstruct(&self.mpo(store)?)
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.cores.iter().chain(&self.bias).map(|&id| store.value(id).len()).sum()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &Bindings, x: Var, path: ApplyPath) -> Result<Var> {
        let cores: Vec<Var> = self.cores.iter().map(|&id| vars.var(id)).collect();
        let y = match path {
            ApplyPath::Reconstruct => {
                let w = reconstruct_var(tape, &cores)?;
                tape.matmul_t(x, w)?
            }
            ApplyPath::Direct => apply_direct_var(tape, &cores, x)?,
        };
        match self.bias {
            Some(b) => tape.add(y, vars.var(b)),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::truncated_svd;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn plan(out: &[usize], inp: &[usize], chi: usize) -> FactorizationPlan {
        FactorizationPlan::new(out.to_vec(), inp.to_vec(), chi).unwrap()
    }

    fn kron(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (ar, ac) = (a.shape()[0], a.shape()[1]);
        let (br, bc) = (b.shape()[0], b.shape()[1]);
        Tensor::from_fn(&[ar * br, ac * bc], |k| {
            let (r, c) = (k / (ac * bc), k % (ac * bc));
            a.at(&[r / br, c / bc]) * b.at(&[r % br, c % bc])
        })
    }

    #[test]
    fn interleave_places_entries() {
        let w = random(&[4, 4], 1);
        let p = plan(&[2, 2], &[2, 2], 4);
        let t = interleave(&w, &p).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        for i1 in 0..2 {
            for i2 in 0..2 {
                for j1 in 0..2 {
                    for j2 in 0..2 {
                        assert_eq!(t.at(&[i1, j1, i2, j2]), w.at(&[i1 * 2 + i2, j1 * 2 + j2]));
                    }
                }
            }
        }
        let single = plan(&[4], &[4], 1);
        assert_eq!(interleave(&w, &single).unwrap(), w);
    }

    #[test]
    fn interleave_round_trip() {
        let w = random(&[6, 6], 2);
        let p = plan(&[2, 3], &[3, 2], 4);
        let t = interleave(&w, &p).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 2]);
        assert_eq!(deinterleave(&t, &p).unwrap(), w);
        assert!(interleave(&random(&[6, 5], 1), &p).is_err());
    }

    #[test]
    fn full_rank_tt_svd_is_exact() {
        let w = random(&[16, 16], 3);
        let p = plan(&[4, 4], &[4, 4], 1000);
        let cores = tt_svd(&w, &p).unwrap();
        assert!(w.relative_error(&reconstruct(&cores).unwrap()).unwrap() < 1e-10);

        let w = random(&[24, 30], 4);
        let p = plan(&[2, 3, 4], &[5, 3, 2], 1000);
        let out = tt_svd_detailed(&w, &p).unwrap();
        assert_eq!(out.cores.bond_dims(), p.bond_dims());
        assert!(w.relative_error(&reconstruct(&out.cores).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn kronecker_product_has_unit_bond() {
        let a = random(&[2, 2], 5);
        let b = random(&[3, 3], 6);
        let w = kron(&a, &b);
        let p = plan(&[2, 3], &[2, 3], 1);
        let out = tt_svd_detailed(&w, &p).unwrap();
        assert_eq!(out.cores.bond_dims(), vec![1, 1, 1]);
        assert!(w.relative_error(&reconstruct(&out.cores).unwrap()).unwrap() < 1e-12);
        assert!(out.error_bound_sq() < 1e-24);
    }

    #[test]
    fn two_site_error_equals_single_unfolding_truncation() {
        let w = random(&[8, 8], 7);
        let p = plan(&[2, 4], &[2, 4], 2);
        let out = tt_svd_detailed(&w, &p).unwrap();
        let err_sq = w.sub(&reconstruct(&out.cores).unwrap()).unwrap().frobenius_norm().powi(2);
        // oracle: full SVD of the (d_out[0] d_in[0]) x rest unfolding
        let unfolding = interleave(&w, &p).unwrap().into_reshape(&[4, 16]).unwrap();
        let full = truncated_svd(&unfolding, 4).unwrap();
        let tail: f64 = full.s[2..].iter().map(|s| s * s).sum();
        assert!((err_sq - tail).abs() <= 1e-10 * tail.max(1.0));
        assert!((out.discarded_sq[0] - tail).abs() <= 1e-10 * tail.max(1.0));
    }

    #[test]
    fn error_bound_holds_and_error_shrinks_with_chi() {
        let w = random(&[32, 24], 8);
        let p = plan(&[2, 4, 4], &[2, 3, 4], 1);
        let mut prev = f64::INFINITY;
        for chi in [1, 2, 4, 8, 1000] {
            let out = tt_svd_detailed(&w, &p.with_chi(chi)).unwrap();
            let w_hat = reconstruct(&out.cores).unwrap();
            let err_sq = w.sub(&w_hat).unwrap().frobenius_norm().powi(2);
            assert!(err_sq <= out.error_bound_sq() * (1.0 + 1e-8) + 1e-20, "chi {chi}");
            let rel = w.relative_error(&w_hat).unwrap();
            assert!(rel <= prev + 1e-12);
            prev = rel;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn zero_matrix_gives_zero_unit_bond_cores() {
        let w = Tensor::<f64>::zeros(&[6, 4]);
        let p = plan(&[2, 3], &[2, 2], 4);
        let out = tt_svd_detailed(&w, &p).unwrap();
        assert_eq!(out.cores.bond_dims(), vec![1, 1, 1]);
        assert_eq!(reconstruct(&out.cores).unwrap(), w);
    }

    #[test]
    fn tt_svd_rejects_bad_input() {
        let p = plan(&[2, 2], &[2, 2], 2);
        assert!(matches!(tt_svd(&random(&[4, 3], 1), &p), Err(crate::Error::Shape(_))));
        let mut w = random(&[4, 4], 1);
        w.data_mut()[0] = f64::INFINITY;
        assert!(matches!(tt_svd(&w, &p), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn identity_mpo_reconstructs_identity() {
        let cores = MpoCores::new(vec![
            Tensor::<f64>::eye(8).into_reshape(&[1, 8, 8, 1]).unwrap(),
            Tensor::eye(16).into_reshape(&[1, 16, 16, 1]).unwrap(),
        ])
        .unwrap();
        assert_eq!(reconstruct(&cores).unwrap(), Tensor::eye(128));
        let x = random(&[3, 128], 2);
        assert!(apply_direct(&cores, &x).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn single_site_reconstructs_its_matrix() {
        let m = random(&[3, 5], 4);
        let cores = MpoCores::new(vec![m.reshape(&[1, 3, 5, 1]).unwrap()]).unwrap();
        assert_eq!(reconstruct(&cores).unwrap(), m);
        let x = random(&[2, 5], 5);
        let y = apply_direct(&cores, &x).unwrap();
        assert!(y.max_abs_diff(&x.matmul(&m.t().unwrap()).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn reconstruct_rejects_bond_mismatch() {
        let bad = MpoCores::new(vec![Tensor::<f64>::zeros(&[1, 2, 2, 3]), Tensor::zeros(&[2, 2, 2, 1])]);
        assert!(matches!(bad, Err(crate::Error::Shape(_))));
        assert!(MpoCores::new(vec![Tensor::<f64>::zeros(&[2, 2, 2, 1])]).is_err());
    }

    #[test]
    fn apply_direct_matches_dense_multiply() {
        let p = plan(&[3, 2, 2], &[2, 4, 3], 5);
        let cores: MpoCores<f64> = random_init(&p, 9).unwrap();
        let w_hat = reconstruct(&cores).unwrap();
        let x = random(&[7, 24], 10);
        let direct = apply_direct(&cores, &x).unwrap();
        let dense = x.matmul(&w_hat.t().unwrap()).unwrap();
        assert!(dense.relative_error(&direct).unwrap() < 1e-12);

        // one-hot rows pick out columns of W_hat
        let eye = Tensor::<f64>::eye(24);
        let cols = apply_direct(&cores, &eye).unwrap();
        assert!(cols.max_abs_diff(&w_hat.t().unwrap()).unwrap() < 1e-14);

        // leading batch axes are preserved
        let x3 = random(&[2, 3, 24], 11);
        let y3 = apply_direct(&cores, &x3).unwrap();
        assert_eq!(y3.shape(), &[2, 3, 12]);
        assert!(apply_direct(&cores, &random(&[2, 23], 1)).is_err());
    }

    #[test]
    fn table_parameter_counts() {
        assert_eq!(param_count(&plan(&[8, 16], &[8, 16], 8)), 2560);
        assert_eq!(param_count(&plan(&[5, 13], &[8, 16], 8)), 1984);
        assert_eq!(param_count(&plan(&[4, 4, 8], &[8, 8, 8], 8)), 2816);
        assert_eq!(param_count(&plan(&[8, 8, 8], &[4, 4, 8], 8)), 2816);
        assert_eq!(param_count(&plan(&[128], &[64], 3)), 128 * 64);
    }

    #[test]
    fn parameter_count_matches_uniform_formula() {
        // unclipped uniform bond: chi d1 + chi^2 sum(middle) + chi dL
        let p = plan(&[4, 4, 4, 4], &[4, 4, 4, 4], 3);
        assert_eq!(p.bond_dims(), vec![1, 3, 3, 3, 1]);
        assert_eq!(param_count(&p), 3 * 16 + 9 * 16 * 2 + 3 * 16);
        // linear growth in the number of sites for fixed chi and local dims
        let count = |sites: usize| param_count(&plan(&vec![4; sites], &vec![4; sites], 3));
        let step = count(4) - count(3);
        assert_eq!(count(5) - count(4), step);
        assert_eq!(count(6) - count(5), step);
        assert_eq!(step, 9 * 16);
    }

    #[test]
    fn bond_clipping() {
        let p = plan(&[2, 2, 2], &[1, 1, 1], 100);
        assert_eq!(p.bond_dims(), vec![1, 2, 2, 1]);
        let p = plan(&[8, 16], &[8, 16], 1000);
        assert_eq!(p.bond_dims(), vec![1, 64, 1]);
    }

    #[test]
    fn init_scale_values() {
        assert!((init_scale(&plan(&[4, 4], &[4, 4], 1), 16) - 0.5).abs() < 1e-15);
        assert!((init_scale(&plan(&[8, 16], &[8, 16], 8), 128) - libm::pow(1024.0, -0.25)).abs() < 1e-15);
        let s = init_scale(&plan(&[4, 4, 8], &[8, 8, 2], 16), 128);
        let expect = libm::pow(128.0, -0.25) * libm::pow(16.0, -1.0 / 3.0);
        assert!((s - expect).abs() < 1e-15);
        assert!((s - 0.11799).abs() < 1e-5);
    }

    #[test]
    fn random_init_statistics() {
        let p = plan(&[8, 16], &[8, 16], 32);
        let sigma = init_scale(&p, 128);
        let cores: MpoCores<f64> = random_init(&p, 1).unwrap();
        assert_eq!(cores.bond_dims(), p.bond_dims());
        let entries: Vec<f64> = cores.cores().iter().flat_map(|c| c.data().iter().copied()).collect();
        // 64*32 + 32*256 = 10240 per seed; pool a few seeds for >= 1e5 samples
        let mut all = entries.clone();
        for seed in 2..11 {
            let c: MpoCores<f64> = random_init(&p, seed).unwrap();
            all.extend(c.cores().iter().flat_map(|c| c.data().iter().copied()));
        }
        assert!(all.len() >= 100_000);
        let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "{var}");

        // reconstructed entries have variance ~ 1/n_in in the two-site case
        let mut acc = 0.0;
        let mut n = 0usize;
        for seed in 100..124 {
            let c: MpoCores<f64> = random_init(&p, seed).unwrap();
            let w = reconstruct(&c).unwrap();
            acc += w.data().iter().map(|v| v * v).sum::<f64>();
            n += w.len();
        }
        let var_w = acc / n as f64;
        assert!((var_w * 128.0 - 1.0).abs() < 0.2, "{var_w}");

        let again: MpoCores<f64> = random_init(&p, 1).unwrap();
        assert_eq!(again, cores);
    }

    fn tape_gradients(cores: &MpoCores<f64>, upstream: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = cores.cores().iter().map(|c| tape.leaf(c.clone(), true)).collect();
        let w = reconstruct_var(&mut tape, &vars).unwrap();
        let u = tape.constant(upstream.clone());
        let p = tape.mul(w, u).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect()
    }

    #[test]
    fn environment_gradient_matches_autograd() {
        let p = plan(&[2, 3], &[3, 2], 4);
        let cores: MpoCores<f64> = random_init(&p, 3).unwrap();
        let ones = Tensor::ones(&[6, 6]);
        let tape = tape_gradients(&cores, &ones);
        for site in 0..2 {
            let env = environment_gradient(&cores, &ones, site).unwrap();
            assert!(env.max_abs_diff(&tape[site]).unwrap() < 1e-10);
        }

        let p = plan(&[2, 3, 2], &[2, 2, 3], 3);
        let cores: MpoCores<f64> = random_init(&p, 4).unwrap();
        let upstream = random(&[12, 12], 5);
        let tape = tape_gradients(&cores, &upstream);
        for site in 0..3 {
            let env = environment_gradient(&cores, &upstream, site).unwrap();
            assert_eq!(env.shape(), cores.cores()[site].shape());
            assert!(env.max_abs_diff(&tape[site]).unwrap() < 1e-10);
        }
    }

    #[test]
    fn single_site_environment_gradient_is_upstream() {
        let m = random(&[3, 4], 1);
        let cores = MpoCores::new(vec![m.reshape(&[1, 3, 4, 1]).unwrap()]).unwrap();
        let upstream = random(&[3, 4], 2);
        let g = environment_gradient(&cores, &upstream, 0).unwrap();
        assert_eq!(g, upstream.reshape(&[1, 3, 4, 1]).unwrap());
        assert!(environment_gradient(&cores, &upstream, 1).is_err());
        assert!(environment_gradient(&cores, &random(&[4, 3], 2), 0).is_err());
    }

    #[test]
    fn reconstruct_var_matches_tensor_path() {
        let p = plan(&[2, 2, 3], &[3, 1, 2], 4);
        let cores: MpoCores<f64> = random_init(&p, 8).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = cores.cores().iter().map(|c| tape.leaf(c.clone(), false)).collect();
        let w = reconstruct_var(&mut tape, &vars).unwrap();
        assert_eq!(tape.value(w), &reconstruct(&cores).unwrap());
        let x = random(&[4, 6], 9);
        let xv = tape.constant(x.clone());
        let y = apply_direct_var(&mut tape, &vars, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&apply_direct(&cores, &x).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn mpo_linear_paths_agree() {
        let p = plan(&[3, 4], &[2, 5], 3);
        let mut store = ParamStore::<f64>::new();
        let cores = random_init(&p, 2).unwrap();
        let layer = MpoLinear::register(&mut store, "w", p, cores, Some(random(&[12], 3))).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(layer.param_count(&store), param_count(&layer.plan) + 12);
        let x = random(&[5, 10], 4);
        let mut outs = Vec::new();
        for path in [ApplyPath::Reconstruct, ApplyPath::Direct] {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &vars, xv, path).unwrap();
            outs.push(tape.value(y).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]).unwrap() < 1e-13);
    }
}
