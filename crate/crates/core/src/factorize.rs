//! Choosing local dimensions for an MPO layer.
//!
//! Two strategies are provided. [`plan_balanced`] searches every ordered
//! factorisation of `out` and `in` jointly and keeps the one with the fewest
//! MPO parameters. [`plan_even`] splits `out` and `in` independently into
//! factors as close to the `L`-th root as possible; this is the layout used
//! by the reference PicoGPT configuration (for example `128 = 8 * 16` and
//! `512 = 8 * 8 * 8`).

#[cfg(test)]
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mpo::{param_count, FactorizationPlan};

/// Every ordered `sites`-tuple of positive integers whose product is `n`,
/// in lexicographic order.
pub fn enumerate_factorizations(n: usize, sites: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, sites: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if sites == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for d in (1..=n).filter(|d| n % d == 0) {
            prefix.push(d);
            rec(n / d, sites - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n >= 1 && sites >= 1 {
        rec(n, sites, &mut Vec::with_capacity(sites), &mut out);
    }
    out
}

/// Inputs to the planners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub out: usize,
    #[serde(rename = "in")]
    pub inp: usize,
    pub sites: usize,
    pub chi: usize,
    /// Whether local dimensions equal to 1 are admissible.
    pub allow_unit_dims: bool,
}

impl PlanRequest {
    pub fn new(out: usize, inp: usize, sites: usize, chi: usize) -> Self {
        Self { out, inp, sites, chi, allow_unit_dims: true }
    }

    fn validate(&self) -> Result<()> {
        if self.out == 0 || self.inp == 0 || self.sites == 0 || self.chi == 0 {
            bail!(Config, "plan request needs out, in, sites and chi >= 1, got {self:?}");
        }
        Ok(())
    }

    fn candidates(&self, n: usize) -> Vec<Vec<usize>> {
        let mut all = enumerate_factorizations(n, self.sites);
        if !self.allow_unit_dims {
            all.retain(|f| f.iter().all(|&d| d > 1));
        }
        all
    }
}

/// Which planner a model uses for its compressed layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    /// Independent near-root splits ([`plan_even`]).
    #[default]
    Even,
    /// Joint parameter-count minimisation ([`plan_balanced`]).
    MinParams,
}

pub fn plan_with(strategy: PlanStrategy, req: &PlanRequest) -> Result<FactorizationPlan> {
    match strategy {
        PlanStrategy::Even => plan_even(req),
        PlanStrategy::MinParams => plan_balanced(req),
    }
}

fn is_non_decreasing(s: &[usize]) -> bool {
    s.windows(2).all(|w| w[0] <= w[1])
}

fn max_dim(plan: &FactorizationPlan) -> usize {
    plan.out_dims.iter().chain(&plan.in_dims).copied().max().unwrap_or(1)
}

/// Orders two plans by parameter count, then largest local dimension, then
/// a preference for non-decreasing sequences, then lexicographically.
pub fn compare_plans(a: &FactorizationPlan, b: &FactorizationPlan) -> Ordering {
    let key = |p: &FactorizationPlan| {
        let sorted = is_non_decreasing(&p.out_dims) && is_non_decreasing(&p.in_dims);
        (param_count(p), max_dim(p), !sorted)
    };
    key(a)
        .cmp(&key(b))
        .then_with(|| a.out_dims.cmp(&b.out_dims))
        .then_with(|| a.in_dims.cmp(&b.in_dims))
}

/// Minimum-parameter factorisation over all ordered pairs of `sites`-way
/// factorisations of `out` and `in`, ties broken by [`compare_plans`].
pub fn plan_balanced(req: &PlanRequest) -> Result<FactorizationPlan> {
    req.validate()?;
    let outs = req.candidates(req.out);
    let ins = req.candidates(req.inp);
    let mut best: Option<FactorizationPlan> = None;
    for o in &outs {
        for i in &ins {
            let plan = FactorizationPlan { out_dims: o.clone(), in_dims: i.clone(), chi: req.chi };
            if best.as_ref().is_none_or(|b| compare_plans(&plan, b) == Ordering::Less) {
                best = Some(plan);
            }
        }
    }
    match best {
        Some(plan) => Ok(plan),
        None => bail!(
            Config,
            "no {}-site factorisation of {} x {} without unit dimensions",
            req.sites,
            req.out,
            req.inp
        ),
    }
}

/// Factorisation of `n` with the smallest largest factor, then smallest
/// second-largest and so on, returned in non-decreasing order.
pub fn even_split(n: usize, sites: usize, allow_unit_dims: bool) -> Option<Vec<usize>> {
    let mut best: Option<Vec<usize>> = None;
    for mut f in enumerate_factorizations(n, sites) {
        if !allow_unit_dims && f.contains(&1) {
            continue;
        }
        f.sort_unstable_by(|a, b| b.cmp(a));
        if best.as_ref().is_none_or(|b| f < *b) {
            best = Some(f);
        }
    }
    best.map(|mut f| {
        f.reverse();
        f
    })
}

/// Splits `out` and `in` independently with [`even_split`].
pub fn plan_even(req: &PlanRequest) -> Result<FactorizationPlan> {
    req.validate()?;
    let split = |n| even_split(n, req.sites, req.allow_unit_dims);
    match (split(req.out), split(req.inp)) {
        (Some(out_dims), Some(in_dims)) => Ok(FactorizationPlan { out_dims, in_dims, chi: req.chi }),
        _ => bail!(
            Config,
            "no {}-site factorisation of {} x {} without unit dimensions",
            req.sites,
            req.out,
            req.inp
        ),
    }
}

/// Divisor-free brute force used to cross-check the planners.
#[cfg(test)]
fn all_tuples(n: usize, sites: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..sites {
        let mut next = Vec::new();
        for t in &out {
            let p: usize = t.iter().product();
            for d in 1..=n {
                if p * d <= n {
                    let mut t = t.clone();
                    t.push(d);
                    next.push(t);
                }
            }
        }
        out = next;
    }
    out.retain(|t| t.iter().product::<usize>() == n);
    out
}
