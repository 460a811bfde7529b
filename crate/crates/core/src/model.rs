//! Character-level GPT with pluggable dense or MPO linear layers.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += FFN(LN(x))`, causal multi-head
//! attention scaled by `1/sqrt(D/H)`, ReLU feed-forward, fixed sinusoidal
//! positions, a final layer norm and an untied LM head. Embeddings, layer
//! norms and biases are always dense.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
#[cfg(test)]
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{bail, Error, Result};
use crate::factorize::{plan_with, PlanRequest, PlanStrategy};
use crate::mpo::{self, param_count, random_init_with, ApplyPath, FactorizationPlan, MpoCores, MpoLinear};
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMode {
    #[default]
    Dense,
    Mpo,
}

/// The seven kinds of linear layer in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
    Head,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Query,
        LayerKind::Key,
        LayerKind::Value,
        LayerKind::Output,
        LayerKind::FfnIn,
        LayerKind::FfnOut,
        LayerKind::Head,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, LayerKind::Query | LayerKind::Key | LayerKind::Value | LayerKind::Output)
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, LayerKind::FfnIn | LayerKind::FfnOut)
    }
}

/// Number of MPO sites per layer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub attention: usize,
    pub ffn: usize,
    pub head: usize,
}

impl Default for SiteCounts {
    fn default() -> Self {
        Self { attention: 2, ffn: 3, head: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
    pub d_ff: usize,
    pub mode: LinearMode,
    /// Bond cap for MPO layers; required in MPO mode.
    pub chi: Option<usize>,
    /// Layer kinds that become MPOs in MPO mode.
    pub mpo_layers: Vec<LayerKind>,
    pub plan_strategy: PlanStrategy,
    pub sites: SiteCounts,
    pub apply_path: ApplyPath,
    /// Standard deviation of dense weights and embeddings at initialisation.
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 65,
            d_model: 128,
            heads: 4,
            layers: 4,
            context: 256,
            d_ff: 512,
            mode: LinearMode::Dense,
            chi: None,
            mpo_layers: LayerKind::ALL.to_vec(),
            plan_strategy: PlanStrategy::Even,
            sites: SiteCounts::default(),
            apply_path: ApplyPath::Reconstruct,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// `D = 32, H = 2, N = 2, T = 64` over a vocabulary of `vocab` symbols.
    /// At this width `0.02` leaves the embeddings too small to train in a
    /// few hundred steps, so the preset initialises with `0.1`.
    pub fn tiny(vocab: usize) -> Self {
        Self { vocab, d_model: 32, heads: 2, layers: 2, context: 64, d_ff: 128, init_std: 0.1, ..Self::default() }
    }

    pub fn dense(&self) -> Self {
        Self { mode: LinearMode::Dense, chi: None, ..self.clone() }
    }

    pub fn mpo(&self, chi: usize) -> Self {
        Self { mode: LinearMode::Mpo, chi: Some(chi), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.d_model, self.heads, self.layers, self.context, self.d_ff];
        if dims.contains(&0) {
            bail!(Config, "model dimensions must be positive: {self:?}");
        }
        if self.d_model % self.heads != 0 {
            bail!(Config, "embedding dim {} is not divisible by {} heads", self.d_model, self.heads);
        }
        if self.d_model % 2 != 0 {
            bail!(Config, "sinusoidal positions need an even embedding dim, got {}", self.d_model);
        }
        let sites = [self.sites.attention, self.sites.ffn, self.sites.head];
        if sites.contains(&0) {
            bail!(Config, "site counts must be positive: {:?}", self.sites);
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            bail!(Config, "ln_eps must be positive and init_std non-negative");
        }
        match (self.mode, self.chi) {
            (LinearMode::Mpo, None) => bail!(Config, "MPO mode needs a bond dimension"),
            (LinearMode::Mpo, Some(0)) => bail!(Config, "bond dimension must be at least 1"),
            (LinearMode::Dense, Some(_)) => bail!(Config, "a bond dimension only applies in MPO mode"),
            _ => Ok(()),
        }
    }

    /// `(out, in)` of a layer kind.
    pub fn layer_shape(&self, kind: LayerKind) -> (usize, usize) {
        let d = self.d_model;
        match kind {
            LayerKind::Query | LayerKind::Key | LayerKind::Value | LayerKind::Output => (d, d),
            LayerKind::FfnIn => (self.d_ff, d),
            LayerKind::FfnOut => (d, self.d_ff),
            LayerKind::Head => (self.vocab, d),
        }
    }

    pub fn sites_for(&self, kind: LayerKind) -> usize {
        match kind {
            k if k.is_attention() => self.sites.attention,
            LayerKind::Head => self.sites.head,
            _ => self.sites.ffn,
        }
    }

    pub fn plan(&self, kind: LayerKind, chi: usize) -> Result<FactorizationPlan> {
        let (out, inp) = self.layer_shape(kind);
        plan_with(self.plan_strategy, &PlanRequest::new(out, inp, self.sites_for(kind), chi))
    }

    /// Whether `kind` is stored as an MPO under this configuration.
    pub fn is_mpo(&self, kind: LayerKind) -> bool {
        self.mode == LinearMode::Mpo && self.mpo_layers.contains(&kind)
    }

    /// Smallest bond cap at which no layer is truncated.
    pub fn full_rank_chi(&self) -> Result<usize> {
        let mut chi = 1;
        for kind in LayerKind::ALL {
            let plan = self.plan(kind, usize::MAX)?;
            chi = chi.max(plan.bond_dims().into_iter().max().unwrap_or(1));
        }
        Ok(chi)
    }
}

/// `PE[t, 2k] = sin(t / 10000^(2k/D))`, `PE[t, 2k+1] = cos(t / 10000^(2k/D))`.
pub fn sinusoidal_pe<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        bail!(Config, "sinusoidal positions need an even dimension, got {dim}");
    }
    if len == 0 || dim == 0 {
        bail!(Config, "positional table needs positive extents, got {len} x {dim}");
    }
    Ok(Tensor::from_fn(&[len, dim], |idx| {
        let (t, j) = (idx / dim, idx % dim);
        let k2 = (j - j % 2) as f64;
        let angle = t as f64 / libm::pow(10000.0, k2 / dim as f64);
        T::from_f64(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
    }))
}

/// Mean cross-entropy of `logits` (`... x V`) against one target per row.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the target.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let Some(&classes) = logits.shape().last() else { bail!(Shape, "accuracy needs class scores") };
    let rows = logits.len() / classes;
    if rows != targets.len() || rows == 0 {
        bail!(Shape, "accuracy: {} targets for {rows} rows", targets.len());
    }
    let hits = logits.data().chunks(classes).zip(targets).filter(|(row, &t)| argmax(row) == t).count();
    Ok(hits as f64 / rows as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Linear {
    Dense { weight: ParamId, bias: ParamId },
    Mpo(MpoLinear),
}

impl Linear {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &Bindings, x: Var, path: ApplyPath) -> Result<Var> {
        match self {
            Linear::Dense { weight, bias } => {
                let y = tape.matmul_t(x, vars.var(*weight))?;
                tape.add(y, vars.var(*bias))
            }
            Linear::Mpo(layer) => layer.forward(tape, vars, x, path),
        }
    }

    /// Dense (or reconstructed) weight.
    pub fn weight<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        match self {
            Linear::Dense { weight, .. } => Ok(store.value(*weight).clone()),
            Linear::Mpo(layer) => layer.weight(store),
        }
    }

    /// Parameters of the weight alone, excluding the bias.
    pub fn weight_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        match self {
            Linear::Dense { weight, .. } => store.value(*weight).len(),
            Linear::Mpo(layer) => layer.cores.iter().map(|&id| store.value(id).len()).sum(),
        }
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        match self {
            Linear::Dense { weight, bias } => store.value(*weight).len() + store.value(*bias).len(),
            Linear::Mpo(layer) => layer.param_count(store),
        }
    }

    pub fn is_mpo(&self) -> bool {
        matches!(self, Linear::Mpo(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub w1: Linear,
    pub w2: Linear,
}

impl Block {
    pub fn linears(&self) -> [(LayerKind, &Linear); 6] {
        [
            (LayerKind::Query, &self.wq),
            (LayerKind::Key, &self.wk),
            (LayerKind::Value, &self.wv),
            (LayerKind::Output, &self.wo),
            (LayerKind::FfnIn, &self.w1),
            (LayerKind::FfnOut, &self.w2),
        ]
    }
}

/// How a parameter is initialised by [`RandomInit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Supplies tensors while a [`Transformer`] is assembled.
pub trait ParamSource<T: Scalar> {
    fn dense(&mut self, name: &str, kind: ParamKind, shape: &[usize], init: Init) -> Result<Tensor<T>>;
    fn mpo(&mut self, name: &str, plan: &FactorizationPlan) -> Result<MpoCores<T>>;
}

/// Fresh parameters: Gaussian dense weights, scaled Gaussian MPO cores.
pub struct RandomInit {
    rng: ChaCha8Rng,
    std: f64,
}

impl RandomInit {
    pub fn new(seed: u64, std: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }
}

impl<T: Scalar> ParamSource<T> for RandomInit {
    fn dense(&mut self, _name: &str, _kind: ParamKind, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        Ok(match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal => {
                let normal = Normal::new(0.0, self.std).map_err(|e| Error::Config(format!("{e}")))?;
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
            }
        })
    }

    fn mpo(&mut self, _name: &str, plan: &FactorizationPlan) -> Result<MpoCores<T>> {
        random_init_with(plan, &mut self.rng)
    }
}

/// Reconstruction quality of one compressed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub kind: LayerKind,
    pub chi: usize,
    pub rel_err: f64,
    pub params_dense: usize,
    pub params_mpo: usize,
    pub plan: FactorizationPlan,
}

/// Named tensors, e.g. from a checkpoint. Dense weights requested as MPOs
/// are converted with TT-SVD and reported.
pub struct TensorMap<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    kinds: BTreeMap<String, LayerKind>,
    reports: Vec<LayerReport>,
}

impl<T: Scalar> TensorMap<T> {
    pub fn new(tensors: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        Self { tensors: tensors.into_iter().collect(), kinds: BTreeMap::new(), reports: Vec::new() }
    }

    fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.tensors.remove(name).ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))
    }

    fn finish(self) -> Result<Vec<LayerReport>> {
        if let Some(name) = self.tensors.keys().next() {
            bail!(Input, "unexpected tensor `{name}` ({} unused)", self.tensors.len());
        }
        Ok(self.reports)
    }
}

impl<T: Scalar> ParamSource<T> for TensorMap<T> {
    fn dense(&mut self, name: &str, _kind: ParamKind, shape: &[usize], _init: Init) -> Result<Tensor<T>> {
        let t = self.take(name)?;
        if t.shape() != shape {
            bail!(Shape, "tensor `{name}` has shape {:?}, expected {shape:?}", t.shape());
        }
        Ok(t)
    }

    fn mpo(&mut self, name: &str, plan: &FactorizationPlan) -> Result<MpoCores<T>> {
        let first = format!("{name}.core0");
        if self.tensors.contains_key(&first) {
            let cores = (0..plan.sites()).map(|l| self.take(&format!("{name}.core{l}"))).collect::<Result<Vec<_>>>()?;
            return MpoCores::new(cores);
        }
        let w = self.take(&format!("{name}.weight"))?;
        let shape = [plan.out_features(), plan.in_features()];
        if w.shape() != shape {
            bail!(Shape, "tensor `{name}.weight` has shape {:?}, expected {shape:?}", w.shape());
        }
        let cores = mpo::tt_svd(&w, plan)?;
        let w_hat = mpo::reconstruct(&cores)?;
        let norm = w.frobenius_norm();
        let rel_err = if norm == 0.0 { w_hat.frobenius_norm() } else { w.sub(&w_hat)?.frobenius_norm() / norm };
        self.reports.push(LayerReport {
            layer: name.to_string(),
            kind: self.kinds.get(name).copied().unwrap_or(LayerKind::Head),
            chi: plan.chi,
            rel_err,
            params_dense: w.len(),
            params_mpo: cores.param_count(),
            plan: plan.clone(),
        });
        Ok(cores)
    }
}

/// Parameter totals per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub attention: usize,
    pub ffn: usize,
    pub layer_norm: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
    head: Linear,
    pe: Tensor<T>,
}

struct Builder<'a, T, S> {
    config: &'a ModelConfig,
    store: ParamStore<T>,
    source: &'a mut S,
}

impl<T: Scalar, S: ParamSource<T>> Builder<'_, T, S> {
    fn dense(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = self.source.dense(&name, kind, shape, init)?;
        Ok(self.store.push(name, kind, t))
    }

    fn layer_norm(&mut self, prefix: &str) -> Result<LayerNormParams> {
        let d = [self.config.d_model];
        Ok(LayerNormParams {
            gain: self.dense(format!("{prefix}.gain"), ParamKind::LayerNorm, &d, Init::Ones)?,
            bias: self.dense(format!("{prefix}.bias"), ParamKind::LayerNorm, &d, Init::Zeros)?,
        })
    }

    fn linear(&mut self, name: &str, kind: LayerKind) -> Result<Linear> {
        let (out, inp) = self.config.layer_shape(kind);
        if self.config.is_mpo(kind) {
            let plan = self.config.plan(kind, self.config.chi.unwrap_or(1))?;
            let cores = self.source.mpo(name, &plan)?;
            if cores.out_dims() != plan.out_dims || cores.in_dims() != plan.in_dims {
                bail!(Shape, "cores of `{name}` do not match plan {:?} x {:?}", plan.out_dims, plan.in_dims);
            }
            let bias = self.source.dense(&format!("{name}.bias"), ParamKind::Bias, &[out], Init::Zeros)?;
            return Ok(Linear::Mpo(MpoLinear::register(&mut self.store, name, plan, cores, Some(bias))?));
        }
        Ok(Linear::Dense {
            weight: self.dense(format!("{name}.weight"), ParamKind::Weight, &[out, inp], Init::Normal)?,
            bias: self.dense(format!("{name}.bias"), ParamKind::Bias, &[out], Init::Zeros)?,
        })
    }
}

fn block_layer_name(block: usize, kind: LayerKind) -> String {
    let suffix = match kind {
        LayerKind::Query => "attn.q",
        LayerKind::Key => "attn.k",
        LayerKind::Value => "attn.v",
        LayerKind::Output => "attn.o",
        LayerKind::FfnIn => "ffn.w1",
        LayerKind::FfnOut => "ffn.w2",
        LayerKind::Head => return "head".to_string(),
    };
    format!("blocks.{block}.{suffix}")
}

impl<T: Scalar> Transformer<T> {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut source = RandomInit::new(seed, config.init_std);
        Self::assemble(config, &mut source)
    }

    /// Builds the model in canonical parameter order, pulling every tensor
    /// from `source`.
    pub fn assemble<S: ParamSource<T>>(config: ModelConfig, source: &mut S) -> Result<Self> {
        config.validate()?;
        let pe = sinusoidal_pe(config.context, config.d_model)?;
        let mut b = Builder { config: &config, store: ParamStore::new(), source };
        let (v, d) = (config.vocab, config.d_model);
        let embedding = b.dense("tok_emb".into(), ParamKind::Embedding, &[v, d], Init::Normal)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let ln1 = b.layer_norm(&format!("blocks.{i}.ln1"))?;
            let wq = b.linear(&block_layer_name(i, LayerKind::Query), LayerKind::Query)?;
            let wk = b.linear(&block_layer_name(i, LayerKind::Key), LayerKind::Key)?;
            let wv = b.linear(&block_layer_name(i, LayerKind::Value), LayerKind::Value)?;
            let wo = b.linear(&block_layer_name(i, LayerKind::Output), LayerKind::Output)?;
            let ln2 = b.layer_norm(&format!("blocks.{i}.ln2"))?;
            let w1 = b.linear(&block_layer_name(i, LayerKind::FfnIn), LayerKind::FfnIn)?;
            let w2 = b.linear(&block_layer_name(i, LayerKind::FfnOut), LayerKind::FfnOut)?;
            blocks.push(Block { ln1, wq, wk, wv, wo, ln2, w1, w2 });
        }
        let ln_f = b.layer_norm("ln_f")?;
        let head = b.linear("head", LayerKind::Head)?;
        let store = b.store;
        Ok(Self { config, store, embedding, blocks, ln_f, head, pe })
    }

    /// Rebuilds a model from named tensors. Dense weights of layers that
    /// `config` marks as MPO are compressed; the returned reports describe
    /// those conversions.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<(Self, Vec<LayerReport>)> {
        let mut map = TensorMap::new(tensors);
        for i in 0..config.layers {
            for kind in &LayerKind::ALL[..6] {
                map.kinds.insert(block_layer_name(i, *kind), *kind);
            }
        }
        map.kinds.insert("head".into(), LayerKind::Head);
        let model = Self::assemble(config, &mut map)?;
        Ok((model, map.finish()?))
    }

    /// Replaces every compressible dense layer by its TT-SVD at bond cap
    /// `chi`.
    pub fn compress(&self, chi: usize) -> Result<(Self, Vec<LayerReport>)> {
        if self.config.mode != LinearMode::Dense {
            bail!(Usage, "only dense models can be compressed");
        }
        let config = self.config.mpo(chi);
        Self::from_tensors(config, self.named_tensors().map(|(n, t)| (n.to_string(), t.clone())))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value))
    }

    /// Every linear layer with its name, in forward order.
    pub fn linears(&self) -> Vec<(String, LayerKind, &Linear)> {
        let mut out = Vec::with_capacity(6 * self.blocks.len() + 1);
        for (i, block) in self.blocks.iter().enumerate() {
            for (kind, lin) in block.linears() {
                out.push((block_layer_name(i, kind), kind, lin));
            }
        }
        out.push(("head".to_string(), LayerKind::Head, &self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            embedding: self.store.value(self.embedding).len(),
            layer_norm: self.store.iter().filter(|(_, p)| p.kind == ParamKind::LayerNorm).map(|(_, p)| p.value.len()).sum(),
            ..ParamBreakdown::default()
        };
        for (_, kind, lin) in self.linears() {
            let n = lin.param_count(&self.store);
            match kind {
                LayerKind::Head => b.head += n,
                k if k.is_attention() => b.attention += n,
                _ => b.ffn += n,
            }
        }
        b.total = b.embedding + b.attention + b.ffn + b.layer_norm + b.head;
        b
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            bail!(Input, "{} tokens cannot form {batch} equal rows", tokens.len());
        }
        let len = tokens.len() / batch;
        if len > self.config.context {
            bail!(Input, "sequence length {len} exceeds context {}", self.config.context);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            bail!(Input, "token id {bad} out of range for vocabulary of {}", self.config.vocab);
        }
        Ok(len)
    }

    fn attention(&self, tape: &mut Tape<T>, vars: &Bindings, block: &Block, h: Var, batch: usize, len: usize) -> Result<Var> {
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let path = self.config.apply_path;
        let split = |tape: &mut Tape<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, vars, h, path)?;
            let y = tape.reshape(y, &[batch, len, heads, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(tape, &block.wq)?;
        let k = split(tape, &block.wk)?;
        let v = split(tape, &block.wv)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / libm::sqrt(dh as f64)))?;
        let att = tape.softmax(scores, true)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, len, d])?;
        block.wo.forward(tape, vars, ctx, path)
    }

    /// Logits of shape `(batch, len, V)` for `tokens` laid out row-major as
    /// `batch x len`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &Bindings, tokens: &[usize], batch: usize) -> Result<Var> {
        let len = self.check_tokens(tokens, batch)?;
        let (d, eps) = (self.config.d_model, T::from_f64(self.config.ln_eps));
        let path = self.config.apply_path;
        let x = tape.gather(vars.var(self.embedding), tokens)?;
        let x = tape.reshape(x, &[batch, len, d])?;
        let pe = tape.constant(Tensor::new([len, d], self.pe.data()[..len * d].to_vec())?);
        let mut x = tape.add(x, pe)?;
        for block in &self.blocks {
            let h = tape.layer_norm(x, vars.var(block.ln1.gain), vars.var(block.ln1.bias), eps)?;
            let a = self.attention(tape, vars, block, h, batch, len)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, vars.var(block.ln2.gain), vars.var(block.ln2.bias), eps)?;
            let f = block.w1.forward(tape, vars, h, path)?;
            let f = tape.relu(f)?;
            let f = block.w2.forward(tape, vars, f, path)?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, vars.var(self.ln_f.gain), vars.var(self.ln_f.bias), eps)?;
        self.head.forward(tape, vars, h, path)
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let y = self.forward(&mut tape, &vars, tokens, batch)?;
        Ok(tape.value(y).clone())
    }

    /// `(mean cross-entropy, token accuracy)` of next-token predictions.
    pub fn loss_and_accuracy(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &vars, inputs, batch)?;
        let loss = cross_entropy(&mut tape, logits, targets)?;
        let acc = token_accuracy(tape.value(logits), targets)?;
        Ok((tape.value(loss).item().as_f64(), acc))
    }

    /// Extends `prompt` by `length` sampled tokens. A temperature of 0 picks
    /// the arg-max.
    pub fn generate<R: Rng + ?Sized>(&self, prompt: &[usize], length: usize, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            bail!(Input, "temperature must be finite and non-negative, got {temperature}");
        }
        let mut out = prompt.to_vec();
        if length == 0 {
            return Ok(out);
        }
        if prompt.is_empty() {
            bail!(Input, "generation needs a non-empty prompt");
        }
        let v = self.config.vocab;
        for _ in 0..length {
            let start = out.len().saturating_sub(self.config.context);
            let window = &out[start..];
            let logits = self.logits(window, 1)?;
            let last = &logits.data()[(window.len() - 1) * v..];
            let next = if temperature == 0.0 {
                argmax(last)
            } else {
                let max = last.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = last.iter().map(|x| libm::exp((x.as_f64() - max) / temperature)).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = v - 1;
                for (j, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = j;
                        break;
                    }
                    u -= w;
                }
                pick
            };
            out.push(next);
        }
        Ok(out)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.push(p.name.clone(), p.kind, p.value.cast());
        }
        Transformer {
            config: self.config.clone(),
            store,
            embedding: self.embedding,
            blocks: self.blocks.clone(),
            ln_f: self.ln_f,
            head: self.head.clone(),
            pe: self.pe.cast(),
        }
    }
}

/// `param_count(plan) - out * in` for each MPO layer kind, handy when
/// comparing configurations.
pub fn mpo_savings(config: &ModelConfig, kind: LayerKind, chi: usize) -> Result<isize> {
    let plan = config.plan(kind, chi)?;
    Ok(param_count(&plan) as isize - plan.dense_count() as isize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..vocab)).collect()
    }

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig { vocab, d_model: 16, heads: 2, layers: 2, context: 8, d_ff: 64, ..ModelConfig::default() }
    }

    #[test]
    fn positional_table() {
        let pe: Tensor<f64> = sinusoidal_pe(16, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at(&[0, j]), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(&[1, 0]) - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for t in 0..16 {
            for k in 0..4 {
                let angle = t as f64 / libm::pow(10000.0, (2 * k) as f64 / 8.0);
                let shifted = libm::cos(angle - core::f64::consts::FRAC_PI_2);
                assert!((pe.at(&[t, 2 * k]) - shifted).abs() < 1e-12);
            }
        }
        assert!(matches!(sinusoidal_pe::<f64>(4, 7), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let base = ModelConfig::default();
        assert!(base.validate().is_ok());
        assert!(ModelConfig { heads: 3, ..base.clone() }.validate().is_err());
        assert!(base.mpo(0).validate().is_err());
        assert!(ModelConfig { mode: LinearMode::Mpo, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { chi: Some(4), ..base.clone() }.validate().is_err());
        assert!(base.mpo(8).validate().is_ok());
        assert!(ModelConfig { d_model: 9, heads: 1, ..base }.validate().is_err());
    }

    #[test]
    fn reference_plans() {
        let cfg = ModelConfig::default();
        let dims = |k| {
            let p = cfg.plan(k, 8).unwrap();
            (p.out_dims, p.in_dims)
        };
        assert_eq!(dims(LayerKind::Query), (vec![8, 16], vec![8, 16]));
        assert_eq!(dims(LayerKind::FfnIn), (vec![8, 8, 8], vec![4, 4, 8]));
        assert_eq!(dims(LayerKind::FfnOut), (vec![4, 4, 8], vec![8, 8, 8]));
        assert_eq!(dims(LayerKind::Head), (vec![5, 13], vec![8, 16]));
    }

    #[test]
    fn output_shape_and_input_errors() {
        let model = Transformer::<f32>::new(small(65), 1).unwrap();
        let toks = tokens(3 * 5, 65, 2);
        let logits = model.logits(&toks, 3).unwrap();
        assert_eq!(logits.shape(), &[3, 5, 65]);
        assert!(logits.is_finite());
        assert!(matches!(model.logits(&tokens(9, 65, 2), 1), Err(Error::Input(_))));
        assert!(matches!(model.logits(&[0, 65], 1), Err(Error::Input(_))));
        assert!(matches!(model.logits(&[0, 1, 2], 2), Err(Error::Input(_))));
    }

    #[test]
    fn dense_param_count_matches_inventory() {
        for cfg in [ModelConfig::default(), small(20), ModelConfig::tiny(73)] {
            let model = Transformer::<f32>::new(cfg.clone(), 0).unwrap();
            let (v, d, f, n) = (cfg.vocab, cfg.d_model, cfg.d_ff, cfg.layers);
            let block = 4 * (d * d + d) + (f * d + f) + (d * f + d) + 4 * d;
            let expect = v * d + n * block + 2 * d + v * d + v;
            assert_eq!(model.param_count(), expect);
            let b = model.param_breakdown();
            assert_eq!(b.total, expect);
            assert_eq!(b.embedding, v * d);
            assert_eq!(b.head, v * d + v);
        }
        // 8320 + 4 * 198272 + 256 + 8385
        assert_eq!(Transformer::<f32>::new(ModelConfig::default(), 0).unwrap().param_count(), 810_049);
    }

    #[test]
    fn single_mpo_layer_changes_count_by_plan_difference() {
        let base = ModelConfig { layers: 1, ..small(65) };
        let dense = Transformer::<f32>::new(base.clone(), 0).unwrap().param_count();
        for kind in LayerKind::ALL {
            for chi in [1, 3, 8] {
                let cfg = ModelConfig { mpo_layers: vec![kind], ..base.mpo(chi) };
                let model = Transformer::<f32>::new(cfg.clone(), 0).unwrap();
                let plan = cfg.plan(kind, chi).unwrap();
                let delta = param_count(&plan) as isize - plan.dense_count() as isize;
                assert_eq!(model.param_count() as isize - dense as isize, delta, "{kind:?} chi {chi}");
                assert_eq!(mpo_savings(&cfg, kind, chi).unwrap(), delta);
            }
        }
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        for mode in [LinearMode::Dense, LinearMode::Mpo] {
            let cfg = ModelConfig { layers: 3, ..small(30) };
            let cfg = if mode == LinearMode::Mpo { cfg.mpo(4) } else { cfg };
            let model = Transformer::<f32>::new(cfg, 3).unwrap();
            let base = tokens(8, 30, 4);
            let ref_logits = model.logits(&base, 1).unwrap();
            for t in 0..8 {
                let mut changed = base.clone();
                changed[t] = (changed[t] + 7) % 30;
                let logits = model.logits(&changed, 1).unwrap();
                assert_eq!(&logits.data()[..t * 30], &ref_logits.data()[..t * 30]);
                assert_ne!(&logits.data()[t * 30..(t + 1) * 30], &ref_logits.data()[t * 30..(t + 1) * 30]);
            }
        }
    }

    #[test]
    fn full_rank_compression_reproduces_logits() {
        let cfg = ModelConfig { init_std: 0.2, ..small(20) };
        let dense = Transformer::<f32>::new(cfg.clone(), 5).unwrap();
        let chi = cfg.full_rank_chi().unwrap();
        let (mpo, reports) = dense.compress(chi).unwrap();
        assert_eq!(reports.len(), 6 * cfg.layers + 1);
        assert!(reports.iter().all(|r| r.rel_err < 1e-5));
        let toks = tokens(16, 20, 6);
        let a = dense.logits(&toks, 2).unwrap();
        let b = mpo.logits(&toks, 2).unwrap();
        assert!(a.relative_error(&b).unwrap() < 1e-4);
        assert!(mpo.compress(4).is_err());
    }

    #[test]
    fn direct_and_reconstruct_paths_agree() {
        let cfg = small(20).mpo(3);
        let model = Transformer::<f64>::new(cfg.clone(), 8).unwrap();
        let direct = Transformer::<f64>::from_tensors(
            ModelConfig { apply_path: ApplyPath::Direct, ..cfg },
            model.named_tensors().map(|(n, t)| (n.to_string(), t.clone())),
        )
        .unwrap()
        .0;
        let toks = tokens(12, 20, 9);
        let a = model.logits(&toks, 2).unwrap();
        let b = direct.logits(&toks, 2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn tensor_round_trip_and_missing_tensors() {
        let model = Transformer::<f32>::new(small(12).mpo(2), 1).unwrap();
        let named: Vec<(String, Tensor<f32>)> = model.named_tensors().map(|(n, t)| (n.into(), t.clone())).collect();
        let (again, reports) = Transformer::from_tensors(model.config().clone(), named.clone()).unwrap();
        assert!(reports.is_empty());
        assert_eq!(again, model);
        let mut short = named.clone();
        short.pop();
        assert!(matches!(Transformer::from_tensors(model.config().clone(), short), Err(Error::Input(_))));
        let mut extra = named;
        extra.push(("stray".into(), Tensor::zeros(&[1])));
        assert!(Transformer::from_tensors(model.config().clone(), extra).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 3, 65]));
        let loss = cross_entropy(&mut tape, uniform, &[0, 5, 9, 64, 1, 2]).unwrap();
        assert!((tape.value(loss).item() - 4.17439).abs() < 1e-5);

        let targets = [1, 0, 2, 2];
        let onehot = Tensor::from_fn(&[2, 2, 3], |i| if targets[i / 3] == i % 3 { 50.0 } else { 0.0 });
        let x = tape.constant(onehot.clone());
        let loss = cross_entropy(&mut tape, x, &targets).unwrap();
        assert!(tape.value(loss).item() < 1e-20);
        assert_eq!(token_accuracy(&onehot, &targets).unwrap(), 1.0);

        // scalar-loop reference
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::from_fn(&[2, 3, 5], |_| rng.random_range(-3.0..3.0));
        let targets = [4, 0, 2, 1, 3, 3];
        let mut reference = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            reference -= libm::log(libm::exp(row[t]) / z);
        }
        reference /= 6.0;
        let x = tape.constant(logits);
        let loss = cross_entropy(&mut tape, x, &targets).unwrap();
        assert!((tape.value(loss).item() - reference).abs() < 1e-6);
    }

    #[test]
    fn accuracy_tie_break_and_chance_level() {
        let constant = Tensor::<f32>::zeros(&[10, 4]);
        let targets = [0, 1, 0, 3, 0, 2, 0, 0, 1, 1];
        assert_eq!(token_accuracy(&constant, &targets).unwrap(), 0.5);

        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::<f32>::from_fn(&[n, 65], |_| rng.random::<f32>());
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..65)).collect();
        let acc = token_accuracy(&logits, &targets).unwrap();
        let p = 1.0 / 65.0;
        let sigma = libm::sqrt(p * (1.0 - p) / n as f64);
        assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
        assert!(token_accuracy(&logits, &targets[1..]).is_err());
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let cfg = ModelConfig {
            vocab: 7,
            d_model: 8,
            heads: 2,
            layers: 1,
            context: 4,
            d_ff: 32,
            init_std: 0.3,
            ..ModelConfig::default()
        }
        .mpo(2);
        let model = Transformer::<f64>::new(cfg, 11).unwrap();
        let inputs = tokens(8, 7, 12);
        let targets = tokens(8, 7, 13);
        let mut checked = 0;
        for (id, param) in model.store().iter() {
            let interesting = param.name == "tok_emb"
                || param.name.ends_with("q.core0")
                || param.name.ends_with("v.core1")
                || param.name.ends_with("w1.core1")
                || param.name.ends_with("w2.core2")
                || param.name == "blocks.0.ln1.gain"
                || param.name == "head.core0"
                || param.name == "head.bias";
            if !interesting {
                continue;
            }
            let report = grad_check(
                |tape, x| {
                    let mut vars = model.store().bind(tape, false);
                    vars.set(id, x);
                    let logits = model.forward(tape, &vars, &inputs, 2)?;
                    cross_entropy(tape, logits, &targets)
                },
                &param.value,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{}: {report:?}", param.name);
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn generation_contract() {
        let model = Transformer::<f32>::new(small(10), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = [1, 2, 3];
        assert_eq!(model.generate(&prompt, 0, 0.0, &mut rng).unwrap(), prompt.to_vec());
        let a = model.generate(&prompt, 12, 0.0, &mut rng).unwrap();
        let b = model.generate(&prompt, 12, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        let s = model.generate(&prompt, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s, model.generate(&prompt, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        assert!(s.iter().all(|&t| t < 10));
        assert!(model.generate(&[], 3, 0.0, &mut rng).is_err());
        assert!(model.generate(&prompt, 3, -1.0, &mut rng).is_err());
    }
}
