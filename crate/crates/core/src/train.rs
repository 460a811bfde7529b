//! Optimisation loop: AdamW, warmup plus cosine schedule, global-norm
//! clipping and periodic evaluation, for training from scratch or fine-tuning
//! a compressed model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{sample_batch, SplitCorpus};
use crate::error::{bail, Error, Result};
use crate::model::{cross_entropy, LayerReport, ModelConfig, Transformer};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameter kinds that receive decoupled weight decay.
    pub decay_kinds: Vec<ParamKind>,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            seq: 256,
            lr_max: 3e-4,
            lr_min: 0.0,
            warmup: 100,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.1,
            decay_kinds: alloc::vec![ParamKind::Weight, ParamKind::MpoCore],
            clip_norm: 1.0,
            eval_every: 100,
            eval_batches: 20,
            eval_batch_size: 8,
            seed: 0,
            eval_seed: 1234,
        }
    }
}

impl TrainConfig {
    /// 500 steps on length-64 windows with peak rate `1e-2`, for
    /// [`ModelConfig::tiny`](crate::model::ModelConfig::tiny).
    pub fn tiny() -> Self {
        Self { steps: 500, seq: 64, lr_max: 1e-2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.batch, self.seq, self.eval_every, self.eval_batches, self.eval_batch_size];
        if counts.contains(&0) {
            bail!(Config, "batch, seq and evaluation settings must be positive");
        }
        if self.warmup > self.steps {
            bail!(Config, "warmup ({}) exceeds steps ({})", self.warmup, self.steps);
        }
        let rates = [self.lr_max, self.lr_min, self.eps, self.weight_decay, self.clip_norm];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || self.lr_min > self.lr_max {
            bail!(Config, "learning rates, eps, weight decay and clip norm must be finite and non-negative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            bail!(Config, "betas must lie in [0, 1), got {:?}", self.betas);
        }
        Ok(())
    }

    fn decays(&self, kind: ParamKind) -> bool {
        self.decay_kinds.contains(&kind)
    }
}

/// Learning rate after `step` updates: linear warmup from 0, then cosine
/// decay to `lr_min` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr_max * step as f64 / cfg.warmup as f64;
    }
    if cfg.steps <= cfg.warmup {
        return cfg.lr_max;
    }
    let progress = ((step - cfg.warmup) as f64 / (cfg.steps - cfg.warmup) as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Global L2 norm of `grads`.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum())
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::from_f64(v.as_f64() * s);
            }
        }
    }
    norm
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update with decoupled weight decay on the
    /// kinds listed in `cfg.decay_kinds`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            bail!(Shape, "{} gradients for {} parameters", grads.len(), store.len());
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                bail!(Shape, "gradient of `{}` has shape {:?}, expected {:?}", p.name, g.shape(), p.value.shape());
            }
            if !g.is_finite() {
                bail!(Numeric, "non-finite gradient for `{}`", p.name);
            }
        }
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let decay = if cfg.decays(p.kind) { lr * cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let mut x = w.as_f64();
                x -= decay * x;
                x -= lr * (mj / c1) / (libm::sqrt(vj / c2) + cfg.eps);
                *w = T::from_f64(x);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    /// Seconds since the run started, as reported by the observer.
    pub wall_clock: f64,
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub message: String,
}

/// Receives metrics as they are produced and supplies wall-clock time.
pub trait Observer {
    fn now(&mut self) -> f64 {
        0.0
    }

    fn record(&mut self, _record: &MetricsRecord) {}
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Transformer<T>,
    pub metrics: Vec<MetricsRecord>,
    pub divergence: Option<Divergence>,
}

fn eval_seq<T: Scalar>(model: &Transformer<T>, cfg: &TrainConfig) -> usize {
    cfg.seq.min(model.config().context)
}

/// Mean loss and token accuracy over `cfg.eval_batches` batches of size
/// `cfg.eval_batch_size`, drawn with a generator seeded from `cfg.eval_seed`
/// and `step`. The training generator is never touched.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, tokens: &[usize], cfg: &TrainConfig, step: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    rng.set_stream(step as u64);
    let seq = eval_seq(model, cfg);
    let (mut loss, mut acc) = (0.0, 0.0);
    for _ in 0..cfg.eval_batches {
        let b = sample_batch(tokens, cfg.eval_batch_size, seq, &mut rng)?;
        let (l, a) = model.loss_and_accuracy(&b.inputs, &b.targets, b.batch)?;
        loss += l;
        acc += a;
    }
    let n = cfg.eval_batches as f64;
    Ok((loss / n, acc / n))
}

/// Loss and gradients of one batch, gradients aligned with the store.
pub fn loss_and_grads<T: Scalar>(model: &Transformer<T>, inputs: &[usize], targets: &[usize], batch: usize) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape, true);
    let logits = model.forward(&mut tape, &vars, inputs, batch)?;
    let loss = cross_entropy(&mut tape, logits, targets)?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    let grads = model
        .store()
        .iter()
        .zip(vars.vars())
        .map(|((_, p), &v)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((value, grads))
}

/// Trains `model` in place for `cfg.steps` updates.
///
/// Records are emitted at step 0, every `eval_every` steps and at the final
/// step. `train_loss` is the mean batch loss since the previous record (the
/// first batch's loss for step 0). A non-finite loss or gradient stops the
/// run; the partial metrics and a final diagnostic record are returned.
pub fn train<T: Scalar>(mut model: Transformer<T>, corpus: &SplitCorpus, cfg: &TrainConfig, observer: &mut dyn Observer) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if corpus.vocab.len() > model.config().vocab {
        bail!(Config, "corpus has {} symbols but the model only {}", corpus.vocab.len(), model.config().vocab);
    }
    if cfg.seq > model.config().context {
        bail!(Config, "sequence length {} exceeds model context {}", cfg.seq, model.config().context);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(model.store());
    let mut metrics = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let emit = |model: &Transformer<T>, step: usize, train_loss: f64, observer: &mut dyn Observer| -> Result<MetricsRecord> {
        let (val_loss, val_accuracy) = evaluate(model, &corpus.val, cfg, step)?;
        let record = MetricsRecord { step, train_loss, val_loss, val_accuracy, learning_rate: lr_at(step, cfg), wall_clock: observer.now() };
        observer.record(&record);
        Ok(record)
    };
    let mut divergence = None;
    if cfg.steps == 0 {
        let b = sample_batch(&corpus.train, cfg.batch, cfg.seq, &mut rng)?;
        let (loss, _) = model.loss_and_accuracy(&b.inputs, &b.targets, b.batch)?;
        metrics.push(emit(&model, 0, loss, observer)?);
    }
    for step in 1..=cfg.steps {
        let b = sample_batch(&corpus.train, cfg.batch, cfg.seq, &mut rng)?;
        let (loss, mut grads) = loss_and_grads(&model, &b.inputs, &b.targets, b.batch)?;
        if step == 1 {
            metrics.push(emit(&model, 0, loss, observer)?);
        }
        if !loss.is_finite() {
            divergence = Some(Divergence { step, message: format!("non-finite training loss {loss}") });
            break;
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        // the update after `step - 1` completed steps uses lr_at(step - 1)
        match opt.step(model.store_mut(), &grads, lr_at(step - 1, cfg), cfg) {
            Ok(()) => {}
            Err(Error::Numeric(message)) => {
                divergence = Some(Divergence { step, message });
                break;
            }
            Err(e) => return Err(e),
        }
        loss_sum += loss;
        loss_count += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            metrics.push(emit(&model, step, loss_sum / loss_count as f64, observer)?);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    if let Some(d) = &divergence {
        let record = MetricsRecord {
            step: d.step,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            val_accuracy: f64::NAN,
            learning_rate: lr_at(d.step.min(cfg.steps), cfg),
            wall_clock: observer.now(),
        };
        observer.record(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { model, metrics, divergence })
}

/// Randomly initialises a model from `cfg.seed` and trains it.
pub fn train_from_scratch<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &SplitCorpus,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome<T>> {
    let model = Transformer::new(model_cfg.clone(), cfg.seed)?;
    train(model, corpus, cfg, observer)
}

/// Result of [`compress_then_finetune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub layers: Vec<LayerReport>,
    /// Validation `(loss, accuracy)` of the compressed model before any
    /// update, on the step-0 evaluation batches.
    pub initial: (f64, f64),
    pub outcome: TrainOutcome<T>,
}

/// Replaces every compressible layer of `dense` by its TT-SVD at bond cap
/// `chi` and fine-tunes for `finetune_steps` with the recipe in `cfg`.
pub fn compress_then_finetune<T: Scalar>(
    dense: &Transformer<T>,
    chi: usize,
    finetune_steps: usize,
    cfg: &TrainConfig,
    corpus: &SplitCorpus,
    observer: &mut dyn Observer,
) -> Result<FinetuneOutcome<T>> {
    let (model, layers) = dense.compress(chi)?;
    let initial = evaluate(&model, &corpus.val, cfg, 0)?;
    let cfg = TrainConfig { steps: finetune_steps, warmup: cfg.warmup.min(finetune_steps), ..cfg.clone() };
    let outcome = train(model, corpus, &cfg, observer)?;
    Ok(FinetuneOutcome { layers, initial, outcome })
}
