use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use mpogpt_core::model::{LinearMode, Transformer};
use mpogpt_core::train::{self, evaluate, TrainConfig, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Preset, RunConfig};
use crate::corpus::{self, Corpus};
use crate::error::{CliError, Result};
use crate::metrics::{write_csv, CsvObserver, LayerRow, LAYERS_HEADER};

#[derive(Debug, Parser)]
#[command(name = "mpogpt", version, about = "Train, compress and compare MPO-factorised character-level GPTs")]
pub struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense or MPO model from random initialisation.
    Train(TrainArgs),
    /// Compress a dense checkpoint with TT-SVD, optionally fine-tuning.
    Compress(CompressArgs),
    /// Train a dense baseline and one MPO model per bond dimension.
    Sweep(SweepArgs),
    /// Sample text from a checkpoint.
    Generate(GenerateArgs),
    /// Print a configuration with every default filled in.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigSource {
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

impl ConfigSource {
    pub fn load(&self) -> Result<RunConfig> {
        match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path),
            (None, p) => Ok(RunConfig::preset(p.unwrap_or(Preset::Picogpt))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Dense,
    Mpo,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Overrides `model.mode` from the configuration.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Bond dimension of every MPO layer.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub chi: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A bond dimension, or `full` for the largest rank any layer can use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChiArg {
    Full,
    Value(usize),
}

impl FromStr for ChiArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(ChiArg::Full);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("bond dimension must be at least 1".into()),
            Ok(n) => Ok(ChiArg::Value(n)),
            Err(_) => Err(format!("expected a positive integer or `full`, got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Dense checkpoint to compress.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bond dimension, or `full` for lossless compression.
    #[arg(long)]
    pub chi: ChiArg,
    /// Fine-tuning steps after compression.
    #[arg(long, default_value_t = 0)]
    pub finetune: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Bond dimensions to train.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32", value_parser = clap::value_parser!(u64).range(1..))]
    pub chis: Vec<u64>,
    /// Runs trained concurrently. Defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Characters to sample after the prompt.
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    /// Softmax temperature; 0 picks the most likely character.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub source: ConfigSource,
}

pub fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Train(a) => cmd_train(&a, quiet),
        Command::Compress(a) => cmd_compress(&a, quiet).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a, quiet).map(|_| ()),
        Command::Generate(a) => {
            let text = cmd_generate(&a)?;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(CliError::io("<stdout>"))
        }
        Command::Config(a) => {
            let cfg = a.source.load()?;
            cfg.validate()?;
            print!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Fixes the vocabulary size and corpus provenance of `cfg` to `corpus`.
fn resolve(mut cfg: RunConfig, corpus: &Corpus) -> Result<RunConfig> {
    cfg.model.vocab = corpus.split.vocab.len();
    cfg.corpus = corpus.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// Trains from scratch into `dir`: `config.json`, `metrics.csv` and, unless
/// the run diverged, `checkpoint.bin`.
fn train_into(cfg: &RunConfig, corpus: &Corpus, dir: &Path, label: &str, quiet: bool) -> Result<TrainOutcome<f32>> {
    create_dir(dir)?;
    cfg.save(&dir.join("config.json"))?;
    let mut observer = CsvObserver::create(&dir.join("metrics.csv"), label)?.quiet(quiet);
    let outcome = train::train_from_scratch::<f32>(&cfg.model, &cfg.train, &corpus.split, &mut observer)?;
    observer.finish()?;
    if outcome.divergence.is_none() {
        checkpoint::save(&dir.join("checkpoint.bin"), cfg, &corpus.split.vocab, &outcome.model)?;
    }
    Ok(outcome)
}

fn divergence_error(label: &str, outcome: &TrainOutcome<f32>) -> Option<CliError> {
    outcome.divergence.as_ref().map(|d| CliError::Numeric(format!("{label} diverged at step {}: {}", d.step, d.message)))
}

pub fn cmd_train(args: &TrainArgs, quiet: bool) -> Result<()> {
    let mut cfg = args.source.load()?;
    let mode = match args.mode {
        Some(ModeArg::Dense) => LinearMode::Dense,
        Some(ModeArg::Mpo) => LinearMode::Mpo,
        None => cfg.model.mode,
    };
    match (mode, args.chi) {
        (LinearMode::Dense, Some(_)) => return Err(CliError::Usage("--chi is only valid with --mode mpo".into())),
        (LinearMode::Dense, None) => cfg.model = cfg.model.dense(),
        (LinearMode::Mpo, Some(chi)) => cfg.model = cfg.model.mpo(chi as usize),
        (LinearMode::Mpo, None) if args.mode.is_some() || cfg.model.chi.is_none() => {
            return Err(CliError::Usage("--mode mpo requires --chi".into()))
        }
        (LinearMode::Mpo, None) => {}
    }
    cfg.validate()?;
    let corpus = corpus::load(&cfg.corpus)?;
    let cfg = resolve(cfg, &corpus)?;
    let label = match cfg.model.chi {
        Some(chi) if cfg.model.mode == LinearMode::Mpo => format!("mpo chi={chi}"),
        _ => "dense".to_string(),
    };
    let outcome = train_into(&cfg, &corpus, &args.out, &label, quiet)?;
    if let Some(e) = divergence_error(&label, &outcome) {
        return Err(e);
    }
    if !quiet {
        eprintln!("{label}: {} parameters, wrote {}", outcome.model.param_count(), args.out.display());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressSummary {
    pub chi: usize,
    pub params_dense: usize,
    pub params_mpo: usize,
    pub ratio: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub dense_val_loss: f64,
    pub dense_val_acc: f64,
    /// Compressed model before any fine-tuning.
    pub compressed_val_loss: f64,
    pub compressed_val_acc: f64,
    pub finetune_steps: usize,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
}

pub fn cmd_compress(args: &CompressArgs, quiet: bool) -> Result<CompressSummary> {
    let ck = checkpoint::load::<f32>(&args.checkpoint)?;
    if ck.model.config().mode != LinearMode::Dense {
        return Err(CliError::Usage(format!("{} is already MPO-compressed; compress needs a dense checkpoint", args.checkpoint.display())));
    }
    let corpus = corpus::load(&ck.config.corpus)?;
    if corpus.split.vocab != ck.vocab {
        return Err(CliError::Corpus(format!("{} has a different vocabulary from the checkpoint", corpus.path.display())));
    }
    let chi = match args.chi {
        ChiArg::Full => ck.model.config().full_rank_chi()?,
        ChiArg::Value(n) => n,
    };
    create_dir(&args.out)?;

    // decompose in double precision, store in single
    let (compressed, layers) = ck.model.cast::<f64>().compress(chi)?;
    let compressed = compressed.cast::<f32>();
    let rows: Vec<LayerRow> = layers.iter().map(LayerRow::from).collect();
    write_csv(&args.out.join("layers.csv"), &LAYERS_HEADER, &rows)?;

    let tcfg = TrainConfig { steps: args.finetune, warmup: ck.config.train.warmup.min(args.finetune), ..ck.config.train.clone() };
    let cfg = RunConfig { model: compressed.config().clone(), train: tcfg, corpus: ck.config.corpus.clone() };
    cfg.save(&args.out.join("config.json"))?;
    let dense_eval = evaluate(&ck.model, &corpus.split.val, &cfg.train, 0)?;
    let initial = evaluate(&compressed, &corpus.split.val, &cfg.train, 0)?;
    if !quiet {
        eprintln!(
            "chi={chi}: dense val {:.4} ({:.2}%), compressed val {:.4} ({:.2}%)",
            dense_eval.0,
            100.0 * dense_eval.1,
            initial.0,
            100.0 * initial.1
        );
    }

    let (model, fin) = if args.finetune > 0 {
        let mut observer = CsvObserver::create(&args.out.join("metrics.csv"), format!("finetune chi={chi}"))?.quiet(quiet);
        let outcome = train::train(compressed, &corpus.split, &cfg.train, &mut observer)?;
        observer.finish()?;
        if let Some(e) = divergence_error("fine-tuning", &outcome) {
            return Err(e);
        }
        let last = outcome.metrics.last().expect("training records step 0");
        let fin = (last.val_loss, last.val_accuracy);
        (outcome.model, fin)
    } else {
        let _ = fs::remove_file(args.out.join("metrics.csv"));
        (compressed, initial)
    };
    checkpoint::save(&args.out.join("checkpoint.bin"), &cfg, &ck.vocab, &model)?;

    let errs = layers.iter().map(|l| l.rel_err);
    let summary = CompressSummary {
        chi,
        params_dense: ck.model.param_count(),
        params_mpo: model.param_count(),
        ratio: ck.model.param_count() as f64 / model.param_count() as f64,
        max_rel_err: errs.clone().fold(0.0, f64::max),
        mean_rel_err: errs.sum::<f64>() / layers.len().max(1) as f64,
        dense_val_loss: dense_eval.0,
        dense_val_acc: dense_eval.1,
        compressed_val_loss: initial.0,
        compressed_val_acc: initial.1,
        finetune_steps: args.finetune,
        final_val_loss: fin.0,
        final_val_acc: fin.1,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
    crate::write_atomic(&args.out.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}

/// One model of a sweep. Arithmetic columns derive from the raw ones:
/// `ratio = dense_params / params`, `gap = dense_val_acc - val_acc`,
/// `acc_per_sqrt_n = val_acc / sqrt(params)`, accuracies as fractions.
pub const REPORT_HEADER: [&str; 9] = ["name", "chi", "params", "ratio", "val_loss", "val_acc", "gap", "acc_per_sqrt_n", "status"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub chi: Option<usize>,
    pub params: usize,
    pub ratio: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub gap: f64,
    pub acc_per_sqrt_n: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub models: Vec<ModelRow>,
    /// Per-layer TT-SVD errors of the trained dense model at each χ.
    pub layers: Vec<LayerRow>,
}

struct RunSpec {
    name: String,
    chi: Option<usize>,
    cfg: RunConfig,
}

enum RunStatus {
    Done(Box<TrainOutcome<f32>>),
    Failed(CliError),
}

pub fn cmd_sweep(args: &SweepArgs, quiet: bool) -> Result<SweepReport> {
    let base = args.source.load()?;
    base.validate()?;
    let corpus = corpus::load(&base.corpus)?;
    let base = resolve(base, &corpus)?;
    let mut chis: Vec<usize> = args.chis.iter().map(|&c| c as usize).collect();
    chis.sort_unstable_by(|a, b| b.cmp(a));
    chis.dedup();
    create_dir(&args.out)?;

    let mut specs = vec![RunSpec { name: "dense".into(), chi: None, cfg: RunConfig { model: base.model.dense(), ..base.clone() } }];
    for &chi in &chis {
        specs.push(RunSpec { name: format!("chi{chi}"), chi: Some(chi), cfg: RunConfig { model: base.model.mpo(chi), ..base.clone() } });
    }

    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).clamp(1, specs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunStatus>>> = Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(i) else { break };
                let dir = args.out.join("runs").join(&spec.name);
                let status = match train_into(&spec.cfg, &corpus, &dir, &spec.name, quiet) {
                    Ok(o) => RunStatus::Done(Box::new(o)),
                    Err(e) => RunStatus::Failed(e),
                };
                results.lock().unwrap()[i] = Some(status);
            });
        }
    });
    let results: Vec<RunStatus> = results.into_inner().unwrap().into_iter().map(|r| r.expect("every run finishes")).collect();

    let mut rows = Vec::new();
    for (spec, status) in specs.iter().zip(&results) {
        let params = Transformer::<f32>::new(spec.cfg.model.clone(), 0).map(|m| m.param_count()).unwrap_or(0);
        let (val_loss, val_acc, status) = match status {
            RunStatus::Done(o) => match (&o.divergence, o.metrics.last()) {
                (None, Some(last)) => (last.val_loss, last.val_accuracy, "ok".to_string()),
                (Some(d), _) => (f64::NAN, f64::NAN, format!("diverged at step {}: {}", d.step, d.message)),
                (None, None) => (f64::NAN, f64::NAN, "no metrics".to_string()),
            },
            RunStatus::Failed(e) => (f64::NAN, f64::NAN, format!("failed: {e}")),
        };
        rows.push(ModelRow {
            name: spec.name.clone(),
            chi: spec.chi,
            params,
            ratio: f64::NAN,
            val_loss,
            val_acc,
            gap: f64::NAN,
            acc_per_sqrt_n: val_acc / (params as f64).sqrt(),
            status,
        });
    }
    let (dense_params, dense_acc) = (rows[0].params as f64, rows[0].val_acc);
    for r in &mut rows {
        r.ratio = dense_params / r.params as f64;
        r.gap = dense_acc - r.val_acc;
    }

    let mut layers = Vec::new();
    if let RunStatus::Done(o) = &results[0] {
        if o.divergence.is_none() {
            let dense = o.model.cast::<f64>();
            for &chi in &chis {
                let (_, reports) = dense.compress(chi)?;
                layers.extend(reports.iter().map(LayerRow::from));
            }
        }
    }

    let report = SweepReport { models: rows, layers };
    write_csv(&args.out.join("report.csv"), &REPORT_HEADER, &report.models)?;
    write_csv(&args.out.join("layers.csv"), &LAYERS_HEADER, &report.layers)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    crate::write_atomic(&args.out.join("report.json"), json.as_bytes())?;
    if !quiet {
        for r in &report.models {
            eprintln!(
                "{:>8} params {:>8} ratio {:>6.3} val {:.4} acc {:.2}% gap {:+.2}pp  {}",
                r.name,
                r.params,
                r.ratio,
                r.val_loss,
                100.0 * r.val_acc,
                100.0 * r.gap,
                r.status
            );
        }
    }
    let failure = results.into_iter().enumerate().find_map(|(i, r)| match r {
        RunStatus::Failed(e) => Some(e),
        RunStatus::Done(o) => divergence_error(&specs[i].name, &o),
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    let ck = checkpoint::load::<f32>(&args.checkpoint)?;
    let prompt = ck.vocab.encode(&args.prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ids = ck.model.generate(&prompt, args.length, args.temperature, &mut rng)?;
    Ok(ck.vocab.decode(&ids)?)
}
