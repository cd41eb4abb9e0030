//! Argument parsing and dispatch.
//!
//! Every flag is optional. A command starts from its defaults, replaces
//! them with the `--config` record when one is given, then applies the
//! flags that were passed.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dcmt_core::eval::EvalSpace;
use dcmt_core::train::SweepParam;
use dcmt_core::Variant;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::output;
use crate::run::{self, BiasCheckRun, Estimator, EvalRun, InstanceKind, Outcome, SweepRun, SynthRun, TrainRun};

#[derive(Debug, Parser)]
#[command(name = "dcmt", version, about = "Entire-space causal CVR estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic missing-not-at-random exposure log.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check an estimator against its ground truth on a small instance.
    BiasCheck(BiasCheckArgs),
    /// Train and evaluate over a grid of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Configuration record to start from (for example a previous
    /// run's resolved_config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to `$DCMT_OUT_ROOT/<command>-<config hash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_correlation(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (-1.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("correlation must lie in [-1, 1], got {v}"))
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_space(s: &str) -> Result<EvalSpace, String> {
    s.parse().map_err(|_| format!("unknown space `{s}` (expected entire or click)"))
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    SweepParam::parse(s)
        .ok_or_else(|| format!("unknown sweep parameter `{s}` (expected embedding_dim, hidden_dims, lambda1 or hard_constraint)"))
}

/// Comma separated layer widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    s.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|_| format!("`{w}` is not a layer width")))
        .collect::<Result<_, _>>()
        .map(Dims)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    /// Items exposed to each user.
    #[arg(long)]
    pub exposures: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub ctr_bias: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub cvr_bias: Option<f64>,
    /// Correlation of click and conversion affinities, in [-1, 1].
    #[arg(long, allow_negative_numbers = true, value_parser = parse_correlation)]
    pub correlation: Option<f64>,
    #[arg(long)]
    pub latent_scale: Option<f64>,
    #[arg(long)]
    pub main_effect_scale: Option<f64>,
    /// Number of uninformative dense fields.
    #[arg(long)]
    pub noise_fields: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_ratio: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the schema's embedding width.
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_parser = parse_dims)]
    pub hidden: Option<Dims>,
    /// Hidden layers shared by the twin heads.
    #[arg(long)]
    pub shared_depth: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub snips: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shuffle: Option<bool>,
    #[arg(long)]
    pub w_cvr: Option<f64>,
    #[arg(long)]
    pub w_ctcvr: Option<f64>,
    #[arg(long)]
    pub propensity_grad: Option<bool>,
    /// Write per-batch diagnostics to batches.jsonl.
    #[arg(long)]
    pub record_batches: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `entire` (needs full labels) or `click`. Default: `entire` when the
    /// data has an `r_full` column, else `click`.
    #[arg(long, value_parser = parse_space)]
    pub space: Option<EvalSpace>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BiasCheckArgs {
    #[arg(long, value_enum)]
    pub estimator: Option<Estimator>,
    #[arg(long, value_enum)]
    pub instance: Option<InstanceKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_parser = parse_param)]
    pub param: Option<SweepParam>,
    /// Comma separated values; layer lists as `16,8;32,16`.
    #[arg(long, allow_hyphen_values = true)]
    pub values: Option<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base<T: DeserializeOwned + Default>(out: &OutputArgs) -> Result<T> {
    match &out.config {
        Some(path) => run::load_config(path),
        None => Ok(T::default()),
    }
}

impl TrainFlags {
    fn apply(self, cfg: &mut dcmt_core::TrainConfig) {
        set(&mut cfg.variant, self.variant);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.lambda1, self.lambda1);
        set(&mut cfg.lambda2, self.lambda2);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.max_epochs, self.epochs);
        if self.embedding_dim.is_some() {
            cfg.architecture.embedding_dim = self.embedding_dim;
        }
        set(&mut cfg.architecture.hidden_dims, self.hidden.map(|d| d.0));
        if self.shared_depth.is_some() {
            cfg.architecture.shared_depth = self.shared_depth;
        }
        set(&mut cfg.clip_eps, self.clip_eps);
        set(&mut cfg.snips, self.snips);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.shuffle, self.shuffle);
        set(&mut cfg.weights.w_cvr, self.w_cvr);
        set(&mut cfg.weights.w_ctcvr, self.w_ctcvr);
        set(&mut cfg.propensity_grad, self.propensity_grad);
        set(&mut cfg.record_batches, self.record_batches);
    }
}

fn finish<T: Serialize>(command: &str, cfg: &T, outcome: Outcome, out: &OutputArgs) -> Result<bool> {
    let dir = match &out.out {
        Some(d) => d.clone(),
        None => output::default_out_dir(command, &run::config_tag(cfg)),
    };
    output::publish(&dir, &outcome.files, out.force)?;
    println!("{}", outcome.summary);
    eprintln!("wrote {}", dir.display());
    Ok(outcome.ok)
}

/// Runs one parsed command. Returns whether its check passed (always
/// `true` except for a failing `bias-check`).
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg: SynthRun = base(&a.output)?;
            let s = &mut cfg.synth;
            set(&mut s.num_users, a.users);
            set(&mut s.num_items, a.items);
            set(&mut s.exposures_per_user, a.exposures);
            set(&mut s.latent_dim, a.latent_dim);
            set(&mut s.ctr_bias, a.ctr_bias);
            set(&mut s.cvr_bias, a.cvr_bias);
            set(&mut s.correlation, a.correlation);
            set(&mut s.latent_scale, a.latent_scale);
            set(&mut s.main_effect_scale, a.main_effect_scale);
            set(&mut s.noise_dense_fields, a.noise_fields);
            set(&mut s.embedding_dim, a.embedding_dim);
            set(&mut s.seed, a.seed);
            set(&mut cfg.test_ratio, a.test_ratio);
            if a.split_seed.is_some() {
                cfg.split_seed = a.split_seed;
            }
            let cfg = cfg.resolve()?;
            let outcome = cfg.execute()?;
            finish("synth", &cfg, outcome, &a.output)
        }
        Command::Train(a) => {
            let mut cfg: TrainRun = base(&a.output)?;
            set(&mut cfg.data, a.data);
            set(&mut cfg.schema, a.schema);
            a.flags.apply(&mut cfg.train);
            let cfg = cfg.resolve()?;
            let outcome = cfg.execute()?;
            finish("train", &cfg, outcome, &a.output)
        }
        Command::Eval(a) => {
            let mut cfg: EvalRun = base(&a.output)?;
            set(&mut cfg.checkpoint, a.checkpoint);
            set(&mut cfg.data, a.data);
            if a.space.is_some() {
                cfg.space = a.space;
            }
            set(&mut cfg.buckets, a.buckets);
            set(&mut cfg.batch_size, a.batch_size);
            let cfg = cfg.resolve()?;
            let outcome = cfg.execute()?;
            finish("eval", &cfg, outcome, &a.output)
        }
        Command::BiasCheck(a) => {
            let mut cfg: BiasCheckRun = base(&a.output)?;
            set(&mut cfg.estimator, a.estimator);
            set(&mut cfg.instance, a.instance);
            set(&mut cfg.n, a.n);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.trials, a.trials);
            if a.tolerance.is_some() {
                cfg.tolerance = a.tolerance;
            }
            set(&mut cfg.eps, a.eps);
            set(&mut cfg.lambda1, a.lambda1);
            let cfg = cfg.resolve()?;
            let outcome = cfg.execute()?;
            finish("bias-check", &cfg, outcome, &a.output)
        }
        Command::Sweep(a) => {
            let mut cfg: SweepRun = base(&a.output)?;
            set(&mut cfg.data, a.data);
            set(&mut cfg.schema, a.schema);
            set(&mut cfg.eval_data, a.eval_data);
            if let Some(p) = a.param {
                if p != cfg.param {
                    cfg.values.clear();
                }
                cfg.param = p;
            }
            if let Some(v) = &a.values {
                cfg.values = run::parse_values(cfg.param, v)?;
            }
            a.flags.apply(&mut cfg.train);
            let cfg = cfg.resolve()?;
            let outcome = cfg.execute()?;
            finish("sweep", &cfg, outcome, &a.output)
        }
    }
}
