//! Command bodies and their resolved configurations.
//!
//! Each command has a configuration record holding every effective
//! parameter. It is written to `resolved_config.json` in the run directory
//! and can be passed back with `--config` to repeat the run: the outputs
//! are a pure function of the record, so a repeat reproduces them byte for
//! byte. The output directory itself is not part of the record.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dcmt_core::eval::{self, EvalSpace};
use dcmt_core::synth::{self, SynthConfig};
use dcmt_core::theorems::{self, BiasInstance, Verdict};
use dcmt_core::train::{self, SweepParam, SweepRow, SweepValue};
use dcmt_core::{LossReport, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::formats;
use crate::output::RunFiles;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

/// Reads a configuration record written by a previous run (or by hand).
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Short content tag of a configuration, used to name default run directories.
pub fn config_tag<T: Serialize>(cfg: &T) -> String {
    formats::sha256_hex(&json_pretty(cfg))[..12].to_string()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(!path.as_os_str().is_empty(), "no {what} file given");
    ensure!(path.is_file(), "{what} file {} does not exist", path.display());
    Ok(())
}

/// Outcome of a command: the files of its run directory, a line for
/// stdout and whether it succeeded.
#[derive(Debug)]
pub struct Outcome {
    pub files: RunFiles,
    pub summary: String,
    pub ok: bool,
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub synth: SynthConfig,
    /// Fraction of `(user, item)` pairs held out into `test.csv`.
    pub test_ratio: f64,
    /// Seed of the split hash. Filled in from the generator seed when
    /// absent, so the two streams never share a seed.
    pub split_seed: Option<u64>,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            test_ratio: 0.2,
            split_seed: None,
        }
    }
}

/// Split seed used when none is configured.
pub fn derived_split_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

impl SynthRun {
    pub fn resolve(mut self) -> Result<Self> {
        self.synth.validate()?;
        ensure!(
            (0.0..=1.0).contains(&self.test_ratio),
            "test_ratio must lie in [0, 1], got {}",
            self.test_ratio
        );
        self.split_seed = Some(self.split_seed.unwrap_or_else(|| derived_split_seed(self.synth.seed)));
        Ok(self)
    }

    pub fn execute(&self) -> Result<Outcome> {
        let split_seed = self.split_seed.context("unresolved split seed")?;
        let data = synth::generate(&self.synth)?;
        let (train, test) = data.split(self.test_ratio, split_seed)?;
        let mut files = RunFiles::new();
        files.add("schema.json", formats::schema_to_json(&data.schema));
        for (name, part) in [("train.csv", &train), ("test.csv", &test)] {
            let mut buf = Vec::new();
            formats::write_dataset(&mut buf, &data.schema, &part.samples)?;
            files.add(name, buf);
        }
        files.add(RESOLVED_CONFIG, json_pretty(self));
        let clicks = data.samples.iter().filter(|s| s.click).count();
        let convs = data.samples.iter().filter(|s| s.conversion).count();
        Ok(Outcome {
            files,
            summary: format!(
                "{} exposures ({} train, {} test), {} clicks, {} conversions",
                data.len(),
                train.len(),
                test.len(),
                clicks,
                convs
            ),
            ok: true,
        })
    }
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            schema: PathBuf::new(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainRun {
    pub fn resolve(self) -> Result<Self> {
        require_file(&self.data, "data")?;
        require_file(&self.schema, "schema")?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn execute(&self) -> Result<Outcome> {
        let schema = formats::load_schema(&self.schema)?;
        let (samples, _) = formats::load_dataset(&self.data, &schema)?;
        let start = Instant::now();
        let out = train::train_with(&samples, &schema, &self.train, |log| {
            eprintln!(
                "epoch {} loss {:.6} ctr {:.6} cvr {:.6} ({:.1}s)",
                log.epoch,
                log.loss,
                log.ctr,
                log.cvr,
                start.elapsed().as_secs_f64()
            );
        })?;
        let mut files = RunFiles::new();
        files.add("checkpoint.txt", checkpoint::write(&out.model, &out.store, &self.train));
        files.add("epochs.jsonl", jsonl(&out.epochs));
        if self.train.record_batches {
            files.add("batches.jsonl", jsonl(&out.batches));
        }
        files.add(RESOLVED_CONFIG, json_pretty(self));
        let summary = match out.epochs.last() {
            Some(l) => format!("trained {} for {} epochs, final loss {:.6}", self.train.variant, l.epoch + 1, l.loss),
            None => format!("trained {} for 0 epochs", self.train.variant),
        };
        Ok(Outcome {
            files,
            summary,
            ok: true,
        })
    }
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// CVR AUC space. Unset picks `entire` when the data carries full
    /// conversion labels and `click` otherwise.
    pub space: Option<EvalSpace>,
    pub buckets: usize,
    pub batch_size: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            space: None,
            buckets: 10,
            batch_size: 4096,
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub report: dcmt_core::EvalReport,
    pub losses: LossReport,
}

/// Whether the dataset header declares the `r_full` column.
fn has_full_labels(data: &Path) -> Result<bool> {
    let file = std::fs::File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let mut header = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut header)
        .with_context(|| format!("reading {}", data.display()))?;
    Ok(header.trim_end().split(',').any(|c| c == "r_full"))
}

impl EvalRun {
    pub fn resolve(mut self) -> Result<Self> {
        require_file(&self.checkpoint, "checkpoint")?;
        require_file(&self.data, "data")?;
        ensure!(self.buckets > 0, "buckets must be positive");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        if self.space.is_none() {
            self.space = Some(if has_full_labels(&self.data)? {
                EvalSpace::Entire
            } else {
                EvalSpace::Click
            });
        }
        Ok(self)
    }

    pub fn execute(&self) -> Result<Outcome> {
        let text = std::fs::read_to_string(&self.checkpoint)
            .with_context(|| format!("reading checkpoint {}", self.checkpoint.display()))?;
        let ck = checkpoint::read(&text)?;
        let (samples, _) = formats::load_dataset(&self.data, ck.model.schema())?;
        let space = self.space.context("eval space not resolved")?;
        let (report, preds) = eval::evaluate(&ck.model, &ck.store, &samples, space, self.buckets, self.batch_size)?;
        let click: Vec<bool> = samples.iter().map(|s| s.click).collect();
        let r: Vec<bool> = samples.iter().map(|s| s.conversion).collect();
        let full: Option<Vec<bool>> = samples.iter().map(|s| s.r_full).collect();
        let losses = LossReport::evaluate(
            ck.model.variant(),
            &click,
            &r,
            full.as_deref(),
            &preds,
            &ck.settings.settings(),
            ck.store.frobenius_sq(),
        )?;
        let mut files = RunFiles::new();
        let fmt_auc = |a: Option<f64>| a.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let summary = format!(
            "{} samples, cvr auc ({}) {}, ctr auc {}, ctcvr auc {}",
            report.num_samples,
            report.space,
            fmt_auc(report.cvr_auc),
            fmt_auc(report.ctr_auc),
            fmt_auc(report.ctcvr_auc)
        );
        if let Some(dist) = &report.distribution {
            let mut hist = String::from("bucket_low,bucket_high,count\n");
            for (lo, hi, count) in dist.histogram.rows() {
                hist.push_str(&format!("{lo},{hi},{count}\n"));
            }
            files.add("histogram.csv", hist);
        }
        files.add("metrics.json", json_pretty(&Metrics { report, losses }));
        files.add(RESOLVED_CONFIG, json_pretty(self));
        Ok(Outcome {
            files,
            summary,
            ok: true,
        })
    }
}

// ---------------------------------------------------------------- bias-check

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Estimator {
    /// Inverse propensity loss, Monte Carlo over click draws.
    Ipw,
    /// Doubly robust loss with an exact error imputation.
    Dr,
    /// Counterfactual loss with exact click propensities.
    Dcmt,
    /// Counterfactual loss with `o_hat = p`, reported only.
    DcmtStochastic,
    /// Bias of the ESMM objective, expected to be large.
    Esmm,
}

impl Estimator {
    /// Whether the check is an exact identity rather than a Monte Carlo
    /// estimate.
    pub fn is_deterministic(self) -> bool {
        matches!(self, Estimator::Dr | Estimator::Dcmt | Estimator::Esmm)
    }

    fn default_tolerance(self) -> f64 {
        match self {
            Estimator::Ipw => 0.01,
            Estimator::Dr => 1e-12,
            Estimator::Dcmt => 1e-4,
            Estimator::DcmtStochastic => f64::INFINITY,
            Estimator::Esmm => 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum InstanceKind {
    /// Random propensities, labels and predictions.
    Random,
    /// The fixed four-sample instance.
    Demo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasCheckRun {
    pub estimator: Estimator,
    pub instance: InstanceKind,
    /// Samples of a random instance.
    pub n: usize,
    pub seed: u64,
    /// Monte Carlo trials.
    pub trials: usize,
    /// Pass threshold. For `esmm` the bias must exceed it, for the other
    /// estimators it must stay below it (relative for `ipw`).
    pub tolerance: Option<f64>,
    /// Propensity clip of the `dcmt` check.
    pub eps: f64,
    pub lambda1: f64,
}

impl Default for BiasCheckRun {
    fn default() -> Self {
        Self {
            estimator: Estimator::Dr,
            instance: InstanceKind::Random,
            n: 10,
            seed: 0,
            trials: 100_000,
            tolerance: None,
            eps: 1e-6,
            lambda1: 0.0,
        }
    }
}

/// Contents of `verdict.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCheckResult {
    pub estimator: Estimator,
    pub deterministic: bool,
    pub verdict: Verdict,
}

impl BiasCheckRun {
    pub fn resolve(mut self) -> Result<Self> {
        ensure!(self.n > 0, "n must be positive");
        ensure!(self.trials > 0, "trials must be positive");
        ensure!(self.eps > 0.0 && self.eps < 0.5, "eps must lie in (0, 0.5)");
        self.tolerance = Some(self.tolerance.unwrap_or(self.estimator.default_tolerance()));
        Ok(self)
    }

    fn instance(&self) -> BiasInstance {
        match self.instance {
            InstanceKind::Random => BiasInstance::random(&mut ChaCha8Rng::seed_from_u64(self.seed), self.n),
            InstanceKind::Demo => {
                let (click, r_full, o_hat, r_hat) = theorems::esmm_demo_instance();
                BiasInstance {
                    p: o_hat.to_vec(),
                    click: click.to_vec(),
                    r_full: r_full.to_vec(),
                    r_hat: r_hat.to_vec(),
                }
            }
        }
    }

    pub fn verdict(&self) -> Result<Verdict> {
        let tol = self.tolerance.context("unresolved tolerance")?;
        let inst = self.instance();
        let v = match self.estimator {
            Estimator::Ipw => theorems::check_ipw_unbiased(&inst, self.trials, self.seed, tol)?,
            Estimator::Dr => theorems::check_dr_unbiased(&inst, tol)?,
            Estimator::Dcmt => theorems::check_dcmt_unbiased(&inst, self.eps, self.lambda1, tol)?,
            Estimator::DcmtStochastic => theorems::measure_dcmt_stochastic(&inst, self.trials, self.seed)?,
            Estimator::Esmm => {
                let bias = theorems::esmm_bias(&inst.click, &inst.r_full, &inst.p, &inst.r_hat)?;
                Verdict {
                    estimate: bias,
                    reference: 0.0,
                    bias,
                    relative: f64::INFINITY,
                    tolerance: tol,
                    pass: bias > tol,
                }
            }
        };
        Ok(v)
    }

    pub fn execute(&self) -> Result<Outcome> {
        let verdict = self.verdict()?;
        let summary = format!("bias {:.1e} {}", verdict.bias, if verdict.pass { "PASS" } else { "FAIL" });
        let mut files = RunFiles::new();
        files.add(
            "verdict.json",
            json_pretty(&BiasCheckResult {
                estimator: self.estimator,
                deterministic: self.estimator.is_deterministic(),
                verdict,
            }),
        );
        files.add(RESOLVED_CONFIG, json_pretty(self));
        Ok(Outcome {
            files,
            summary,
            ok: verdict.pass,
        })
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRun {
    pub data: PathBuf,
    pub schema: PathBuf,
    /// Evaluation data. Needs full conversion labels for entire-space AUC.
    pub eval_data: PathBuf,
    pub param: SweepParam,
    /// Values of `param`. Empty selects the default grid.
    pub values: Vec<SweepValue>,
    pub train: TrainConfig,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            schema: PathBuf::new(),
            eval_data: PathBuf::new(),
            param: SweepParam::Lambda1,
            values: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

/// Default values searched for `param`.
pub fn default_grid(param: SweepParam) -> Vec<SweepValue> {
    match param {
        SweepParam::EmbeddingDim => train::EMBEDDING_GRID
            .iter()
            .map(|&d| SweepValue::Number(d as f64))
            .collect(),
        SweepParam::Lambda1 => train::LAMBDA1_GRID.iter().map(|&l| SweepValue::Number(l)).collect(),
        SweepParam::HiddenDims => [vec![16], vec![32, 16], vec![64, 32], vec![64, 64, 32]]
            .into_iter()
            .map(SweepValue::Dims)
            .collect(),
        SweepParam::HardConstraint => vec![SweepValue::Flag(false), SweepValue::Flag(true)],
    }
}

/// Parses the `--values` list of a sweep. Numbers and flags are comma
/// separated; layer lists are separated by `;` with widths separated by
/// `,` (`16,8;32,16`).
pub fn parse_values(param: SweepParam, text: &str) -> Result<Vec<SweepValue>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    match param {
        SweepParam::EmbeddingDim | SweepParam::Lambda1 => text
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map(SweepValue::Number)
                    .with_context(|| format!("`{v}` is not a number"))
            })
            .collect(),
        SweepParam::HiddenDims => text
            .split(';')
            .map(|layers| {
                layers
                    .split(',')
                    .map(|w| w.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map(SweepValue::Dims)
                    .with_context(|| format!("`{layers}` is not a list of layer widths"))
            })
            .collect(),
        SweepParam::HardConstraint => text
            .split(',')
            .map(|v| match v.trim() {
                "true" => Ok(SweepValue::Flag(true)),
                "false" => Ok(SweepValue::Flag(false)),
                other => bail!("`{other}` is not true or false"),
            })
            .collect(),
    }
}

fn csv_value(v: &SweepValue) -> String {
    match v {
        SweepValue::Number(x) => x.to_string(),
        SweepValue::Dims(d) => d.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("x"),
        SweepValue::Flag(b) => b.to_string(),
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl SweepRun {
    pub fn resolve(mut self) -> Result<Self> {
        require_file(&self.data, "data")?;
        require_file(&self.schema, "schema")?;
        require_file(&self.eval_data, "eval data")?;
        self.train.validate()?;
        if self.values.is_empty() {
            self.values = default_grid(self.param);
        }
        for v in &self.values {
            train::apply_sweep(&self.train, self.param, v)?.validate()?;
        }
        Ok(self)
    }

    pub fn execute(&self) -> Result<Outcome> {
        let schema = formats::load_schema(&self.schema)?;
        let (train_samples, _) = formats::load_dataset(&self.data, &schema)?;
        let (eval_samples, _) = formats::load_dataset(&self.eval_data, &schema)?;
        let space = if eval_samples.iter().all(|s| s.r_full.is_some()) {
            EvalSpace::Entire
        } else {
            EvalSpace::Click
        };
        let mut files = RunFiles::new();
        let mut rows: Vec<SweepRow> = Vec::new();
        let start = Instant::now();
        for (i, value) in self.values.iter().enumerate() {
            let cfg = train::apply_sweep(&self.train, self.param, value)?;
            let out = train::train(&train_samples, &schema, &cfg)?;
            let (rep, preds) = eval::evaluate(&out.model, &out.store, &eval_samples, space, 10, cfg.batch_size)?;
            let last = out.epochs.last();
            let row = SweepRow {
                param: self.param.name().into(),
                value: value.clone(),
                variant: cfg.variant,
                cvr_auc: rep.cvr_auc,
                ctcvr_auc: rep.ctcvr_auc,
                final_loss: last.map_or(f64::NAN, |l| l.loss),
                final_cvr_loss: last.map_or(f64::NAN, |l| l.cvr),
                residual_mean: train::residual_mean(&preds),
            };
            eprintln!(
                "{} = {}: cvr auc {} ({:.1}s)",
                self.param.name(),
                csv_value(value),
                csv_opt(row.cvr_auc),
                start.elapsed().as_secs_f64()
            );
            files.add(format!("runs/{i:02}/epochs.jsonl"), jsonl(&out.epochs));
            rows.push(row);
        }
        let mut table = String::from("param,value,variant,cvr_auc,ctcvr_auc,final_loss,final_cvr_loss,residual_mean\n");
        for r in &rows {
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.param,
                csv_value(&r.value),
                r.variant,
                csv_opt(r.cvr_auc),
                csv_opt(r.ctcvr_auc),
                r.final_loss,
                r.final_cvr_loss,
                r.residual_mean
            ));
        }
        files.add("sweep.csv", table);
        files.add("sweep.json", json_pretty(&rows));
        files.add(RESOLVED_CONFIG, json_pretty(self));
        Ok(Outcome {
            files,
            summary: format!("{} runs over {} ({space} space AUC)", rows.len(), self.param.name()),
            ok: true,
        })
    }
}
