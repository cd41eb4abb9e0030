//! Mini-batch training of every model variant and hyperparameter sweeps.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adam::{AdamState, NonFiniteGradient};
use crate::estimators::{self, LossWeights, ObjectiveBreakdown, ObjectiveSettings};
use crate::eval::{self, EvalError, EvalSpace};
use crate::features::{FeatureSchema, Sample, SampleError};
use crate::model::{Architecture, ForwardNodes, Model, ModelError, PredictionBatch, Variant};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Embedding width and tower shapes. `embedding_dim: None` keeps the
    /// schema's width.
    pub architecture: Architecture,
    pub clip_eps: f64,
    /// Self-normalized propensity weights, per batch space.
    pub snips: bool,
    pub seed: u64,
    pub shuffle: bool,
    pub weights: LossWeights,
    /// Let gradients flow into the CTR tower through the propensity
    /// weights of the CVR loss. Off by default: propensities are treated
    /// as constants inside the CVR loss and the CTR tower learns from its
    /// own task loss.
    pub propensity_grad: bool,
    /// Keep a [`BatchRecord`] for every batch.
    pub record_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dcmt,
            lr: 0.001,
            lambda1: 0.001,
            lambda2: 0.0001,
            batch_size: 1024,
            max_epochs: 5,
            architecture: Architecture::default(),
            clip_eps: estimators::DEFAULT_CLIP_EPS,
            snips: true,
            seed: 0,
            shuffle: true,
            weights: LossWeights::default(),
            propensity_grad: false,
            record_batches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: SampleError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; raw click propensity range [{o_hat_min:e}, {o_hat_max:e}]"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        o_hat_min: f64,
        o_hat_max: f64,
    },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        source: NonFiniteGradient,
    },
    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be finite and non-negative"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(TrainError::Config("lambda1 must be finite and non-negative"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(TrainError::Config("lambda2 must be finite and non-negative"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(TrainError::Config("clip_eps must lie in (0, 0.5)"));
        }
        if self.architecture.embedding_dim == Some(0) {
            return Err(TrainError::Config("embedding_dim must be positive"));
        }
        Ok(())
    }

    pub fn settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            clip_eps: self.clip_eps,
            snips: self.snips,
            weights: self.weights,
        }
    }
}

/// Nodes of a variant's objective on one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveNodes {
    pub forward: ForwardNodes,
    pub total: NodeId,
    pub ctr: NodeId,
    pub cvr: Option<NodeId>,
    pub ctcvr: Option<NodeId>,
    pub imputation: Option<NodeId>,
    pub l2: NodeId,
    /// Click-space part of a counterfactual CVR loss.
    pub factual: Option<NodeId>,
    /// Non-click-space part of a counterfactual CVR loss.
    pub counterfactual: Option<NodeId>,
    /// Counterfactual regularizer including its weight.
    pub regularizer: Option<NodeId>,
}

struct Labels {
    rows: usize,
    click: Tensor,
    r: Tensor,
    r_cf: Tensor,
    n_clicked: usize,
}

impl Labels {
    fn new(samples: &[&Sample]) -> Self {
        let b = |f: fn(&Sample) -> bool| Tensor::column(samples.iter().map(|s| if f(s) { 1.0 } else { 0.0 }).collect());
        Labels {
            rows: samples.len(),
            click: b(|s| s.click),
            r: b(|s| s.conversion),
            r_cf: b(|s| !s.conversion),
            n_clicked: samples.iter().filter(|s| s.click).count(),
        }
    }

    fn nonclick(&self) -> Tensor {
        self.click.map(|c| 1.0 - c)
    }

    fn n_nonclicked(&self) -> usize {
        self.rows - self.n_clicked
    }
}

/// `sum(a * w) / sum(w)` when the weights are self-normalized, otherwise
/// `sum(a * w) / rows`.
fn weighted_sum(
    tape: &mut Tape,
    e: NodeId,
    w: NodeId,
    snips: bool,
    rows: usize,
) -> Result<NodeId, TapeError> {
    let prod = tape.mul(e, w)?;
    let s = tape.sum(prod);
    if snips {
        let total = tape.sum(w);
        tape.div_scalar(s, total)
    } else {
        Ok(tape.scale(s, 1.0 / rows as f64))
    }
}

fn mean(tape: &mut Tape, x: NodeId, rows: usize) -> NodeId {
    let s = tape.sum(x);
    tape.scale(s, 1.0 / rows as f64)
}

/// Records the full training objective of `model`'s variant on one batch.
pub fn build_objective(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    samples: &[&Sample],
    config: &TrainConfig,
) -> Result<ObjectiveNodes, TapeError> {
    let variant = model.variant();
    let fwd = model.forward(tape, store, samples)?;
    let lab = Labels::new(samples);
    let n = lab.rows;
    let snips = config.snips && estimators::uses_snips(variant);

    let ctr_e = tape.log_loss(fwd.o_hat, lab.click.clone())?;
    let ctr = mean(tape, ctr_e, n);

    // Clipped propensities, constant unless propensity gradients are on.
    let o_src = if config.propensity_grad {
        fwd.o_hat
    } else {
        tape.detach(fwd.o_hat)
    };
    let o_c = tape.clamp(o_src, config.clip_eps, 1.0 - config.clip_eps);
    let click_mask = tape.constant(lab.click.clone());
    let nonclick_mask = tape.constant(lab.nonclick());
    let inv_o = tape.recip(o_c);
    let one_minus_o = tape.one_minus(o_c);
    let inv_1mo = tape.recip(one_minus_o);
    let w_click = tape.mul(click_mask, inv_o)?;
    let w_nonclick = tape.mul(nonclick_mask, inv_1mo)?;

    let e_f = tape.log_loss(fwd.r_hat, lab.r.clone())?;
    let has_o = lab.n_clicked > 0;
    let has_n = lab.n_nonclicked() > 0;

    let mut factual = None;
    let mut counterfactual = None;
    let mut regularizer = None;
    let mut imputation = None;
    let lambda1 = if variant == Variant::DcmtHard { 0.0 } else { config.lambda1 };

    let reg = |tape: &mut Tape| -> Result<NodeId, TapeError> {
        let s = tape.add(fwd.r_hat, fwd.r_hat_cf)?;
        let res = tape.one_minus(s);
        let a = tape.abs(res);
        let m = mean(tape, a, n);
        Ok(tape.scale(m, lambda1))
    };

    let cvr = match variant {
        Variant::Esmm => None,
        Variant::Naive => {
            if has_o {
                let masked = tape.mul(e_f, click_mask)?;
                let s = tape.sum(masked);
                Some(tape.scale(s, 1.0 / lab.n_clicked as f64))
            } else {
                None
            }
        }
        Variant::Ipw => Some(weighted_sum(tape, e_f, w_click, false, n)?),
        Variant::Dr => {
            let e_hat = fwd.e_hat.expect("dr variant has an imputation tower");
            let e_hat_c = tape.detach(e_hat);
            let delta = tape.sub(e_f, e_hat_c)?;
            let corr = tape.mul(delta, w_click)?;
            let per = tape.add(e_hat_c, corr)?;
            let dr = mean(tape, per, n);
            if has_o {
                let e_c = tape.detach(e_f);
                let d = tape.sub(e_hat, e_c)?;
                let sq = tape.mul(d, d)?;
                let masked = tape.mul(sq, click_mask)?;
                let s = tape.sum(masked);
                imputation = Some(tape.scale(s, 1.0 / lab.n_clicked as f64));
            }
            Some(dr)
        }
        Variant::Dcmt | Variant::DcmtHard | Variant::DcmtCf => {
            let e_cf = tape.log_loss(fwd.r_hat_cf, lab.r_cf.clone())?;
            let (wf, wc) = if variant == Variant::DcmtCf {
                (click_mask, nonclick_mask)
            } else {
                (w_click, w_nonclick)
            };
            let zero = tape.constant(Tensor::scalar(0.0));
            let f = if has_o || !snips {
                weighted_sum(tape, e_f, wf, snips, n)?
            } else {
                zero
            };
            let c = if has_n || !snips {
                weighted_sum(tape, e_cf, wc, snips, n)?
            } else {
                zero
            };
            factual = Some(f);
            counterfactual = Some(c);
            let mut main = tape.add(f, c)?;
            if variant != Variant::DcmtHard {
                let l = reg(tape)?;
                regularizer = Some(l);
                main = tape.add(main, l)?;
            }
            Some(main)
        }
        Variant::DcmtPd => {
            let zero = tape.constant(Tensor::scalar(0.0));
            if snips {
                let f = if has_o {
                    weighted_sum(tape, e_f, w_click, true, n)?
                } else {
                    zero
                };
                let c = if has_n {
                    weighted_sum(tape, e_f, w_nonclick, true, n)?
                } else {
                    zero
                };
                Some(tape.add(f, c)?)
            } else {
                let w = tape.add(w_click, w_nonclick)?;
                Some(weighted_sum(tape, e_f, w, false, n)?)
            }
        }
    };

    let ctcvr = if estimators::uses_ctcvr(variant) {
        let e = tape.log_loss(fwd.t_hat, lab.r.clone())?;
        Some(mean(tape, e, n))
    } else {
        None
    };

    let mut l2 = tape.constant(Tensor::scalar(0.0));
    for id in store.ids() {
        let p = tape.param(store, id);
        let sq = tape.sum_squares(p);
        l2 = tape.add(l2, sq)?;
    }

    let mut total = ctr;
    if let Some(c) = cvr {
        let c = tape.scale(c, config.weights.w_cvr);
        total = tape.add(total, c)?;
    }
    if let Some(t) = ctcvr {
        let t = tape.scale(t, config.weights.w_ctcvr);
        total = tape.add(total, t)?;
    }
    let l2w = tape.scale(l2, config.lambda2);
    total = tape.add(total, l2w)?;
    if let Some(i) = imputation {
        total = tape.add(total, i)?;
    }

    Ok(ObjectiveNodes {
        forward: fwd,
        total,
        ctr,
        cvr,
        ctcvr,
        imputation,
        l2,
        factual,
        counterfactual,
        regularizer,
    })
}

/// Per-batch diagnostics.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub clicked: usize,
    /// Loss value the gradients were taken of.
    pub tape_loss: f64,
    /// Same objective recomputed from the batch predictions by the
    /// estimator functions.
    pub recomputed: f64,
    /// L2 norm of the gradient reaching the shared CVR trunk.
    pub trunk_grad_norm: f64,
}

/// Per-epoch means over batches.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub ctr: f64,
    pub cvr: f64,
    pub ctcvr: f64,
    pub imputation: f64,
    pub l2: f64,
    /// Mean `|1 - (r_hat + r_hat_cf)|` over the epoch's samples.
    pub residual_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchRecord>,
}

/// Trains with [`train_with`] and no per-epoch callback.
pub fn train(samples: &[Sample], schema: &FeatureSchema, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(samples, schema, config, |_| {})
}

fn value(tape: &Tape, n: Option<NodeId>) -> f64 {
    n.map(|n| tape.value(n).data()[0]).unwrap_or(0.0)
}

/// Trains a fresh model of `config.variant`. `on_epoch` sees every epoch
/// log as soon as it is complete. Identical inputs give bit-identical
/// parameters and logs.
pub fn train_with(
    samples: &[Sample],
    schema: &FeatureSchema,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (model, mut store) = Model::init(schema, &config.architecture, config.variant, config.seed)?;
    for (index, s) in samples.iter().enumerate() {
        s.validate(model.schema())
            .map_err(|source| TrainError::Sample { index, source })?;
    }
    let mut adam = AdamState::new(&store, config.lr);
    let trunk = model.cvr_param_groups().trunk;
    let settings = config.settings();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut batches = Vec::new();

    for epoch in 0..config.max_epochs {
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch as u64 + 1);
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        let mut log = EpochLog {
            epoch,
            batches: 0,
            loss: 0.0,
            ctr: 0.0,
            cvr: 0.0,
            ctcvr: 0.0,
            imputation: 0.0,
            l2: 0.0,
            residual_mean: 0.0,
        };
        let mut residual_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let mut tape = Tape::new();
            let obj = build_objective(&mut tape, &model, &store, &refs, config)?;
            let total = value(&tape, Some(obj.total));
            if !total.is_finite() {
                let o = tape.value(obj.forward.o_hat).data();
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    o_hat_min: o.iter().copied().fold(f64::INFINITY, f64::min),
                    o_hat_max: o.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
            let preds = PredictionBatch::from_tape(&tape, &obj.forward);
            for (a, b) in preds.r_hat.iter().zip(&preds.r_hat_cf) {
                residual_sum += (1.0 - (a + b)).abs();
            }
            let grads = tape.backward(obj.total)?;
            if config.record_batches {
                let click: Vec<bool> = refs.iter().map(|s| s.click).collect();
                let r: Vec<bool> = refs.iter().map(|s| s.conversion).collect();
                let recomputed: ObjectiveBreakdown =
                    estimators::objective(config.variant, &click, &r, &preds, &settings, store.frobenius_sq())?;
                let trunk_sq: f64 = trunk.iter().map(|&id| grads.param_norm_sq(id)).sum();
                batches.push(BatchRecord {
                    epoch,
                    batch: bi,
                    size: refs.len(),
                    clicked: click.iter().filter(|&&c| c).count(),
                    tape_loss: total,
                    recomputed: recomputed.total,
                    trunk_grad_norm: libm::sqrt(trunk_sq),
                });
            }
            log.batches += 1;
            log.loss += total;
            log.ctr += value(&tape, Some(obj.ctr));
            log.cvr += value(&tape, obj.cvr);
            log.ctcvr += value(&tape, obj.ctcvr);
            log.imputation += value(&tape, obj.imputation);
            log.l2 += value(&tape, Some(obj.l2));
            adam.step(&mut store, &grads)
                .map_err(|source| TrainError::NonFiniteGradient {
                    epoch,
                    batch: bi,
                    source,
                })?;
        }
        let nb = log.batches as f64;
        log.loss /= nb;
        log.ctr /= nb;
        log.cvr /= nb;
        log.ctcvr /= nb;
        log.imputation /= nb;
        log.l2 /= nb;
        log.residual_mean = residual_sum / samples.len() as f64;
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        model,
        store,
        epochs,
        batches,
    })
}

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SweepParam {
    EmbeddingDim,
    HiddenDims,
    Lambda1,
    /// `false` runs the configured variant, `true` runs the hard
    /// constraint variant with `lambda1 = 0`.
    HardConstraint,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::EmbeddingDim => "embedding_dim",
            SweepParam::HiddenDims => "hidden_dims",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::HardConstraint => "hard_constraint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SweepParam::EmbeddingDim,
            SweepParam::HiddenDims,
            SweepParam::Lambda1,
            SweepParam::HardConstraint,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

/// One sweep value.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum SweepValue {
    Number(f64),
    Dims(Vec<usize>),
    Flag(bool),
}

/// Embedding dimensions searched by default.
pub const EMBEDDING_GRID: [usize; 6] = [4, 8, 16, 32, 64, 128];
/// Regularizer weights searched by default.
pub const LAMBDA1_GRID: [f64; 6] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Returns `base` with `param` set to `value`.
pub fn apply_sweep(base: &TrainConfig, param: SweepParam, value: &SweepValue) -> Result<TrainConfig, TrainError> {
    let mut cfg = base.clone();
    match (param, value) {
        (SweepParam::EmbeddingDim, SweepValue::Number(v)) => {
            if !(*v >= 1.0 && libm::trunc(*v) == *v) {
                return Err(TrainError::Config("embedding_dim values must be positive integers"));
            }
            cfg.architecture.embedding_dim = Some(*v as usize);
        }
        (SweepParam::HiddenDims, SweepValue::Dims(d)) => cfg.architecture.hidden_dims = d.clone(),
        (SweepParam::Lambda1, SweepValue::Number(v)) => cfg.lambda1 = *v,
        (SweepParam::HardConstraint, SweepValue::Flag(hard)) => {
            if *hard {
                cfg.variant = Variant::DcmtHard;
                cfg.lambda1 = 0.0;
            }
        }
        _ => return Err(TrainError::Config("sweep value does not fit the swept parameter")),
    }
    Ok(cfg)
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub param: String,
    pub value: SweepValue,
    pub variant: Variant,
    pub cvr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub final_loss: f64,
    pub final_cvr_loss: f64,
    /// Mean `|1 - (r_hat + r_hat_cf)|` over the evaluation set.
    pub residual_mean: f64,
}

/// Mean `|1 - (r_hat + r_hat_cf)|`.
pub fn residual_mean(preds: &PredictionBatch) -> f64 {
    estimators::counterfactual_residual(&preds.r_hat, &preds.r_hat_cf)
}

/// Trains and evaluates one run per value. The CVR AUC is measured over
/// the entire space when `eval_samples` carry full labels, otherwise over
/// the click space.
pub fn sweep(
    train_samples: &[Sample],
    eval_samples: &[Sample],
    schema: &FeatureSchema,
    base: &TrainConfig,
    param: SweepParam,
    values: &[SweepValue],
) -> Result<Vec<SweepRow>, TrainError> {
    let space = if eval_samples.iter().all(|s| s.r_full.is_some()) {
        EvalSpace::Entire
    } else {
        EvalSpace::Click
    };
    values
        .iter()
        .map(|v| {
            let cfg = apply_sweep(base, param, v)?;
            let out = train(train_samples, schema, &cfg)?;
            let (rep, preds) = eval::evaluate(&out.model, &out.store, eval_samples, space, 10, cfg.batch_size)?;
            let last = out.epochs.last();
            Ok(SweepRow {
                param: param.name().into(),
                value: v.clone(),
                variant: cfg.variant,
                cvr_auc: rep.cvr_auc,
                ctcvr_auc: rep.ctcvr_auc,
                final_loss: last.map_or(f64::NAN, |l| l.loss),
                final_cvr_loss: last.map_or(f64::NAN, |l| l.cvr),
                residual_mean: residual_mean(&preds),
            })
        })
        .collect()
}
