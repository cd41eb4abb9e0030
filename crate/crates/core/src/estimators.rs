//! CVR loss estimators over the exposure space and its click / non-click
//! partition, evaluated directly on prediction vectors.
//!
//! These functions are the reference values for everything the trainer
//! records on its tape: the scalar it differentiates must agree with
//! [`objective`] on the same batch.
//!
//! Conventions: `r` holds the observed conversion labels (always `false` on
//! the non-click space), `o_hat` holds already-clipped click propensities,
//! and every sum runs over indices in ascending order.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::features::SpacePartition;
use crate::model::{PredictionBatch, Variant};
use crate::tape::log_loss_value;

/// Default propensity clip.
pub const DEFAULT_CLIP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("no clicked samples")]
    NoClickedSamples,
    #[error("empty exposure space")]
    EmptySpace,
    #[error("length mismatch: expected {expected}, got {got} for {what}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("full conversion labels are required")]
    MissingFullLabels,
    #[error("propensity {value} at index {index} is outside (0, 1); clip it first")]
    PropensityOutOfRange { index: usize, value: f64 },
    #[error("imputed error {value} at index {index} is negative")]
    NegativeImputation { index: usize, value: f64 },
    #[error("propensity {0} is degenerate (must lie strictly inside (0, 1))")]
    DegeneratePropensity(f64),
}

/// `-r ln(r_hat) - (1 - r) ln(1 - r_hat)` with `r_hat` clipped to
/// `[1e-12, 1 - 1e-12]`.
#[inline]
pub fn log_loss(r: bool, r_hat: f64) -> f64 {
    log_loss_value(if r { 1.0 } else { 0.0 }, r_hat)
}

/// Maps a click propensity into `[eps, 1 - eps]`.
#[inline]
pub fn clip_propensity(o_hat: f64, eps: f64) -> f64 {
    o_hat.clamp(eps, 1.0 - eps)
}

pub fn clip_all(o_hat: &[f64], eps: f64) -> Vec<f64> {
    o_hat.iter().map(|&o| clip_propensity(o, eps)).collect()
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), EstimatorError> {
    if expected == got {
        Ok(())
    } else {
        Err(EstimatorError::LengthMismatch { what, expected, got })
    }
}

fn check_inputs(r: &[bool], preds: &[f64], part: &SpacePartition) -> Result<usize, EstimatorError> {
    let n = part.len();
    check_len("labels", n, r.len())?;
    check_len("predictions", n, preds.len())?;
    if n == 0 {
        return Err(EstimatorError::EmptySpace);
    }
    Ok(n)
}

fn check_click_propensity(o_hat: &[f64], idx: &[usize]) -> Result<(), EstimatorError> {
    for &i in idx {
        let v = o_hat[i];
        if !(v > 0.0 && v <= 1.0) {
            return Err(EstimatorError::PropensityOutOfRange { index: i, value: v });
        }
    }
    Ok(())
}

fn check_nonclick_propensity(o_hat: &[f64], idx: &[usize]) -> Result<(), EstimatorError> {
    for &i in idx {
        let v = o_hat[i];
        if !(0.0..1.0).contains(&v) {
            return Err(EstimatorError::PropensityOutOfRange { index: i, value: v });
        }
    }
    Ok(())
}

/// Mean log loss over the exposure space with full labels.
pub fn ground_truth_loss(r_full: &[bool], r_hat: &[f64]) -> Result<f64, EstimatorError> {
    check_len("predictions", r_full.len(), r_hat.len())?;
    if r_full.is_empty() {
        return Err(EstimatorError::EmptySpace);
    }
    let s = r_full
        .iter()
        .zip(r_hat)
        .fold(0.0, |acc, (&r, &p)| acc + log_loss(r, p));
    Ok(s / r_full.len() as f64)
}

/// Mean log loss over the click space only.
pub fn naive_loss(r: &[bool], r_hat: &[f64], part: &SpacePartition) -> Result<f64, EstimatorError> {
    check_inputs(r, r_hat, part)?;
    if part.clicked.is_empty() {
        return Err(EstimatorError::NoClickedSamples);
    }
    let s = part
        .clicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]));
    Ok(s / part.clicked.len() as f64)
}

/// `|naive - ground truth|`.
pub fn bias_naive(
    r: &[bool],
    r_full: &[bool],
    r_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let naive = naive_loss(r, r_hat, part)?;
    let gt = ground_truth_loss(r_full, r_hat)?;
    Ok((naive - gt).abs())
}

/// Inverse propensity weighted loss: `(1/|D|) sum_O e / o_hat`.
pub fn ipw_loss(
    r: &[bool],
    r_hat: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("propensities", n, o_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    let s = part
        .clicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]) / o_hat[i]);
    Ok(s / n as f64)
}

/// Self-normalized variant of [`ipw_loss`]: `sum_O w_i e_i` with the click
/// space weights of [`snips_weights`]. Zero when the click space is empty.
pub fn ipw_snips_loss(
    r: &[bool],
    r_hat: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("propensities", n, o_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    let w = snips_weights(o_hat, &part.clicked, Space::Clicked);
    Ok(part
        .clicked
        .iter()
        .zip(&w)
        .fold(0.0, |acc, (&i, wi)| acc + wi * log_loss(r[i], r_hat[i])))
}

/// Doubly robust loss: `(1/|D|) sum_D (e_hat + o * (e - e_hat) / o_hat)`.
pub fn dr_loss(
    r: &[bool],
    r_hat: &[f64],
    o_hat: &[f64],
    e_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("propensities", n, o_hat.len())?;
    check_len("imputed errors", n, e_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    for (i, &e) in e_hat.iter().enumerate() {
        if !(e >= 0.0) {
            return Err(EstimatorError::NegativeImputation { index: i, value: e });
        }
    }
    let mut clicked = part.clicked.iter().peekable();
    let mut s = 0.0;
    for i in 0..n {
        let mut term = e_hat[i];
        if clicked.peek() == Some(&&i) {
            clicked.next();
            let delta = log_loss(r[i], r_hat[i]) - e_hat[i];
            term += delta / o_hat[i];
        }
        s += term;
    }
    Ok(s / n as f64)
}

/// Squared imputation error over the click space:
/// `(1/|O|) sum_O (e_hat - e)^2`. Zero when the click space is empty.
pub fn imputation_loss(
    r: &[bool],
    r_hat: &[f64],
    e_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("imputed errors", n, e_hat.len())?;
    if part.clicked.is_empty() {
        return Ok(0.0);
    }
    let s = part.clicked.iter().fold(0.0, |acc, &i| {
        let d = e_hat[i] - log_loss(r[i], r_hat[i]);
        acc + d * d
    });
    Ok(s / part.clicked.len() as f64)
}

/// Entire-space propensity loss on observed labels:
/// `(1/|D|) (sum_O e / o_hat + sum_N e / (1 - o_hat))`.
pub fn dcmt_naive_loss(
    r: &[bool],
    r_hat: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("propensities", n, o_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    check_nonclick_propensity(o_hat, &part.nonclicked)?;
    let f = part
        .clicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]) / o_hat[i]);
    let c = part
        .nonclicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]) / (1.0 - o_hat[i]));
    Ok((f + c) / n as f64)
}

/// Self-normalized [`dcmt_naive_loss`]: per-space weights from
/// [`snips_weights`], no `1/|D|` factor.
pub fn dcmt_naive_snips_loss(
    r: &[bool],
    r_hat: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("propensities", n, o_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    check_nonclick_propensity(o_hat, &part.nonclicked)?;
    let wf = snips_weights(o_hat, &part.clicked, Space::Clicked);
    let wc = snips_weights(o_hat, &part.nonclicked, Space::NonClicked);
    let f = part
        .clicked
        .iter()
        .zip(&wf)
        .fold(0.0, |acc, (&i, w)| acc + w * log_loss(r[i], r_hat[i]));
    let c = part
        .nonclicked
        .iter()
        .zip(&wc)
        .fold(0.0, |acc, (&i, w)| acc + w * log_loss(r[i], r_hat[i]));
    Ok(f + c)
}

/// `(lambda1 / |D|) sum_D |1 - (r_hat + r_hat_cf)|`.
pub fn counterfactual_regularizer(r_hat: &[f64], r_hat_cf: &[f64], lambda1: f64) -> f64 {
    debug_assert_eq!(r_hat.len(), r_hat_cf.len());
    if r_hat.is_empty() {
        return 0.0;
    }
    let s = r_hat
        .iter()
        .zip(r_hat_cf)
        .fold(0.0, |acc, (&a, &b)| acc + (1.0 - (a + b)).abs());
    lambda1 * s / r_hat.len() as f64
}

/// Mean of `|1 - (r_hat + r_hat_cf)|`, i.e. the regularizer with unit weight.
pub fn counterfactual_residual(r_hat: &[f64], r_hat_cf: &[f64]) -> f64 {
    counterfactual_regularizer(r_hat, r_hat_cf, 1.0)
}

/// Which half of the exposure space a set of weights normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Clicked,
    NonClicked,
}

/// Self-normalized inverse propensity weights over one space.
///
/// Clicked: `(1/o_i) / sum_O (1/o_j)`; non-clicked:
/// `(1/(1-o_i)) / sum_N (1/(1-o_j))`. Returned in the order of `idx`.
pub fn snips_weights(o_hat: &[f64], idx: &[usize], space: Space) -> Vec<f64> {
    let raw: Vec<f64> = idx
        .iter()
        .map(|&i| match space {
            Space::Clicked => 1.0 / o_hat[i],
            Space::NonClicked => 1.0 / (1.0 - o_hat[i]),
        })
        .collect();
    let total = raw.iter().fold(0.0, |acc, w| acc + w);
    raw.into_iter().map(|w| w / total).collect()
}

/// Options shared by the counterfactual losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CounterfactualOptions {
    pub lambda1: f64,
    pub snips: bool,
}

/// Factual loss over the click space plus counterfactual loss over the
/// mirrored non-click space, where every counterfactual label is
/// `1 - r = 1`.
///
/// Without self-normalization: `(1/|D|) (sum_O e(r, r_hat) / o_hat +
/// sum_N e(1 - r, r_hat_cf) / (1 - o_hat))`. With it, each space is weighted
/// by its own [`snips_weights`] and the `1/|D|` factor is dropped. Empty
/// spaces contribute zero.
pub fn dcmt_main_loss(
    r: &[bool],
    r_hat: &[f64],
    r_hat_cf: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
    snips: bool,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("counterfactual predictions", n, r_hat_cf.len())?;
    check_len("propensities", n, o_hat.len())?;
    check_click_propensity(o_hat, &part.clicked)?;
    check_nonclick_propensity(o_hat, &part.nonclicked)?;
    if snips {
        let wf = snips_weights(o_hat, &part.clicked, Space::Clicked);
        let wc = snips_weights(o_hat, &part.nonclicked, Space::NonClicked);
        let f = part
            .clicked
            .iter()
            .zip(&wf)
            .fold(0.0, |acc, (&i, w)| acc + w * log_loss(r[i], r_hat[i]));
        let c = part
            .nonclicked
            .iter()
            .zip(&wc)
            .fold(0.0, |acc, (&i, w)| acc + w * log_loss(!r[i], r_hat_cf[i]));
        Ok(f + c)
    } else {
        let f = part
            .clicked
            .iter()
            .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]) / o_hat[i]);
        let c = part
            .nonclicked
            .iter()
            .fold(0.0, |acc, &i| acc + log_loss(!r[i], r_hat_cf[i]) / (1.0 - o_hat[i]));
        Ok((f + c) / n as f64)
    }
}

/// [`dcmt_main_loss`] plus [`counterfactual_regularizer`].
pub fn dcmt_full_loss(
    r: &[bool],
    r_hat: &[f64],
    r_hat_cf: &[f64],
    o_hat: &[f64],
    part: &SpacePartition,
    opts: CounterfactualOptions,
) -> Result<f64, EstimatorError> {
    let main = dcmt_main_loss(r, r_hat, r_hat_cf, o_hat, part, opts.snips)?;
    Ok(main + counterfactual_regularizer(r_hat, r_hat_cf, opts.lambda1))
}

/// Counterfactual mechanism without propensity weights:
/// `(1/|D|) (sum_O e(r, r_hat) + sum_N e(1 - r, r_hat_cf)) + L`.
pub fn dcmt_cf_loss(
    r: &[bool],
    r_hat: &[f64],
    r_hat_cf: &[f64],
    part: &SpacePartition,
    lambda1: f64,
) -> Result<f64, EstimatorError> {
    let n = check_inputs(r, r_hat, part)?;
    check_len("counterfactual predictions", n, r_hat_cf.len())?;
    let f = part
        .clicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(r[i], r_hat[i]));
    let c = part
        .nonclicked
        .iter()
        .fold(0.0, |acc, &i| acc + log_loss(!r[i], r_hat_cf[i]));
    Ok((f + c) / n as f64 + counterfactual_regularizer(r_hat, r_hat_cf, lambda1))
}

/// Mean click log loss over the exposure space.
pub fn ctr_loss(o: &[bool], o_hat: &[f64]) -> Result<f64, EstimatorError> {
    ground_truth_loss(o, o_hat)
}

/// Mean log loss of `t_hat` against the observed conversion label over the
/// exposure space.
pub fn ctcvr_loss(r: &[bool], t_hat: &[f64]) -> Result<f64, EstimatorError> {
    ground_truth_loss(r, t_hat)
}

/// Task-loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub w_cvr: f64,
    pub w_ctcvr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cvr: 1.0,
            w_ctcvr: 1.0,
        }
    }
}

/// `ctr + w_cvr * cvr + w_ctcvr * ctcvr + lambda2 * ||theta||_F^2`.
pub fn total_loss(ctr: f64, cvr: f64, ctcvr: f64, weights: LossWeights, lambda2: f64, frobenius_sq: f64) -> f64 {
    ctr + weights.w_cvr * cvr + weights.w_ctcvr * ctcvr + lambda2 * frobenius_sq
}

/// Settings that shape a variant's training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_eps: f64,
    pub snips: bool,
    pub weights: LossWeights,
}

/// Components of a variant's training objective on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveBreakdown {
    pub ctr: f64,
    pub cvr: f64,
    pub ctcvr: f64,
    pub imputation: f64,
    pub l2: f64,
    pub total: f64,
}

/// Whether a variant's objective contains the CTCVR term.
pub fn uses_ctcvr(variant: Variant) -> bool {
    matches!(
        variant,
        Variant::Esmm | Variant::Dcmt | Variant::DcmtPd | Variant::DcmtCf | Variant::DcmtHard
    )
}

/// Whether self-normalization applies to a variant when enabled.
pub fn uses_snips(variant: Variant) -> bool {
    matches!(variant, Variant::Dcmt | Variant::DcmtPd | Variant::DcmtHard)
}

/// Recomputes a variant's training objective from predictions.
///
/// `preds.o_hat` must be the raw click probabilities; clipping is applied
/// here. A batch without clicked samples contributes a zero CVR term.
pub fn objective(
    variant: Variant,
    click: &[bool],
    r: &[bool],
    preds: &PredictionBatch,
    settings: &ObjectiveSettings,
    frobenius_sq: f64,
) -> Result<ObjectiveBreakdown, EstimatorError> {
    let part = SpacePartition::from_clicks(click.iter().copied());
    let o_clip = clip_all(&preds.o_hat, settings.clip_eps);
    let ctr = ctr_loss(click, &preds.o_hat)?;
    let snips = settings.snips && uses_snips(variant);
    let has_clicks = !part.clicked.is_empty();
    let mut imputation = 0.0;
    let cvr = match variant {
        Variant::Esmm => 0.0,
        Variant::Naive => {
            if has_clicks {
                naive_loss(r, &preds.r_hat, &part)?
            } else {
                0.0
            }
        }
        Variant::Ipw => ipw_loss(r, &preds.r_hat, &o_clip, &part)?,
        Variant::Dr => {
            let e_hat = preds.e_hat.as_deref().ok_or(EstimatorError::LengthMismatch {
                what: "imputed errors",
                expected: part.len(),
                got: 0,
            })?;
            imputation = imputation_loss(r, &preds.r_hat, e_hat, &part)?;
            dr_loss(r, &preds.r_hat, &o_clip, e_hat, &part)?
        }
        Variant::Dcmt | Variant::DcmtHard => dcmt_full_loss(
            r,
            &preds.r_hat,
            &preds.r_hat_cf,
            &o_clip,
            &part,
            CounterfactualOptions {
                lambda1: if variant == Variant::DcmtHard { 0.0 } else { settings.lambda1 },
                snips,
            },
        )?,
        Variant::DcmtPd => {
            if snips {
                dcmt_naive_snips_loss(r, &preds.r_hat, &o_clip, &part)?
            } else {
                dcmt_naive_loss(r, &preds.r_hat, &o_clip, &part)?
            }
        }
        Variant::DcmtCf => dcmt_cf_loss(r, &preds.r_hat, &preds.r_hat_cf, &part, settings.lambda1)?,
    };
    let ctcvr = if uses_ctcvr(variant) {
        ctcvr_loss(r, &preds.t_hat)?
    } else {
        0.0
    };
    let l2 = settings.lambda2 * frobenius_sq;
    let total = total_loss(ctr, cvr, ctcvr, settings.weights, settings.lambda2, frobenius_sq) + imputation;
    Ok(ObjectiveBreakdown {
        ctr,
        cvr,
        ctcvr,
        imputation,
        l2,
        total,
    })
}

/// Every estimator that can be evaluated on a set of predictions, with the
/// hyperparameters that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub ground_truth: Option<f64>,
    pub naive: Option<f64>,
    pub ipw: Option<f64>,
    pub dr: Option<f64>,
    pub dcmt_naive: Option<f64>,
    pub dcmt_main: Option<f64>,
    pub dcmt_full: Option<f64>,
    pub ctr: Option<f64>,
    pub ctcvr: Option<f64>,
    pub esmm_total: Option<f64>,
    pub total: Option<f64>,
    /// Counterfactual regularizer `L` at the configured `lambda1`.
    pub regularizer: Option<f64>,
    pub bias: BTreeMap<String, f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub w_cvr: f64,
    pub w_ctcvr: f64,
}

impl LossReport {
    /// Evaluates every applicable estimator on one set of predictions.
    ///
    /// Biases are measured against the ground-truth loss and are only
    /// present when `r_full` is supplied. `total` is the joint objective
    /// of `variant` with `frobenius_sq` as the parameter norm.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        variant: Variant,
        click: &[bool],
        r: &[bool],
        r_full: Option<&[bool]>,
        preds: &PredictionBatch,
        settings: &ObjectiveSettings,
        frobenius_sq: f64,
    ) -> Result<Self, EstimatorError> {
        let part = SpacePartition::from_clicks(click.iter().copied());
        let o = clip_all(&preds.o_hat, settings.clip_eps);
        let opts = CounterfactualOptions {
            lambda1: settings.lambda1,
            snips: settings.snips,
        };
        let mut rep = LossReport {
            lambda1: settings.lambda1,
            lambda2: settings.lambda2,
            w_cvr: settings.weights.w_cvr,
            w_ctcvr: settings.weights.w_ctcvr,
            ..Default::default()
        };
        rep.naive = naive_loss(r, &preds.r_hat, &part).ok();
        rep.ipw = Some(ipw_loss(r, &preds.r_hat, &o, &part)?);
        if let Some(e) = &preds.e_hat {
            rep.dr = Some(dr_loss(r, &preds.r_hat, &o, e, &part)?);
        }
        rep.dcmt_naive = Some(dcmt_naive_loss(r, &preds.r_hat, &o, &part)?);
        rep.dcmt_main = Some(dcmt_main_loss(r, &preds.r_hat, &preds.r_hat_cf, &o, &part, opts.snips)?);
        rep.dcmt_full = Some(dcmt_full_loss(r, &preds.r_hat, &preds.r_hat_cf, &o, &part, opts)?);
        rep.regularizer = Some(counterfactual_regularizer(&preds.r_hat, &preds.r_hat_cf, settings.lambda1));
        let ctr = ctr_loss(click, &preds.o_hat)?;
        let ctcvr = ctcvr_loss(r, &preds.t_hat)?;
        rep.ctr = Some(ctr);
        rep.ctcvr = Some(ctcvr);
        rep.esmm_total = Some(ctr + ctcvr);
        rep.total = Some(objective(variant, click, r, preds, settings, frobenius_sq)?.total);
        if let Some(full) = r_full {
            let gt = ground_truth_loss(full, &preds.r_hat)?;
            rep.ground_truth = Some(gt);
            let mut put = |k: &str, v: Option<f64>| {
                if let Some(v) = v {
                    rep.bias.insert(k.into(), (v - gt).abs());
                }
            };
            put("naive", rep.naive);
            put("ipw", rep.ipw);
            put("dr", rep.dr);
            put("dcmt_naive", rep.dcmt_naive);
            put("dcmt", rep.dcmt_full);
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const LN2: f64 = 0.6931471805599453;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Prediction whose log loss against `r` is exactly `e` (up to rounding).
    fn pred_for(r: bool, e: f64) -> f64 {
        let p = libm::exp(-e);
        if r {
            p
        } else {
            1.0 - p
        }
    }

    #[test]
    fn log_loss_values() {
        assert_eq!(log_loss(true, 0.5), LN2);
        assert_eq!(log_loss(false, 0.5), LN2);
        assert_eq!(log_loss(true, 0.25), 1.3862943611198906);
        assert!(log_loss(true, 0.0).is_finite());
    }

    #[test]
    fn clip_values() {
        assert_eq!(clip_propensity(0.0, 1e-6), 1e-6);
        assert_eq!(clip_propensity(0.5, 1e-6), 0.5);
        assert_eq!(clip_propensity(1.0, 1e-6), 1.0 - 1e-6);
    }

    #[test]
    fn ground_truth_examples() {
        let r = [true, false];
        let p = [pred_for(true, 0.2), pred_for(false, 0.4)];
        assert!(close(ground_truth_loss(&r, &p).unwrap(), 0.3, 1e-12));
        assert!(ground_truth_loss(&[true, false], &[1.0, 0.0]).unwrap() < 1e-10);
        assert_eq!(ground_truth_loss(&[true], &[0.25]).unwrap(), log_loss(true, 0.25));
        assert_eq!(ground_truth_loss(&[], &[]), Err(EstimatorError::EmptySpace));
    }

    #[test]
    fn naive_and_bias() {
        // e over O = {0.2, 0.4}; e over N chosen so that the D mean is 0.5.
        // Two unclicked samples with e = 0.7 each: (0.2 + 0.4 + 1.4) / 4 = 0.5.
        let click = [true, true, false, false];
        let r_obs = [true, false, false, false];
        let r_full = [true, false, false, false];
        let p = [pred_for(true, 0.2), pred_for(false, 0.4), pred_for(false, 0.7), pred_for(false, 0.7)];
        let part = SpacePartition::from_clicks(click);
        assert!(close(naive_loss(&r_obs, &p, &part).unwrap(), 0.3, 1e-12));
        assert!(close(bias_naive(&r_obs, &r_full, &p, &part).unwrap(), 0.2, 1e-12));

        let all = SpacePartition::from_clicks([true, true]);
        assert_eq!(bias_naive(&[true, false], &[true, false], &[0.3, 0.6], &all).unwrap(), 0.0);

        let none = SpacePartition::from_clicks([false, false]);
        assert_eq!(
            naive_loss(&[false, false], &[0.3, 0.6], &none),
            Err(EstimatorError::NoClickedSamples)
        );
    }

    #[test]
    fn ipw_examples() {
        let part = SpacePartition::from_clicks([true, false]);
        let p = [pred_for(true, 0.4), 0.3];
        let v = ipw_loss(&[true, false], &p, &[0.5, 0.1], &part).unwrap();
        assert!(close(v, 0.4, 1e-12));

        // o_hat = 1 on all clicked with O = D reduces to the ground truth.
        let all = SpacePartition::from_clicks([true, true, true]);
        let r = [true, false, true];
        let q = [0.3, 0.2, 0.9];
        assert_eq!(
            ipw_loss(&r, &q, &[1.0; 3], &all).unwrap(),
            ground_truth_loss(&r, &q).unwrap()
        );

        // Adding unclicked samples halves the value.
        let part2 = SpacePartition::from_clicks([true, false, false, false]);
        let v2 = ipw_loss(&[true, false, false, false], &[p[0], 0.3, 0.3, 0.3], &[0.5, 0.1, 0.1, 0.1], &part2)
            .unwrap();
        assert!(close(v2, v / 2.0, 1e-15));

        assert!(matches!(
            ipw_loss(&[true, false], &p, &[0.0, 0.1], &part),
            Err(EstimatorError::PropensityOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn dr_examples() {
        let part = SpacePartition::from_clicks([true]);
        let p = [pred_for(true, 0.5)];
        let v = dr_loss(&[true], &p, &[0.5], &[0.3], &part).unwrap();
        assert!(close(v, 0.7, 1e-12));

        let click = [true, false, true, false];
        let r = [true, false, false, false];
        let q = [0.6, 0.3, 0.2, 0.5];
        let part = SpacePartition::from_clicks(click);
        let e: Vec<f64> = r.iter().zip(&q).map(|(&a, &b)| log_loss(a, b)).collect();
        let v = dr_loss(&r, &q, &[0.3, 0.4, 0.9, 0.2], &e, &part).unwrap();
        assert!(close(v, ground_truth_loss(&r, &q).unwrap(), 1e-15));

        assert!(matches!(
            dr_loss(&r, &q, &[0.3, 0.4, 0.9, 0.2], &[0.1, -0.1, 0.0, 0.0], &part),
            Err(EstimatorError::NegativeImputation { index: 1, .. })
        ));
    }

    #[test]
    fn dcmt_naive_examples() {
        let part = SpacePartition::from_clicks([true, false, false, false]);
        let r = [true, false, false, false];
        let p = [pred_for(true, 1.0), 0.5, 0.5, 0.5];
        let o = [0.25, 0.5, 0.5, 0.5];
        let v = dcmt_naive_loss(&r, &p, &o, &part).unwrap();
        let expected = (4.0 + 3.0 * LN2 / 0.5) / 4.0;
        assert!(close(v, expected, 1e-12));

        let all = SpacePartition::from_clicks([true, true]);
        let (r, q, o) = ([true, false], [0.7, 0.4], [0.6, 0.3]);
        assert_eq!(
            dcmt_naive_loss(&r, &q, &o, &all).unwrap(),
            ipw_loss(&r, &q, &o, &all).unwrap()
        );
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(counterfactual_regularizer(&[0.3], &[0.7], 0.5), 0.0);
        assert!(close(counterfactual_regularizer(&[0.3], &[0.6], 0.001), 1e-4, 1e-16));
        assert_eq!(counterfactual_regularizer(&[0.3], &[0.2], 0.0), 0.0);
    }

    #[test]
    fn dcmt_main_examples() {
        // Single unclicked sample.
        let part = SpacePartition::from_clicks([false]);
        let v = dcmt_main_loss(&[false], &[0.1], &[0.8], &[0.5], &part, false).unwrap();
        assert!(close(v, log_loss(true, 0.8) / 0.5, 1e-15));

        // Uniform propensities under self-normalization reduce to per-space means.
        let click = [true, true, false, false, false];
        let r = [true, false, false, false, false];
        let rh = [0.7, 0.4, 0.2, 0.1, 0.3];
        let rc = [0.2, 0.5, 0.6, 0.9, 0.4];
        let part = SpacePartition::from_clicks(click);
        let v = dcmt_main_loss(&r, &rh, &rc, &[0.3; 5], &part, true).unwrap();
        let mean_o = (log_loss(true, 0.7) + log_loss(false, 0.4)) / 2.0;
        let mean_n = (log_loss(true, 0.6) + log_loss(true, 0.9) + log_loss(true, 0.4)) / 3.0;
        assert!(close(v, mean_o + mean_n, 1e-12));

        // Empty click space is allowed.
        let none = SpacePartition::from_clicks([false, false]);
        assert!(dcmt_main_loss(&[false, false], &[0.1, 0.2], &[0.9, 0.8], &[0.5, 0.5], &none, false).is_ok());
    }

    #[test]
    fn snips_examples() {
        let o = [0.2, 0.8];
        let w = snips_weights(&o, &[0, 1], Space::Clicked);
        assert!(close(w[0], 0.8, 1e-15) && close(w[1], 0.2, 1e-15));
        let w = snips_weights(&[0.4; 4], &[0, 1, 2, 3], Space::NonClicked);
        assert!(w.iter().all(|&x| close(x, 0.25, 1e-15)));
        assert_eq!(snips_weights(&[0.3], &[0], Space::Clicked), vec![1.0]);
        assert!(snips_weights(&[0.3], &[], Space::Clicked).is_empty());
    }

    #[test]
    fn ctr_ctcvr_examples() {
        assert!(ctr_loss(&[true, false], &[1.0 - 1e-13, 1e-13]).unwrap() < 1e-10);
        let v = ctcvr_loss(&[true, false, true, false], &[0.5; 4]).unwrap();
        assert_eq!(v, LN2);
        assert_eq!(ctcvr_loss(&[true], &[0.2]).unwrap(), log_loss(true, 0.2));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.1, 0.2, 0.3, w, 0.0, 123.0), 0.1 + 0.2 + 0.3);
        assert_eq!(total_loss(0.1, 0.2, 0.3, w, 1.0, 0.0), 0.1 + 0.2 + 0.3);
        assert!(close(total_loss(0.1, 0.2, 0.3, w, 0.5, 0.1), 0.65, 1e-15));
    }
}
