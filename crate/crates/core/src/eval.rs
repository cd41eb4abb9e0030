//! Offline evaluation: AUC, per-space evaluation of a trained model and the
//! prediction-distribution comparison against posterior conversion rates.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::features::Sample;
use crate::model::{Model, ModelError, PredictionBatch};
use crate::params::ParamStore;
use crate::synth::{posterior_stats, PosteriorStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("undefined AUC: labels contain a single class")]
    UndefinedAuc,
    #[error("labels and scores differ in length ({labels} vs {scores})")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score at index {0} is NaN")]
    NanScore(usize),
    #[error("entire-space evaluation needs full conversion labels")]
    MissingFullLabels,
    #[error("histogram needs at least one bucket")]
    ZeroBuckets,
    #[error("unknown evaluation space `{0}` (expected entire or click)")]
    UnknownSpace(alloc::string::String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Area under the ROC curve: the probability that a random positive
/// outranks a random negative, ties counted one half.
///
/// Computed from ranks in `O(n log n)`. Twice the Mann-Whitney statistic is
/// accumulated as an integer, so the result is the correctly rounded value
/// of an exact rational.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // -0.0 and 0.0 compare equal, which is what ties should mean here.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Which samples the CVR AUC is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvalSpace {
    /// Every exposed sample, labeled with the full conversion label.
    Entire,
    /// Clicked samples only, labeled with the observed conversion.
    Click,
}

impl EvalSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSpace::Entire => "entire",
            EvalSpace::Click => "click",
        }
    }
}

impl fmt::Display for EvalSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalSpace {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entire" => Ok(EvalSpace::Entire),
            "click" => Ok(EvalSpace::Click),
            other => Err(EvalError::UnknownSpace(other.into())),
        }
    }
}

/// Fixed-width histogram over `[0, 1]`. Buckets are half-open except the
/// last, which is closed. Values outside the range land in the edge buckets.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(buckets: usize) -> Result<Self, EvalError> {
        if buckets == 0 {
            return Err(EvalError::ZeroBuckets);
        }
        Ok(Self {
            counts: alloc::vec![0; buckets],
        })
    }

    pub fn from_values(buckets: usize, values: &[f64]) -> Result<Self, EvalError> {
        let mut h = Self::new(buckets)?;
        for &v in values {
            h.add(v);
        }
        Ok(h)
    }

    pub fn buckets(&self) -> usize {
        self.counts.len()
    }

    pub fn bucket_of(&self, v: f64) -> usize {
        let b = self.counts.len();
        if !(v > 0.0) {
            return 0;
        }
        let idx = libm::floor(v * b as f64);
        if idx >= b as f64 {
            b - 1
        } else {
            idx as usize
        }
    }

    pub fn add(&mut self, v: f64) {
        let i = self.bucket_of(v);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(low, high, count)` per bucket.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let b = self.counts.len() as f64;
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 / b, (i + 1) as f64 / b, c))
            .collect()
    }
}

/// Mean predictions per space against posterior conversion means.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionDistribution {
    pub histogram: Histogram,
    pub mean_pred_d: f64,
    pub mean_pred_o: f64,
    pub mean_pred_n: f64,
    /// Posterior conversion mean over the non-click space.
    pub alpha: f64,
    /// Posterior conversion mean over the exposure space.
    pub beta: f64,
    /// Posterior conversion mean over the click space.
    pub gamma: f64,
    /// `|mean_pred_d - beta|`.
    pub gap_beta: f64,
}

fn mean_where(values: &[f64], samples: &[Sample], keep: impl Fn(&Sample) -> bool) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (v, smp) in values.iter().zip(samples) {
        if keep(smp) {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Histogram of `r_hat` over the exposure space and its per-space means
/// compared with the posterior conversion means.
pub fn prediction_distribution(
    r_hat: &[f64],
    samples: &[Sample],
    buckets: usize,
) -> Result<PredictionDistribution, EvalError> {
    if r_hat.len() != samples.len() {
        return Err(EvalError::LengthMismatch {
            labels: samples.len(),
            scores: r_hat.len(),
        });
    }
    let histogram = Histogram::from_values(buckets, r_hat)?;
    let post: PosteriorStats = posterior_stats(samples).map_err(|_| EvalError::MissingFullLabels)?;
    let mean_pred_d = mean_where(r_hat, samples, |_| true);
    Ok(PredictionDistribution {
        histogram,
        mean_pred_d,
        mean_pred_o: mean_where(r_hat, samples, |s| s.click),
        mean_pred_n: mean_where(r_hat, samples, |s| !s.click),
        alpha: post.mean_n,
        beta: post.mean_d,
        gamma: post.mean_o,
        gap_beta: (mean_pred_d - post.mean_d).abs(),
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub space: EvalSpace,
    pub num_samples: usize,
    pub num_clicked: usize,
    /// `None` when the labels of the evaluated space hold a single class.
    pub cvr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub ctr_auc: Option<f64>,
    pub mean_r_hat: f64,
    pub mean_o_hat: f64,
    /// Present when full conversion labels are available.
    pub distribution: Option<PredictionDistribution>,
}

fn defined(r: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::UndefinedAuc) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates precomputed predictions.
pub fn evaluate_predictions(
    samples: &[Sample],
    preds: &PredictionBatch,
    space: EvalSpace,
    buckets: usize,
) -> Result<EvalReport, EvalError> {
    if preds.len() != samples.len() {
        return Err(EvalError::LengthMismatch {
            labels: samples.len(),
            scores: preds.len(),
        });
    }
    let has_full = samples.iter().all(|s| s.r_full.is_some());
    let cvr_auc = match space {
        EvalSpace::Entire => {
            if !has_full {
                return Err(EvalError::MissingFullLabels);
            }
            let labels: Vec<bool> = samples.iter().map(|s| s.r_full.unwrap_or(false)).collect();
            defined(auc(&labels, &preds.r_hat))?
        }
        EvalSpace::Click => {
            let (labels, scores): (Vec<bool>, Vec<f64>) = samples
                .iter()
                .zip(&preds.r_hat)
                .filter(|(s, _)| s.click)
                .map(|(s, &p)| (s.conversion, p))
                .unzip();
            defined(auc(&labels, &scores))?
        }
    };
    let conv: Vec<bool> = samples.iter().map(|s| s.conversion).collect();
    let clicks: Vec<bool> = samples.iter().map(|s| s.click).collect();
    let distribution = if has_full && !samples.is_empty() {
        Some(prediction_distribution(&preds.r_hat, samples, buckets)?)
    } else {
        Histogram::new(buckets)?;
        None
    };
    Ok(EvalReport {
        space,
        num_samples: samples.len(),
        num_clicked: clicks.iter().filter(|&&c| c).count(),
        cvr_auc,
        ctcvr_auc: defined(auc(&conv, &preds.t_hat))?,
        ctr_auc: defined(auc(&clicks, &preds.o_hat))?,
        mean_r_hat: mean_where(&preds.r_hat, samples, |_| true),
        mean_o_hat: mean_where(&preds.o_hat, samples, |_| true),
        distribution,
    })
}

/// Runs the model over `samples` and evaluates its predictions.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    space: EvalSpace,
    buckets: usize,
    batch_size: usize,
) -> Result<(EvalReport, PredictionBatch), EvalError> {
    let preds = model.predict(store, samples, batch_size)?;
    let report = evaluate_predictions(samples, &preds, space, buckets)?;
    Ok((report, preds))
}
