//! Empirical checks of the unbiasedness results for the CVR estimators.
//!
//! Every check works on a [`BiasInstance`]: a small exposure space with
//! true click propensities, full conversion labels, one realized click
//! vector and fixed CVR predictions.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::estimators::{
    clip_propensity, dcmt_full_loss, dr_loss, ground_truth_loss,
    ipw_loss, log_loss, CounterfactualOptions, EstimatorError,
};
use crate::features::SpacePartition;

#[derive(Clone, Debug, PartialEq)]
pub struct BiasInstance {
    /// True click propensities.
    pub p: Vec<f64>,
    /// Realized clicks.
    pub click: Vec<bool>,
    /// Conversion labels over the whole exposure space.
    pub r_full: Vec<bool>,
    /// Fixed CVR predictions.
    pub r_hat: Vec<f64>,
}

impl BiasInstance {
    /// Random instance of `n` samples: `p ~ U[0.2, 0.8]`,
    /// `r_full ~ Bernoulli(0.5)`, `r_hat ~ U[0.05, 0.95]`, `o ~ Bernoulli(p)`.
    pub fn random<R: Rng>(rng: &mut R, n: usize) -> Self {
        let mut inst = BiasInstance {
            p: Vec::with_capacity(n),
            click: Vec::with_capacity(n),
            r_full: Vec::with_capacity(n),
            r_hat: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let p = rng.random_range(0.2..=0.8);
            inst.p.push(p);
            inst.r_full.push(rng.random_bool(0.5));
            inst.r_hat.push(rng.random_range(0.05..=0.95));
            inst.click.push(rng.random::<f64>() < p);
        }
        inst
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Conversion labels as observed: `o * r_full`.
    pub fn observed(&self) -> Vec<bool> {
        self.click.iter().zip(&self.r_full).map(|(&o, &r)| o && r).collect()
    }

    /// Full-label errors `e(r_full, r_hat)`.
    pub fn errors(&self) -> Vec<f64> {
        self.r_full
            .iter()
            .zip(&self.r_hat)
            .map(|(&r, &p)| log_loss(r, p))
            .collect()
    }

    fn check_propensities(&self) -> Result<(), EstimatorError> {
        match self.p.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            Some(&p) => Err(EstimatorError::DegeneratePropensity(p)),
            None => Ok(()),
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Verdict {
    /// Value of the estimator under test (averaged for Monte Carlo checks).
    pub estimate: f64,
    /// Value it is compared against.
    pub reference: f64,
    /// `|estimate - reference|`.
    pub bias: f64,
    /// `bias / |reference|`.
    pub relative: f64,
    /// Threshold the verdict was judged with.
    pub tolerance: f64,
    pub pass: bool,
}

impl Verdict {
    fn absolute(estimate: f64, reference: f64, tolerance: f64) -> Self {
        let bias = (estimate - reference).abs();
        Verdict {
            estimate,
            reference,
            bias,
            relative: bias / reference.abs(),
            tolerance,
            pass: bias < tolerance,
        }
    }

    fn relative(estimate: f64, reference: f64, tolerance: f64) -> Self {
        let mut v = Self::absolute(estimate, reference, tolerance);
        v.pass = v.relative < tolerance;
        v
    }
}

/// Resamples clicks `o ~ Bernoulli(p)` `trials` times with `o_hat = p` and
/// compares the mean inverse propensity loss with the full-label ground
/// truth. Passes when the relative error is below `rel_tol`.
pub fn check_ipw_unbiased(
    inst: &BiasInstance,
    trials: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<Verdict, EstimatorError> {
    inst.check_propensities()?;
    let gt = ground_truth_loss(&inst.r_full, &inst.r_hat)?;
    let n = inst.len();
    // On clicked samples the observed label equals the full label, so the
    // per-sample weighted error is fixed and only the click draw varies.
    let weighted: Vec<f64> = inst.errors().iter().zip(&inst.p).map(|(e, p)| e / p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut s = 0.0;
        for (w, &p) in weighted.iter().zip(&inst.p) {
            if rng.random::<f64>() < p {
                s += w;
            }
        }
        total += s / n as f64;
    }
    Ok(Verdict::relative(total / trials as f64, gt, rel_tol))
}

/// One realized draw of the inverse propensity loss through the estimator
/// itself, for cross-checking the fast path of [`check_ipw_unbiased`].
pub fn ipw_draw(inst: &BiasInstance) -> Result<f64, EstimatorError> {
    let part = SpacePartition::from_clicks(inst.click.iter().copied());
    ipw_loss(&inst.observed(), &inst.r_hat, &inst.p, &part)
}

/// Doubly robust loss with an exact error imputation `e_hat = e`, against
/// the full-label ground truth.
pub fn check_dr_unbiased(inst: &BiasInstance, tol: f64) -> Result<Verdict, EstimatorError> {
    inst.check_propensities()?;
    let part = SpacePartition::from_clicks(inst.click.iter().copied());
    let e_hat = inst.errors();
    let dr = dr_loss(&inst.observed(), &inst.r_hat, &inst.p, &e_hat, &part)?;
    let gt = ground_truth_loss(&inst.r_full, &inst.r_hat)?;
    Ok(Verdict::absolute(dr, gt, tol))
}

/// Counterfactual loss with `o_hat = clip(o, eps)` and `r_hat_cf = 1 - r_hat`
/// against the ground truth on observed labels.
pub fn check_dcmt_unbiased(
    inst: &BiasInstance,
    eps: f64,
    lambda1: f64,
    tol: f64,
) -> Result<Verdict, EstimatorError> {
    let part = SpacePartition::from_clicks(inst.click.iter().copied());
    let r = inst.observed();
    let o_hat: Vec<f64> = inst
        .click
        .iter()
        .map(|&o| clip_propensity(if o { 1.0 } else { 0.0 }, eps))
        .collect();
    let r_cf: Vec<f64> = inst.r_hat.iter().map(|p| 1.0 - p).collect();
    let opts = CounterfactualOptions { lambda1, snips: false };
    let dcmt = dcmt_full_loss(&r, &inst.r_hat, &r_cf, &o_hat, &part, opts)?;
    let gt = ground_truth_loss(&r, &inst.r_hat)?;
    Ok(Verdict::absolute(dcmt, gt, tol))
}

/// Monte Carlo mean of the counterfactual loss when clicks are resampled
/// `o ~ Bernoulli(p)` and `o_hat = p` (accurate in expectation only), with
/// `r_hat_cf = 1 - r_hat`. The verdict compares against the full-label
/// ground truth and is informational: `pass` is always `true` and
/// `tolerance` is infinite.
pub fn measure_dcmt_stochastic(inst: &BiasInstance, trials: usize, seed: u64) -> Result<Verdict, EstimatorError> {
    inst.check_propensities()?;
    let gt = ground_truth_loss(&inst.r_full, &inst.r_hat)?;
    let n = inst.len();
    let r_cf: Vec<f64> = inst.r_hat.iter().map(|p| 1.0 - p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut s = 0.0;
        for i in 0..n {
            let p = inst.p[i];
            if rng.random::<f64>() < p {
                s += log_loss(inst.r_full[i], inst.r_hat[i]) / p;
            } else {
                // Unclicked: observed label 0, mirrored label 1.
                s += log_loss(true, r_cf[i]) / (1.0 - p);
            }
        }
        total += s / n as f64;
    }
    let mut v = Verdict::absolute(total / trials as f64, gt, f64::INFINITY);
    v.pass = true;
    Ok(v)
}

/// ESMM objective bias: `(1/|D|) |sum (e_ctr + e_ctcvr - e_cvr)|` with
/// `e_ctr = e(o, o_hat)`, `e_ctcvr = e(o * r, o_hat * r_hat)` and
/// `e_cvr = e(r_full, r_hat)`.
pub fn esmm_bias(
    click: &[bool],
    r_full: &[bool],
    o_hat: &[f64],
    r_hat: &[f64],
) -> Result<f64, EstimatorError> {
    let n = click.len();
    for (what, got) in [("labels", r_full.len()), ("propensities", o_hat.len()), ("predictions", r_hat.len())] {
        if got != n {
            return Err(EstimatorError::LengthMismatch { what, expected: n, got });
        }
    }
    if n == 0 {
        return Err(EstimatorError::EmptySpace);
    }
    let mut s = 0.0;
    for i in 0..n {
        let e_ctr = log_loss(click[i], o_hat[i]);
        let e_ctcvr = log_loss(click[i] && r_full[i], o_hat[i] * r_hat[i]);
        let e_cvr = log_loss(r_full[i], r_hat[i]);
        s += e_ctr + e_ctcvr - e_cvr;
    }
    Ok(s.abs() / n as f64)
}

/// The fixed four-sample instance used by [`esmm_bias_demo`]:
/// `(click, r_full, o_hat, r_hat)`.
pub fn esmm_demo_instance() -> ([bool; 4], [bool; 4], [f64; 4], [f64; 4]) {
    (
        [true, true, false, false],
        [true, false, true, false],
        [0.8, 0.6, 0.3, 0.2],
        [0.7, 0.4, 0.5, 0.3],
    )
}

/// Evaluates [`esmm_bias`] on [`esmm_demo_instance`]; passes when the bias
/// exceeds `threshold`.
pub fn esmm_bias_demo(threshold: f64) -> Verdict {
    let (o, r, oh, rh) = esmm_demo_instance();
    let bias = esmm_bias(&o, &r, &oh, &rh).expect("fixed instance is well formed");
    Verdict {
        estimate: bias,
        reference: 0.0,
        bias,
        relative: f64::INFINITY,
        tolerance: threshold,
        pass: bias > threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dr_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = BiasInstance::random(&mut rng, 16);
            let v = check_dr_unbiased(&inst, 1e-12).unwrap();
            assert!(v.pass, "{v:?}");
        }
    }

    #[test]
    fn dcmt_identity_scales_with_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = BiasInstance::random(&mut rng, 32);
        let a = check_dcmt_unbiased(&inst, 1e-6, 0.001, 1e-4).unwrap();
        let b = check_dcmt_unbiased(&inst, 1e-3, 0.001, 1.0).unwrap();
        assert!(a.pass);
        assert!(b.bias > a.bias);
    }

    #[test]
    fn ipw_fast_path_matches_estimator() {
        // A trial with all clicks forced reproduces the estimator value.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inst = BiasInstance::random(&mut rng, 8);
        inst.click = [true, false, true, true, false, false, true, false].to_vec();
        let direct = ipw_draw(&inst).unwrap();
        let e = inst.errors();
        let manual = inst
            .click
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .fold(0.0, |acc, (i, _)| acc + e[i] / inst.p[i])
            / 8.0;
        assert!((direct - manual).abs() < 1e-15);
    }

    #[test]
    fn degenerate_propensity_rejected() {
        let inst = BiasInstance {
            p: [0.0, 0.5].to_vec(),
            click: [false, true].to_vec(),
            r_full: [false, true].to_vec(),
            r_hat: [0.3, 0.6].to_vec(),
        };
        assert_eq!(
            check_ipw_unbiased(&inst, 10, 0, 0.01),
            Err(EstimatorError::DegeneratePropensity(0.0))
        );
    }

    #[test]
    fn esmm_demo_is_biased() {
        assert!(esmm_bias_demo(0.01).pass);
    }
}
