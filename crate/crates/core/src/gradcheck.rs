//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::Sample;
use crate::model::{Architecture, Model, Variant};
use crate::params::{ParamId, ParamStore};
use crate::synth::{self, SynthConfig};
use crate::tape::{NodeId, Tape, TapeError};

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Result of comparing every parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest [`relative_error`] over all checked entries.
    pub max_relative: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Smallest distance to a kink seen on the base tape or any perturbed
    /// tape. Differences across a kink are not derivatives, so callers
    /// should discard instances where this is not comfortably above `h`.
    pub kink_margin: f64,
}

/// Compares the analytic gradient of `loss` with central differences of
/// step `h` for every entry of every parameter in `store`. `loss` records
/// a scalar objective on the given tape from the given parameters.
pub fn check_gradients<F>(store: &ParamStore, h: f64, mut loss: F) -> Result<GradCheck, TapeError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId, TapeError>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut kink = tape.kink_margin();
    let mut probe = store.clone();
    let mut eval = |s: &ParamStore, kink: &mut f64| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let node = loss(&mut t, s)?;
        *kink = kink.min(t.kink_margin());
        Ok(t.value(node).data()[0])
    };
    let mut report = GradCheck {
        max_relative: 0.0,
        worst: None,
        checked: 0,
        kink_margin: f64::INFINITY,
    };
    for i in 0..store.len() {
        let id = ParamId(i);
        let len = store.get(id).len();
        for k in 0..len {
            let base = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = base + h;
            let up = eval(&probe, &mut kink)?;
            probe.get_mut(id).data_mut()[k] = base - h;
            let down = eval(&probe, &mut kink)?;
            probe.get_mut(id).data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric);
            if report.worst.is_none() || err > report.max_relative {
                report.max_relative = err;
                report.worst = Some((String::from(store.name(id)), k));
            }
            report.checked += 1;
        }
    }
    report.kink_margin = kink;
    Ok(report)
}

/// A small randomly initialized network with a batch of samples holding
/// both clicked and non-clicked rows.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: Model,
    pub store: ParamStore,
    pub samples: Vec<Sample>,
}

impl Instance {
    pub fn batch(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }
}

/// Draws an instance: one or two hidden layers of width 2 to 5, embedding
/// width 2, one sparse id pair and one dense field, `batch` samples
/// (at least 2).
pub fn random_instance(variant: Variant, seed: u64, batch: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = synth::generate(&SynthConfig {
        num_users: 6,
        num_items: 5,
        exposures_per_user: 5,
        latent_dim: 2,
        ctr_bias: 0.0,
        cvr_bias: 0.0,
        noise_dense_fields: 1,
        embedding_dim: 2,
        seed,
        ..SynthConfig::default()
    })
    .expect("fixed generator settings are valid");
    let depth = rng.random_range(1..=2);
    let hidden_dims = (0..depth).map(|_| rng.random_range(2..=5)).collect();
    let arch = Architecture {
        embedding_dim: None,
        hidden_dims,
        shared_depth: None,
    };
    let (model, store) = Model::init(&data.schema, &arch, variant, seed).expect("valid architecture");
    let batch = batch.max(2);
    let (clicked, other): (Vec<Sample>, Vec<Sample>) = data.samples.into_iter().partition(|s| s.click);
    let take_clicked = (batch / 2).max(batch.saturating_sub(other.len())).min(clicked.len());
    let mut samples: Vec<Sample> = clicked.into_iter().take(take_clicked).collect();
    samples.extend(other.into_iter().take(batch - samples.len()));
    Instance { model, store, samples }
}
