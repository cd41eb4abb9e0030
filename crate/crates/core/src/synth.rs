//! Synthetic missing-not-at-random exposure logs with known click
//! propensities and conversion probabilities.
//!
//! Users and items carry two independent latent factors and two scalar main
//! effects each, all standard normal. The click
//! logit reads the first pair, the conversion logit mixes the same affinity
//! with the second pair through the correlation `rho`:
//!
//! ```text
//! s  = scale * u.v / sqrt(k) + m * (bu + bi)
//! s' = scale * u'.v' / sqrt(k) + m * (bu' + bi')
//! a  = s + ctr_bias
//! b  = rho * s + sqrt(1 - rho^2) * s' + cvr_bias
//! p  = sigmoid(a)                     q  = sigmoid(b)
//! o ~ Bernoulli(p)    r_full ~ Bernoulli(q)    r = o * r_full
//! ```
//!
//! With `rho > 0` users click the items they would convert on, so the click
//! space over-represents conversions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::features::{FeatureField, FeatureKind, FeatureSchema, FeatureValue, Sample, Wideness};
use crate::math;

/// Bounds applied to generated probabilities so they stay strictly inside
/// `(0, 1)`.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Distinct items exposed to every user.
    pub exposures_per_user: usize,
    pub latent_dim: usize,
    pub ctr_bias: f64,
    pub cvr_bias: f64,
    /// Correlation between the click and conversion affinities, in `[-1, 1]`.
    pub correlation: f64,
    /// Multiplier on both dot-product affinities; `0` removes them.
    pub latent_scale: f64,
    /// Scale of the standard normal per-user and per-item main effects added
    /// to each affinity; `0` leaves the pure dot product.
    pub main_effect_scale: f64,
    /// Number of wide dense noise fields of width 2.
    pub noise_dense_fields: usize,
    /// Embedding width written into the generated schema.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 500,
            exposures_per_user: 50,
            latent_dim: 8,
            ctr_bias: -1.5,
            cvr_bias: -1.0,
            correlation: 0.8,
            latent_scale: 2.0,
            main_effect_scale: 1.0,
            noise_dense_fields: 0,
            embedding_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("correlation {0} outside [-1, 1]")]
    Correlation(f64),
    #[error("exposures_per_user {exposures} exceeds num_items {items}")]
    TooManyExposures { exposures: usize, items: usize },
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("test ratio {0} outside [0, 1]")]
    TestRatio(f64),
    #[error("full conversion labels are required")]
    MissingFullLabels,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("exposures_per_user", self.exposures_per_user),
            ("latent_dim", self.latent_dim),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(SynthError::Zero(name));
            }
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(SynthError::Correlation(self.correlation));
        }
        if self.exposures_per_user > self.num_items {
            return Err(SynthError::TooManyExposures {
                exposures: self.exposures_per_user,
                items: self.num_items,
            });
        }
        for (name, value) in [
            ("ctr_bias", self.ctr_bias),
            ("cvr_bias", self.cvr_bias),
            ("latent_scale", self.latent_scale),
            ("main_effect_scale", self.main_effect_scale),
        ] {
            if !value.is_finite() {
                return Err(SynthError::NonFinite { name, value });
            }
        }
        Ok(())
    }

    /// Schema of the generated features: `user_id` and `item_id` sparse
    /// fields feeding both parts, then the wide noise groups.
    pub fn schema(&self) -> FeatureSchema {
        let mut fields = Vec::with_capacity(2 + self.noise_dense_fields);
        fields.push(FeatureField {
            name: String::from("user_id"),
            kind: FeatureKind::SparseId {
                vocab_size: self.num_users,
            },
            wideness: Wideness::Both,
        });
        fields.push(FeatureField {
            name: String::from("item_id"),
            kind: FeatureKind::SparseId {
                vocab_size: self.num_items,
            },
            wideness: Wideness::Both,
        });
        for k in 0..self.noise_dense_fields {
            fields.push(FeatureField {
                name: format!("noise_{k}"),
                kind: FeatureKind::DenseGroup { group_width: 2 },
                wideness: Wideness::Wide,
            });
        }
        FeatureSchema::new(fields, self.embedding_dim).expect("generated schema is valid")
    }
}

/// A generated exposure log.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
    /// `(user, item)` of every sample.
    pub pairs: Vec<(usize, usize)>,
    /// True conversion probability of every sample.
    pub q: Vec<f64>,
}

struct Latents {
    click: Vec<f64>,
    conv: Vec<f64>,
    click_main: Vec<f64>,
    conv_main: Vec<f64>,
}

fn latents(rng: &mut ChaCha8Rng, count: usize, k: usize) -> Latents {
    let mut draw = |len: usize| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Latents {
        click: draw(count * k),
        conv: draw(count * k),
        click_main: draw(count),
        conv_main: draw(count),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

// Stream layout of the ChaCha generator: 0 user latents, 1 item latents,
// 2 + u the exposures of user u.
const USER_STREAM: u64 = 0;
const ITEM_STREAM: u64 = 1;
const EXPOSURE_STREAM_BASE: u64 = 2;

/// Generates an exposure log. Rows are ordered by user, then item.
/// Identical configurations give identical data.
pub fn generate(config: &SynthConfig) -> Result<SyntheticData, SynthError> {
    config.validate()?;
    let k = config.latent_dim;
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s);
        rng
    };
    let users = latents(&mut stream(USER_STREAM), config.num_users, k);
    let items = latents(&mut stream(ITEM_STREAM), config.num_items, k);
    let norm = config.latent_scale / math::sqrt(k as f64);
    let rho = config.correlation;
    let rho_c = math::sqrt((1.0 - rho * rho).max(0.0));
    let clamp = |x: f64| x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);

    let n_rows = config.num_users * config.exposures_per_user;
    let mut data = SyntheticData {
        schema: config.schema(),
        samples: Vec::with_capacity(n_rows),
        pairs: Vec::with_capacity(n_rows),
        q: Vec::with_capacity(n_rows),
    };
    for u in 0..config.num_users {
        let mut rng = stream(EXPOSURE_STREAM_BASE + u as u64);
        let mut chosen = index::sample(&mut rng, config.num_items, config.exposures_per_user).into_vec();
        chosen.sort_unstable();
        let uc = &users.click[u * k..(u + 1) * k];
        let uv = &users.conv[u * k..(u + 1) * k];
        for j in chosen {
            let me = config.main_effect_scale;
            let s = norm * dot(uc, &items.click[j * k..(j + 1) * k])
                + me * (users.click_main[u] + items.click_main[j]);
            let s2 = norm * dot(uv, &items.conv[j * k..(j + 1) * k])
                + me * (users.conv_main[u] + items.conv_main[j]);
            let p = clamp(math::sigmoid(s + config.ctr_bias));
            let q = clamp(math::sigmoid(rho * s + rho_c * s2 + config.cvr_bias));
            let click = rng.random::<f64>() < p;
            let r_full = rng.random::<f64>() < q;
            let mut features = Vec::with_capacity(2 + config.noise_dense_fields);
            features.push(FeatureValue::Id(u));
            features.push(FeatureValue::Id(j));
            for _ in 0..config.noise_dense_fields {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                features.push(FeatureValue::Dense(alloc::vec![a, b]));
            }
            data.samples.push(Sample {
                features,
                click,
                conversion: click && r_full,
                p_true: Some(p),
                r_full: Some(r_full),
            });
            data.pairs.push((u, j));
            data.q.push(q);
        }
    }
    Ok(data)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform value in `[0, 1)` determined by `(seed, user, item)`.
pub fn pair_hash(seed: u64, user: usize, item: usize) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ user as u64) ^ item as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits rows into `(train, test)` by a hash of the `(user, item)` pair,
    /// so a pair never appears on both sides. Row order is preserved.
    pub fn split(&self, test_ratio: f64, seed: u64) -> Result<(SyntheticData, SyntheticData), SynthError> {
        if !(0.0..=1.0).contains(&test_ratio) {
            return Err(SynthError::TestRatio(test_ratio));
        }
        let empty = || SyntheticData {
            schema: self.schema.clone(),
            samples: Vec::new(),
            pairs: Vec::new(),
            q: Vec::new(),
        };
        let (mut train, mut test) = (empty(), empty());
        for ((s, &(u, j)), &q) in self.samples.iter().zip(&self.pairs).zip(&self.q) {
            let side = if pair_hash(seed, u, j) < test_ratio {
                &mut test
            } else {
                &mut train
            };
            side.samples.push(s.clone());
            side.pairs.push((u, j));
            side.q.push(q);
        }
        Ok((train, test))
    }
}

/// Mean full conversion label over the exposure, click and non-click spaces.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PosteriorStats {
    /// Over the exposure space (`beta`).
    pub mean_d: f64,
    /// Over the click space (`gamma`).
    pub mean_o: f64,
    /// Over the non-click space (`alpha`).
    pub mean_n: f64,
    pub n_d: usize,
    pub n_o: usize,
    pub n_n: usize,
}

/// Posterior conversion means over `D`, `O` and `N` from `r_full`. A mean
/// over an empty space is NaN.
pub fn posterior_stats(samples: &[Sample]) -> Result<PosteriorStats, SynthError> {
    let (mut sd, mut so, mut sn) = (0usize, 0usize, 0usize);
    let (mut nd, mut no, mut nn) = (0usize, 0usize, 0usize);
    for s in samples {
        let r = s.r_full.ok_or(SynthError::MissingFullLabels)? as usize;
        sd += r;
        nd += 1;
        if s.click {
            so += r;
            no += 1;
        } else {
            sn += r;
            nn += 1;
        }
    }
    let mean = |s: usize, n: usize| if n == 0 { f64::NAN } else { s as f64 / n as f64 };
    Ok(PosteriorStats {
        mean_d: mean(sd, nd),
        mean_o: mean(so, no),
        mean_n: mean(sn, nn),
        n_d: nd,
        n_o: no,
        n_n: nn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_users: 20,
            num_items: 15,
            exposures_per_user: 10,
            latent_dim: 3,
            noise_dense_fields: 1,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let mut other = small();
        other.seed = 12;
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn rows_are_valid_and_ordered() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 200);
        for (s, w) in d.samples.iter().zip(d.pairs.windows(2).map(|w| w[0] < w[1]).chain([true])) {
            s.validate(&d.schema).unwrap();
            assert!(!s.conversion || s.click);
            let p = s.p_true.unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert!(w);
        }
        assert!(d.q.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.correlation = 1.5;
        assert_eq!(generate(&c), Err(SynthError::Correlation(1.5)));
        let mut c = small();
        c.num_users = 0;
        assert_eq!(generate(&c), Err(SynthError::Zero("num_users")));
        let mut c = small();
        c.exposures_per_user = 16;
        assert!(matches!(generate(&c), Err(SynthError::TooManyExposures { .. })));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let d = generate(&small()).unwrap();
        let (tr, te) = d.split(0.3, 5).unwrap();
        assert_eq!(tr.len() + te.len(), d.len());
        assert!(te.len() > 20 && te.len() < 100);
        assert!(tr.pairs.iter().all(|p| !te.pairs.contains(p)));
        assert_eq!(d.split(0.0, 5).unwrap().1.len(), 0);
    }

    #[test]
    fn posterior_requires_full_labels() {
        let mut d = generate(&small()).unwrap();
        d.samples[3].r_full = None;
        assert_eq!(posterior_stats(&d.samples), Err(SynthError::MissingFullLabels));
    }
}
