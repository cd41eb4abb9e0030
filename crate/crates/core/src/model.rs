//! CTR tower, twin CVR tower and the baseline model variants.
//!
//! Every tower is wide&deep: a rectifier MLP over the concatenated deep
//! embeddings produces the deep logit, and a linear map over the wide
//! embeddings produces the wide logit. The twin CVR tower shares its hidden
//! trunk between a factual head and a counterfactual head; by default every
//! hidden layer is shared and each head owns only its final projection and
//! its wide weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{EmbeddingLayer, FeatureSchema, Sample, SampleError, SchemaError};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    /// CVR trained on clicked samples only.
    Naive,
    /// CTR and CTCVR losses only; CVR is learned through `t = o * r`.
    Esmm,
    /// Inverse-propensity weighted CVR loss over clicked samples.
    Ipw,
    /// Doubly robust CVR loss with an imputation tower.
    Dr,
    /// Twin tower with factual / counterfactual losses and the soft prior.
    Dcmt,
    /// Propensity debiasing over the whole exposure space, factual head only.
    DcmtPd,
    /// Counterfactual mechanism without propensity weights.
    DcmtCf,
    /// Counterfactual prediction pinned to `1 - r_hat`.
    DcmtHard,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Naive,
        Variant::Esmm,
        Variant::Ipw,
        Variant::Dr,
        Variant::Dcmt,
        Variant::DcmtPd,
        Variant::DcmtCf,
        Variant::DcmtHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Esmm => "esmm",
            Variant::Ipw => "ipw",
            Variant::Dr => "dr",
            Variant::Dcmt => "dcmt",
            Variant::DcmtPd => "dcmt_pd",
            Variant::DcmtCf => "dcmt_cf",
            Variant::DcmtHard => "dcmt_hard",
        }
    }

    /// Variants whose CVR tower carries a trainable counterfactual head.
    pub fn has_twin_head(self) -> bool {
        matches!(self, Variant::Dcmt | Variant::DcmtPd | Variant::DcmtCf)
    }

    pub fn has_imputation(self) -> bool {
        self == Variant::Dr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown model variant `{0}` (expected one of naive, esmm, ipw, dr, dcmt, dcmt_pd, dcmt_cf, dcmt_hard)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| UnknownVariant(s.into()))
    }
}

/// Tower shapes shared by every tower of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    /// Overrides the schema's embedding width when set.
    pub embedding_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    /// Number of leading hidden layers shared by the twin heads. `None`
    /// shares all of them.
    pub shared_depth: Option<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            embedding_dim: None,
            hidden_dims: vec![64, 64, 32],
            shared_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("hidden layer widths must be positive")]
    ZeroHidden,
    #[error("shared_depth {shared} exceeds the {total} hidden layers")]
    SharedDepth { shared: usize, total: usize },
    #[error("expected deep width {expected_deep} / wide width {expected_wide}, got {deep} / {wide}")]
    InputWidth {
        expected_deep: usize,
        expected_wide: usize,
        deep: usize,
        wide: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = math::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(fan_in, fan_out, data));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId, TapeError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, widths: &[usize]) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::init(store, rng, &format!("{name}.{i}"), fan_in, w);
                fan_in = w;
                l
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: NodeId) -> Result<NodeId, TapeError> {
        for l in &self.layers {
            let h = l.forward(tape, store, x)?;
            x = tape.relu(h);
        }
        Ok(x)
    }

    fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Output head: optional specific hidden layers, a projection to one deep
/// logit, and the wide linear part.
#[derive(Clone, Debug, PartialEq)]
struct Head {
    hidden: Mlp,
    out: Linear,
    wide: Option<Linear>,
}

struct HeadLogits {
    wide: NodeId,
    deep: NodeId,
    total: NodeId,
}

impl Head {
    fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        widths: &[usize],
        wide_width: usize,
    ) -> Self {
        let hidden = Mlp::init(store, rng, &format!("{name}.hidden"), input, widths);
        let last = widths.last().copied().unwrap_or(input);
        let out = Linear::init(store, rng, &format!("{name}.out"), last, 1);
        let wide = (wide_width > 0).then(|| Linear::init(store, rng, &format!("{name}.wide"), wide_width, 1));
        Self { hidden, out, wide }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trunk: NodeId,
        wide_in: Option<NodeId>,
        rows: usize,
    ) -> Result<HeadLogits, TapeError> {
        let h = self.hidden.forward(tape, store, trunk)?;
        let deep = self.out.forward(tape, store, h)?;
        let wide = match (&self.wide, wide_in) {
            (Some(l), Some(x)) => l.forward(tape, store, x)?,
            _ => tape.constant(Tensor::zeros(rows, 1)),
        };
        let total = tape.add(wide, deep)?;
        Ok(HeadLogits { wide, deep, total })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        if let Some(w) = &self.wide {
            p.extend(w.params());
        }
        p
    }
}

/// Shared trunk plus one or two heads.
#[derive(Clone, Debug, PartialEq)]
struct Tower {
    trunk: Mlp,
    heads: Vec<Head>,
}

impl Tower {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        deep_width: usize,
        wide_width: usize,
        hidden: &[usize],
        shared: usize,
        head_names: &[&str],
    ) -> Self {
        let trunk = Mlp::init(store, rng, &format!("{name}.trunk"), deep_width, &hidden[..shared]);
        let trunk_out = hidden[..shared].last().copied().unwrap_or(deep_width);
        let heads = head_names
            .iter()
            .map(|h| {
                Head::init(
                    store,
                    rng,
                    &format!("{name}.{h}"),
                    trunk_out,
                    &hidden[shared..],
                    wide_width,
                )
            })
            .collect();
        Self { trunk, heads }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p
    }
}

/// Tape nodes produced by one forward pass over a batch. All are `n x 1`.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub o_logit: NodeId,
    pub o_hat: NodeId,
    pub r_hat: NodeId,
    pub r_hat_cf: NodeId,
    pub t_hat: NodeId,
    pub l_f: NodeId,
    pub l_cf: NodeId,
    pub lw_f: NodeId,
    pub ld_f: NodeId,
    pub lw_cf: NodeId,
    pub ld_cf: NodeId,
    pub e_hat: Option<NodeId>,
}

/// Per-sample predictions and the logits that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionBatch {
    pub o_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub r_hat_cf: Vec<f64>,
    pub t_hat: Vec<f64>,
    pub o_logit: Vec<f64>,
    pub l_f: Vec<f64>,
    pub l_cf: Vec<f64>,
    pub lw_f: Vec<f64>,
    pub ld_f: Vec<f64>,
    pub lw_cf: Vec<f64>,
    pub ld_cf: Vec<f64>,
    /// Imputed CVR error, populated only for the doubly robust variant.
    pub e_hat: Option<Vec<f64>>,
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        self.o_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o_hat.is_empty()
    }

    pub fn from_tape(tape: &Tape, nodes: &ForwardNodes) -> Self {
        let col = |n: NodeId| tape.value(n).data().to_vec();
        Self {
            o_hat: col(nodes.o_hat),
            r_hat: col(nodes.r_hat),
            r_hat_cf: col(nodes.r_hat_cf),
            t_hat: col(nodes.t_hat),
            o_logit: col(nodes.o_logit),
            l_f: col(nodes.l_f),
            l_cf: col(nodes.l_cf),
            lw_f: col(nodes.lw_f),
            ld_f: col(nodes.ld_f),
            lw_cf: col(nodes.lw_cf),
            ld_cf: col(nodes.ld_cf),
            e_hat: nodes.e_hat.map(col),
        }
    }

    fn extend(&mut self, other: PredictionBatch) {
        self.o_hat.extend(other.o_hat);
        self.r_hat.extend(other.r_hat);
        self.r_hat_cf.extend(other.r_hat_cf);
        self.t_hat.extend(other.t_hat);
        self.o_logit.extend(other.o_logit);
        self.l_f.extend(other.l_f);
        self.l_cf.extend(other.l_cf);
        self.lw_f.extend(other.lw_f);
        self.ld_f.extend(other.ld_f);
        self.lw_cf.extend(other.lw_cf);
        self.ld_cf.extend(other.ld_cf);
        if let Some(e) = other.e_hat {
            self.e_hat.get_or_insert_with(Vec::new).extend(e);
        }
    }
}

/// Parameter groups of the CVR tower, exposed for gradient-flow checks.
#[derive(Clone, Debug, Default)]
pub struct CvrParamGroups {
    pub trunk: Vec<ParamId>,
    pub factual: Vec<ParamId>,
    pub counterfactual: Vec<ParamId>,
}

/// A complete network: shared embeddings, CTR tower, CVR tower and, for the
/// doubly robust variant, the imputation tower.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    variant: Variant,
    arch: Architecture,
    schema: FeatureSchema,
    embeddings: EmbeddingLayer,
    ctr: Tower,
    cvr: Tower,
    imputation: Option<Tower>,
}

impl Model {
    /// Builds a model and its freshly initialized parameters. Identical
    /// arguments always produce bit-identical parameters.
    pub fn init(
        schema: &FeatureSchema,
        arch: &Architecture,
        variant: Variant,
        seed: u64,
    ) -> Result<(Model, ParamStore), ModelError> {
        if arch.hidden_dims.contains(&0) {
            return Err(ModelError::ZeroHidden);
        }
        let total = arch.hidden_dims.len();
        let shared = arch.shared_depth.unwrap_or(total);
        if shared > total {
            return Err(ModelError::SharedDepth { shared, total });
        }
        let schema = match arch.embedding_dim {
            Some(d) => schema.with_embedding_dim(d)?,
            None => schema.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embeddings = EmbeddingLayer::init(&schema, &mut store, &mut rng);
        let (dw, ww) = (schema.deep_width(), schema.wide_width());
        let hidden = &arch.hidden_dims;
        let ctr = Tower::init(&mut store, &mut rng, "ctr", dw, ww, hidden, total, &["head"]);
        let cvr_heads: &[&str] = if variant.has_twin_head() {
            &["head_f", "head_cf"]
        } else {
            &["head_f"]
        };
        let cvr = Tower::init(&mut store, &mut rng, "cvr", dw, ww, hidden, shared, cvr_heads);
        let imputation = variant
            .has_imputation()
            .then(|| Tower::init(&mut store, &mut rng, "imp", dw, 0, hidden, total, &["head"]));
        Ok((
            Model {
                variant,
                arch: arch.clone(),
                schema,
                embeddings,
                ctr,
                cvr,
                imputation,
            },
            store,
        ))
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Schema with the effective embedding width.
    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn embeddings(&self) -> &EmbeddingLayer {
        &self.embeddings
    }

    pub fn cvr_param_groups(&self) -> CvrParamGroups {
        CvrParamGroups {
            trunk: self.cvr.trunk.params(),
            factual: self.cvr.heads[0].params(),
            counterfactual: self.cvr.heads.get(1).map(Head::params).unwrap_or_default(),
        }
    }

    pub fn ctr_params(&self) -> Vec<ParamId> {
        self.ctr.params()
    }

    pub fn imputation_params(&self) -> Vec<ParamId> {
        self.imputation.as_ref().map(Tower::params).unwrap_or_default()
    }

    /// CTR tower on already-embedded inputs. Returns `(logit, o_hat)`.
    pub fn ctr_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deep: NodeId,
        wide: Option<NodeId>,
    ) -> Result<(NodeId, NodeId), TapeError> {
        let rows = tape.value(deep).rows();
        let trunk = self.ctr.trunk.forward(tape, store, deep)?;
        let l = self.ctr.heads[0].forward(tape, store, trunk, wide, rows)?;
        let o = tape.sigmoid(l.total);
        Ok((l.total, o))
    }

    /// CVR tower on already-embedded inputs. Returns the factual and
    /// counterfactual head logits and probabilities.
    #[allow(clippy::type_complexity)]
    fn cvr_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deep: NodeId,
        wide: Option<NodeId>,
    ) -> Result<([NodeId; 3], [NodeId; 3], NodeId, NodeId), TapeError> {
        let rows = tape.value(deep).rows();
        // One trunk evaluation feeds both heads.
        let trunk = self.cvr.trunk.forward(tape, store, deep)?;
        let f = self.cvr.heads[0].forward(tape, store, trunk, wide, rows)?;
        let r_hat = tape.sigmoid(f.total);
        if let Some(head_cf) = self.cvr.heads.get(1) {
            let cf = head_cf.forward(tape, store, trunk, wide, rows)?;
            let r_cf = tape.sigmoid(cf.total);
            Ok(([f.total, f.wide, f.deep], [cf.total, cf.wide, cf.deep], r_hat, r_cf))
        } else {
            // Single-head variants and the hard constraint report the
            // mirrored prediction `1 - r_hat` and negated logits.
            let r_cf = tape.one_minus(r_hat);
            let l_cf = tape.scale(f.total, -1.0);
            let lw_cf = tape.scale(f.wide, -1.0);
            let ld_cf = tape.scale(f.deep, -1.0);
            Ok(([f.total, f.wide, f.deep], [l_cf, lw_cf, ld_cf], r_hat, r_cf))
        }
    }

    /// Full forward pass over a batch of samples.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[&Sample],
    ) -> Result<ForwardNodes, TapeError> {
        let (deep, wide) = self.embeddings.embed_batch(tape, &self.schema, store, samples)?;
        self.forward_embedded(tape, store, deep, wide)
    }

    /// Forward pass from embedded deep / wide inputs.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deep: NodeId,
        wide: Option<NodeId>,
    ) -> Result<ForwardNodes, TapeError> {
        let (o_logit, o_hat) = self.ctr_nodes(tape, store, deep, wide)?;
        let ([l_f, lw_f, ld_f], [l_cf, lw_cf, ld_cf], r_hat, r_hat_cf) =
            self.cvr_nodes(tape, store, deep, wide)?;
        let t_hat = tape.mul(o_hat, r_hat)?;
        let e_hat = match &self.imputation {
            Some(imp) => {
                let rows = tape.value(deep).rows();
                let trunk = imp.trunk.forward(tape, store, deep)?;
                let l = imp.heads[0].forward(tape, store, trunk, None, rows)?;
                Some(tape.softplus(l.total))
            }
            None => None,
        };
        Ok(ForwardNodes {
            o_logit,
            o_hat,
            r_hat,
            r_hat_cf,
            t_hat,
            l_f,
            l_cf,
            lw_f,
            ld_f,
            lw_cf,
            ld_cf,
            e_hat,
        })
    }

    fn check_widths(&self, deep: &[f64], wide: &[f64]) -> Result<(), ModelError> {
        let (ed, ew) = (self.schema.deep_width(), self.schema.wide_width());
        if deep.len() != ed || wide.len() != ew {
            return Err(ModelError::InputWidth {
                expected_deep: ed,
                expected_wide: ew,
                deep: deep.len(),
                wide: wide.len(),
            });
        }
        Ok(())
    }

    fn embedded_inputs(&self, tape: &mut Tape, deep: &[f64], wide: &[f64]) -> (NodeId, Option<NodeId>) {
        let d = tape.constant(Tensor::row(deep.to_vec()));
        let w = (!wide.is_empty()).then(|| tape.constant(Tensor::row(wide.to_vec())));
        (d, w)
    }

    /// Click probability for one embedded sample.
    pub fn ctr_forward(&self, store: &ParamStore, deep: &[f64], wide: &[f64]) -> Result<f64, ModelError> {
        self.check_widths(deep, wide)?;
        let mut tape = Tape::new();
        let (d, w) = self.embedded_inputs(&mut tape, deep, wide);
        let (_, o) = self.ctr_nodes(&mut tape, store, d, w)?;
        Ok(tape.value(o).data()[0])
    }

    /// `(r_hat, r_hat_cf)` for one embedded sample.
    pub fn twin_forward(
        &self,
        store: &ParamStore,
        deep: &[f64],
        wide: &[f64],
    ) -> Result<(f64, f64), ModelError> {
        self.check_widths(deep, wide)?;
        let mut tape = Tape::new();
        let (d, w) = self.embedded_inputs(&mut tape, deep, wide);
        let (_, _, r, rcf) = self.cvr_nodes(&mut tape, store, d, w)?;
        Ok((tape.value(r).data()[0], tape.value(rcf).data()[0]))
    }

    /// Forward pass without gradients, in batches of `batch_size`.
    pub fn predict(
        &self,
        store: &ParamStore,
        samples: &[Sample],
        batch_size: usize,
    ) -> Result<PredictionBatch, ModelError> {
        for s in samples {
            s.validate(&self.schema)?;
        }
        let mut out = PredictionBatch::default();
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let nodes = self.forward(&mut tape, store, &refs)?;
            out.extend(PredictionBatch::from_tape(&tape, &nodes));
        }
        Ok(out)
    }
}

/// `t_hat = o_hat * r_hat`.
#[inline]
pub fn ctcvr_compose(o_hat: f64, r_hat: f64) -> f64 {
    o_hat * r_hat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureField, FeatureKind, FeatureValue, Wideness};
    use alloc::string::ToString;

    fn schema(wide: bool) -> FeatureSchema {
        let mut fields = vec![
            FeatureField {
                name: "user".to_string(),
                kind: FeatureKind::SparseId { vocab_size: 5 },
                wideness: Wideness::Deep,
            },
            FeatureField {
                name: "item".to_string(),
                kind: FeatureKind::SparseId { vocab_size: 7 },
                wideness: Wideness::Deep,
            },
        ];
        if wide {
            fields.push(FeatureField {
                name: "ctx".to_string(),
                kind: FeatureKind::DenseGroup { group_width: 2 },
                wideness: Wideness::Wide,
            });
        }
        FeatureSchema::new(fields, 3).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture {
            embedding_dim: None,
            hidden_dims: vec![6, 4],
            shared_depth: None,
        }
    }

    fn samples(wide: bool) -> Vec<Sample> {
        (0..6)
            .map(|i| {
                let mut features = vec![FeatureValue::Id(i % 5), FeatureValue::Id((i * 3) % 7)];
                if wide {
                    features.push(FeatureValue::Dense(vec![i as f64 * 0.1, -0.2]));
                }
                Sample {
                    features,
                    click: i % 2 == 0,
                    conversion: i % 4 == 0,
                    p_true: None,
                    r_full: None,
                }
            })
            .collect()
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("mmoe".parse::<Variant>().is_err());
    }

    #[test]
    fn zero_params_give_half() {
        let s = schema(true);
        let (m, mut store) = Model::init(&s, &small_arch(), Variant::Dcmt, 1).unwrap();
        zero_all(&mut store);
        let deep = vec![0.3; s.deep_width()];
        let wide = vec![0.1; s.wide_width()];
        assert_eq!(m.ctr_forward(&store, &deep, &wide).unwrap(), 0.5);
        assert_eq!(m.twin_forward(&store, &deep, &wide).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn width_mismatch_rejected() {
        let s = schema(false);
        let (m, store) = Model::init(&s, &small_arch(), Variant::Dcmt, 1).unwrap();
        assert!(matches!(
            m.ctr_forward(&store, &[0.0; 2], &[]),
            Err(ModelError::InputWidth { .. })
        ));
    }

    #[test]
    fn hard_variant_sums_to_one() {
        let s = schema(true);
        let (m, store) = Model::init(&s, &small_arch(), Variant::DcmtHard, 4).unwrap();
        let p = m.predict(&store, &samples(true), 4).unwrap();
        for (r, c) in p.r_hat.iter().zip(&p.r_hat_cf) {
            assert_eq!(r + c, 1.0);
        }
    }

    #[test]
    fn ctcvr_is_exact_product() {
        let s = schema(true);
        let (m, store) = Model::init(&s, &small_arch(), Variant::Esmm, 4).unwrap();
        let p = m.predict(&store, &samples(true), 4).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.t_hat[i], p.o_hat[i] * p.r_hat[i]);
            assert!(p.t_hat[i] < p.o_hat[i] && p.t_hat[i] < p.r_hat[i]);
        }
        assert_eq!(ctcvr_compose(0.5, 0.4), 0.2);
        assert_eq!(ctcvr_compose(0.37, 1.0), 0.37);
    }

    #[test]
    fn logits_decompose() {
        let s = schema(true);
        let (m, store) = Model::init(&s, &small_arch(), Variant::Dcmt, 9).unwrap();
        let p = m.predict(&store, &samples(true), 3).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.r_hat[i], math::sigmoid(p.lw_f[i] + p.ld_f[i]));
            assert_eq!(p.r_hat_cf[i], math::sigmoid(p.lw_cf[i] + p.ld_cf[i]));
        }
        assert!(p.e_hat.is_none());
    }

    #[test]
    fn single_head_reports_mirror() {
        let s = schema(false);
        let (m, store) = Model::init(&s, &small_arch(), Variant::Ipw, 2).unwrap();
        let p = m.predict(&store, &samples(false), 8).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.r_hat_cf[i], 1.0 - p.r_hat[i]);
            assert_eq!(p.lw_f[i], 0.0);
        }
    }

    #[test]
    fn dr_populates_imputation() {
        let s = schema(false);
        let (m, store) = Model::init(&s, &small_arch(), Variant::Dr, 2).unwrap();
        let p = m.predict(&store, &samples(false), 8).unwrap();
        let e = p.e_hat.unwrap();
        assert_eq!(e.len(), 6);
        assert!(e.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn invalid_architecture() {
        let s = schema(false);
        let mut a = small_arch();
        a.shared_depth = Some(3);
        assert!(matches!(
            Model::init(&s, &a, Variant::Dcmt, 0),
            Err(ModelError::SharedDepth { shared: 3, total: 2 })
        ));
        a.shared_depth = None;
        a.hidden_dims = vec![4, 0];
        assert_eq!(Model::init(&s, &a, Variant::Dcmt, 0).unwrap_err(), ModelError::ZeroHidden);
    }

    #[test]
    fn init_is_deterministic() {
        let s = schema(true);
        let a = Model::init(&s, &small_arch(), Variant::Dcmt, 11).unwrap();
        let b = Model::init(&s, &small_arch(), Variant::Dcmt, 11).unwrap();
        assert_eq!(a, b);
    }
}
