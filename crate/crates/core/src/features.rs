//! Feature schema, samples, the click / non-click partition of the exposure
//! space, and the embedding layer shared by every tower.
//!
//! Three field kinds are supported:
//!
//! * `sparse_id`: one categorical id, embedded by table lookup;
//! * `dense_group`: a fixed-width numeric vector, embedded by an affine map;
//! * `weighted_list`: a bag of `(id, weight)` pairs, embedded as the mean of
//!   the weight-scaled table rows (divisor = list length).
//!
//! Each field is routed to the deep input, the wide input, or both.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Wideness {
    Deep,
    Wide,
    Both,
}

impl Wideness {
    pub fn is_deep(self) -> bool {
        matches!(self, Wideness::Deep | Wideness::Both)
    }

    pub fn is_wide(self) -> bool {
        matches!(self, Wideness::Wide | Wideness::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Wideness::Deep => "deep",
            Wideness::Wide => "wide",
            Wideness::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    SparseId { vocab_size: usize },
    DenseGroup { group_width: usize },
    WeightedList { vocab_size: usize },
}

impl FeatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::SparseId { .. } => "sparse_id",
            FeatureKind::DenseGroup { .. } => "dense_group",
            FeatureKind::WeightedList { .. } => "weighted_list",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureField {
    pub name: String,
    pub kind: FeatureKind,
    pub wideness: Wideness,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field `{0}`: vocab_size must be at least 1")]
    ZeroVocab(String),
    #[error("field `{0}`: group_width must be at least 1")]
    ZeroGroupWidth(String),
    #[error("embedding_dim must be at least 1")]
    ZeroEmbeddingDim,
    #[error("field name must not be empty")]
    EmptyName,
}

/// Ordered field list plus the per-field embedding width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    fields: Vec<FeatureField>,
    embedding_dim: usize,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FeatureField>, embedding_dim: usize) -> Result<Self, SchemaError> {
        if embedding_dim == 0 {
            return Err(SchemaError::ZeroEmbeddingDim);
        }
        for (i, f) in fields.iter().enumerate() {
            if f.name.is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(SchemaError::DuplicateField(f.name.clone()));
            }
            match f.kind {
                FeatureKind::SparseId { vocab_size: 0 } | FeatureKind::WeightedList { vocab_size: 0 } => {
                    return Err(SchemaError::ZeroVocab(f.name.clone()))
                }
                FeatureKind::DenseGroup { group_width: 0 } => {
                    return Err(SchemaError::ZeroGroupWidth(f.name.clone()))
                }
                _ => {}
            }
        }
        Ok(Self {
            fields,
            embedding_dim,
        })
    }

    pub fn fields(&self) -> &[FeatureField] {
        &self.fields
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Same fields, different embedding width.
    pub fn with_embedding_dim(&self, dim: usize) -> Result<Self, SchemaError> {
        Self::new(self.fields.clone(), dim)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn deep_width(&self) -> usize {
        self.embedding_dim * self.fields.iter().filter(|f| f.wideness.is_deep()).count()
    }

    pub fn wide_width(&self) -> usize {
        self.embedding_dim * self.fields.iter().filter(|f| f.wideness.is_wide()).count()
    }
}

/// Value of one field in one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureValue {
    Id(usize),
    Dense(Vec<f64>),
    Weighted(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("conversion without click")]
    ConversionWithoutClick,
    #[error("expected {expected} feature values, got {got}")]
    FieldCount { expected: usize, got: usize },
    #[error("field `{field}`: value does not match kind {kind}")]
    KindMismatch { field: String, kind: &'static str },
    #[error("field `{field}`: id {id} out of range for vocab_size {vocab_size}")]
    IdOutOfRange {
        field: String,
        id: usize,
        vocab_size: usize,
    },
    #[error("field `{field}`: expected {expected} dense values, got {got}")]
    DenseWidth {
        field: String,
        expected: usize,
        got: usize,
    },
    #[error("field `{field}`: empty weighted list")]
    EmptyWeightedList { field: String },
    #[error("field `{field}`: non-finite value")]
    NonFinite { field: String },
    #[error("p_true {0} outside (0, 1)")]
    PropensityOutOfRange(f64),
}

/// One exposed user-item pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<FeatureValue>,
    pub click: bool,
    pub conversion: bool,
    /// Ground-truth click propensity (synthetic data only).
    pub p_true: Option<f64>,
    /// Conversion label that would have been observed had the pair been
    /// clicked (synthetic data only).
    pub r_full: Option<bool>,
}

impl Sample {
    /// Checks the sample against the schema and the observation invariant
    /// that a conversion is only visible after a click.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), SampleError> {
        if self.conversion && !self.click {
            return Err(SampleError::ConversionWithoutClick);
        }
        if let Some(p) = self.p_true {
            if !(p > 0.0 && p < 1.0) {
                return Err(SampleError::PropensityOutOfRange(p));
            }
        }
        if self.features.len() != schema.fields.len() {
            return Err(SampleError::FieldCount {
                expected: schema.fields.len(),
                got: self.features.len(),
            });
        }
        for (field, value) in schema.fields.iter().zip(&self.features) {
            let name = || field.name.clone();
            match (field.kind, value) {
                (FeatureKind::SparseId { vocab_size }, FeatureValue::Id(id)) => {
                    if *id >= vocab_size {
                        return Err(SampleError::IdOutOfRange {
                            field: name(),
                            id: *id,
                            vocab_size,
                        });
                    }
                }
                (FeatureKind::DenseGroup { group_width }, FeatureValue::Dense(v)) => {
                    if v.len() != group_width {
                        return Err(SampleError::DenseWidth {
                            field: name(),
                            expected: group_width,
                            got: v.len(),
                        });
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(SampleError::NonFinite { field: name() });
                    }
                }
                (FeatureKind::WeightedList { vocab_size }, FeatureValue::Weighted(list)) => {
                    if list.is_empty() {
                        return Err(SampleError::EmptyWeightedList { field: name() });
                    }
                    for &(id, w) in list {
                        if id >= vocab_size {
                            return Err(SampleError::IdOutOfRange {
                                field: name(),
                                id,
                                vocab_size,
                            });
                        }
                        if !w.is_finite() {
                            return Err(SampleError::NonFinite { field: name() });
                        }
                    }
                }
                (kind, _) => {
                    return Err(SampleError::KindMismatch {
                        field: name(),
                        kind: kind.name(),
                    })
                }
            }
        }
        Ok(())
    }
}

/// Index sets of the exposure space `D`, the click space `O` and the
/// non-click space `N`. The counterfactual space is `N` with flipped labels
/// and is never materialized.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpacePartition {
    pub all: Vec<usize>,
    pub clicked: Vec<usize>,
    pub nonclicked: Vec<usize>,
}

impl SpacePartition {
    pub fn from_clicks<I: IntoIterator<Item = bool>>(clicks: I) -> Self {
        let mut p = SpacePartition::default();
        for (i, c) in clicks.into_iter().enumerate() {
            p.all.push(i);
            if c {
                p.clicked.push(i);
            } else {
                p.nonclicked.push(i);
            }
        }
        p
    }

    pub fn from_samples(samples: &[Sample]) -> Self {
        Self::from_clicks(samples.iter().map(|s| s.click))
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    /// `true` when clicked and non-clicked are disjoint and cover `all`.
    pub fn is_exact(&self) -> bool {
        let n = self.all.len();
        let mut seen = vec![0u8; n];
        for &i in self.clicked.iter().chain(&self.nonclicked) {
            if i >= n {
                return false;
            }
            seen[i] += 1;
        }
        seen.iter().all(|&c| c == 1) && self.all.iter().enumerate().all(|(k, &i)| k == i)
    }
}

/// Parameters owned by one field of the embedding layer.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldEmbedding {
    Table(ParamId),
    Affine { weight: ParamId, bias: ParamId },
}

/// Embedding parameters for every field of a schema.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLayer {
    fields: Vec<FieldEmbedding>,
}

impl EmbeddingLayer {
    /// Registers one table (or affine map) per field. Entries are drawn
    /// uniformly from `[-1/sqrt(dim), 1/sqrt(dim)]`; affine biases start at
    /// zero.
    pub fn init<R: Rng>(schema: &FeatureSchema, store: &mut ParamStore, rng: &mut R) -> Self {
        let dim = schema.embedding_dim;
        let bound = 1.0 / math::sqrt(dim as f64);
        let mut uniform = |rows: usize| {
            let data = (0..rows * dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::from_vec(rows, dim, data)
        };
        let fields = schema
            .fields
            .iter()
            .map(|f| match f.kind {
                FeatureKind::SparseId { vocab_size } | FeatureKind::WeightedList { vocab_size } => {
                    FieldEmbedding::Table(store.add(alloc::format!("emb.{}", f.name), uniform(vocab_size)))
                }
                FeatureKind::DenseGroup { group_width } => {
                    let weight = store.add(alloc::format!("emb.{}.weight", f.name), uniform(group_width));
                    let bias = store.add(alloc::format!("emb.{}.bias", f.name), Tensor::zeros(1, dim));
                    FieldEmbedding::Affine { weight, bias }
                }
            })
            .collect();
        Self { fields }
    }

    pub fn from_parts(fields: Vec<FieldEmbedding>) -> Self {
        Self { fields }
    }

    pub fn fields(&self) -> &[FieldEmbedding] {
        &self.fields
    }

    /// Embeds one sample without recording gradients.
    ///
    /// Returns the concatenated deep and wide input vectors, in schema order.
    pub fn embed_sample(
        &self,
        schema: &FeatureSchema,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<(Vec<f64>, Vec<f64>), SampleError> {
        sample.validate(schema)?;
        let dim = schema.embedding_dim;
        let mut deep = Vec::with_capacity(schema.deep_width());
        let mut wide = Vec::with_capacity(schema.wide_width());
        for ((field, value), emb) in schema.fields.iter().zip(&sample.features).zip(&self.fields) {
            let mut out = vec![0.0; dim];
            match (value, emb) {
                (FeatureValue::Id(id), FieldEmbedding::Table(t)) => {
                    out.copy_from_slice(store.get(*t).row_slice(*id));
                }
                (FeatureValue::Weighted(list), FieldEmbedding::Table(t)) => {
                    let table = store.get(*t);
                    for &(id, w) in list {
                        for (o, e) in out.iter_mut().zip(table.row_slice(id)) {
                            *o += w * e;
                        }
                    }
                    let k = list.len() as f64;
                    for o in &mut out {
                        *o /= k;
                    }
                }
                (FeatureValue::Dense(x), FieldEmbedding::Affine { weight, bias }) => {
                    let w = store.get(*weight);
                    for (p, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, wv) in out.iter_mut().zip(w.row_slice(p)) {
                            *o += xv * wv;
                        }
                    }
                    for (o, b) in out.iter_mut().zip(store.get(*bias).data()) {
                        *o += b;
                    }
                }
                _ => {
                    return Err(SampleError::KindMismatch {
                        field: field.name.clone(),
                        kind: field.kind.name(),
                    })
                }
            }
            if field.wideness.is_deep() {
                deep.extend_from_slice(&out);
            }
            if field.wideness.is_wide() {
                wide.extend_from_slice(&out);
            }
        }
        Ok((deep, wide))
    }

    /// Records the embedding of a batch on the tape. The wide node is `None`
    /// when no field is routed to the wide part.
    pub fn embed_batch(
        &self,
        tape: &mut Tape,
        schema: &FeatureSchema,
        store: &ParamStore,
        samples: &[&Sample],
    ) -> Result<(NodeId, Option<NodeId>), TapeError> {
        let mut deep_parts = Vec::new();
        let mut wide_parts = Vec::new();
        for (fi, (field, emb)) in schema.fields.iter().zip(&self.fields).enumerate() {
            let node = match (field.kind, emb) {
                (FeatureKind::SparseId { .. }, FieldEmbedding::Table(t)) => {
                    let ids = samples
                        .iter()
                        .map(|s| match &s.features[fi] {
                            FeatureValue::Id(id) => *id,
                            _ => usize::MAX,
                        })
                        .collect();
                    let table = tape.param(store, *t);
                    tape.gather(table, ids)?
                }
                (FeatureKind::WeightedList { .. }, FieldEmbedding::Table(t)) => {
                    let bags = samples
                        .iter()
                        .map(|s| match &s.features[fi] {
                            FeatureValue::Weighted(list) => list.clone(),
                            _ => Vec::new(),
                        })
                        .collect();
                    let table = tape.param(store, *t);
                    tape.bag(table, bags)?
                }
                (FeatureKind::DenseGroup { group_width }, FieldEmbedding::Affine { weight, bias }) => {
                    let mut x = Tensor::zeros(samples.len(), group_width);
                    for (r, s) in samples.iter().enumerate() {
                        if let FeatureValue::Dense(v) = &s.features[fi] {
                            if v.len() == group_width {
                                x.row_slice_mut(r).copy_from_slice(v);
                            }
                        }
                    }
                    let xn = tape.constant(x);
                    let w = tape.param(store, *weight);
                    let b = tape.param(store, *bias);
                    let h = tape.matmul(xn, w)?;
                    tape.add_bias(h, b)?
                }
                (kind, _) => {
                    return Err(TapeError::ShapeMismatch {
                        op: kind.name(),
                        left: [0, 0],
                        right: [0, 0],
                    })
                }
            };
            if field.wideness.is_deep() {
                deep_parts.push(node);
            }
            if field.wideness.is_wide() {
                wide_parts.push(node);
            }
        }
        let deep = if deep_parts.is_empty() {
            tape.constant(Tensor::zeros(samples.len(), 0))
        } else {
            tape.concat(&deep_parts)?
        };
        let wide = if wide_parts.is_empty() {
            None
        } else {
            Some(tape.concat(&wide_parts)?)
        };
        Ok((deep, wide))
    }
}
