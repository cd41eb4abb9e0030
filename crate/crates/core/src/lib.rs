//! Entire-space causal multi-task estimation of post-click conversion rate.
//!
//! The crate is `no_std` (with `alloc`) and carries all of the numerical
//! machinery: a small reverse-mode tape, the Adam update, the feature
//! embedding layer, the CTR / twin CVR towers and their baseline variants,
//! every debiasing loss estimator, a synthetic missing-not-at-random data
//! oracle, the training loop and the offline evaluation metrics.
//!
//! File formats, checkpoints and the command-line front end live in the
//! companion `dcmt` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adam;
pub mod estimators;
pub mod eval;
pub mod features;
pub mod gradcheck;
mod math;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod theorems;
pub mod train;

pub use adam::AdamState;
pub use estimators::{EstimatorError, LossReport};
pub use eval::{auc, EvalError, EvalReport, EvalSpace, Histogram};
pub use features::{
    FeatureField, FeatureKind, FeatureSchema, FeatureValue, Sample, SchemaError, SpacePartition,
    Wideness,
};
pub use model::{Architecture, Model, PredictionBatch, Variant};
pub use params::{ParamId, ParamStore};
pub use synth::{SynthConfig, SyntheticData};
pub use tape::{Gradients, NodeId, Tape, TapeError};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainError, TrainOutcome};

pub use math::sigmoid;
