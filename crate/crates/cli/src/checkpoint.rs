//! Text checkpoints.
//!
//! ```text
//! dcmt-checkpoint v1
//! schema {"embedding_dim":8,"fields":[...]}
//! schema_sha256 <hex of the schema line's JSON>
//! variant dcmt
//! architecture {"embedding_dim":null,"hidden_dims":[16,8],"shared_depth":null}
//! settings {...training configuration...}
//! params <count>
//! param <name> <rows> <cols> <16 hex digits per value, IEEE-754 bits>...
//! ```
//!
//! Values are stored as raw bit patterns, so a load reproduces every
//! parameter exactly.

use std::fmt::Write as _;

use dcmt_core::model::ModelError;
use dcmt_core::{Architecture, FeatureSchema, Model, ParamStore, Tensor, TrainConfig, Variant};
use thiserror::Error;

use crate::formats::{self, FormatError};

pub const MAGIC: &str = "dcmt-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("checkpoint schema hash mismatch: stored {stored}, computed {computed}")]
    SchemaHash { stored: String, computed: String },
    #[error("checkpoint schema: {0}")]
    Schema(#[from] FormatError),
    #[error("checkpoint model: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint parameter `{name}`: {message}")]
    Param { name: String, message: String },
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub store: ParamStore,
    pub settings: TrainConfig,
}

fn encode_values(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {:016x}", v.to_bits());
    }
}

/// Serializes a trained model.
pub fn write(model: &Model, store: &ParamStore, settings: &TrainConfig) -> String {
    let schema = formats::schema_to_compact_json(model.schema());
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "schema {schema}");
    let _ = writeln!(out, "schema_sha256 {}", formats::sha256_hex(&schema));
    let _ = writeln!(out, "variant {}", model.variant());
    let arch = serde_json::to_string(model.architecture()).expect("architecture serializes");
    let _ = writeln!(out, "architecture {arch}");
    let cfg = serde_json::to_string(settings).expect("settings serialize");
    let _ = writeln!(out, "settings {cfg}");
    let _ = writeln!(out, "params {}", store.len());
    for (_, name, t) in store.iter() {
        let _ = write!(out, "param {name} {} {}", t.rows(), t.cols());
        encode_values(&mut out, t.data());
        out.push('\n');
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Syntax {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str, CheckpointError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} ...`")))
    }
}

/// Parses a checkpoint, rebuilding the model from its recorded shape and
/// overwriting every parameter by name.
pub fn read(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next_line()? != MAGIC {
        return Err(lines.err(format!("expected `{MAGIC}`")));
    }
    let schema_json = lines.keyed("schema")?;
    let stored = lines.keyed("schema_sha256")?.trim().to_string();
    let computed = formats::sha256_hex(schema_json);
    if stored != computed {
        return Err(CheckpointError::SchemaHash { stored, computed });
    }
    let schema: FeatureSchema = formats::parse_schema(schema_json)?;
    let variant: Variant = {
        let v = lines.keyed("variant")?;
        v.trim().parse().map_err(|_| lines.err(format!("unknown variant `{v}`")))?
    };
    let arch: Architecture = {
        let a = lines.keyed("architecture")?;
        serde_json::from_str(a).map_err(|e| lines.err(format!("architecture: {e}")))?
    };
    let settings: TrainConfig = {
        let s = lines.keyed("settings")?;
        serde_json::from_str(s).map_err(|e| lines.err(format!("settings: {e}")))?
    };
    let count: usize = {
        let c = lines.keyed("params")?;
        c.trim().parse().map_err(|_| lines.err("bad parameter count"))?
    };
    let (model, mut store) = Model::init(&schema, &arch, variant, settings.seed)?;
    if count != store.len() {
        return Err(lines.err(format!(
            "{count} parameters stored, the model has {}",
            store.len()
        )));
    }
    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let rest = lines.keyed("param")?;
        let mut parts = rest.split(' ');
        let name = parts.next().unwrap_or_default();
        let mut dim = |what: &str| -> Result<usize, CheckpointError> {
            parts
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| lines.err(format!("parameter `{name}`: bad {what}")))
        };
        let (rows, cols) = (dim("row count")?, dim("column count")?);
        let values = parts
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| lines.err(format!("parameter `{name}`: bad hex value")))?;
        let perr = |message: String| CheckpointError::Param {
            name: name.to_string(),
            message,
        };
        let id = store
            .find(name)
            .ok_or_else(|| perr("not part of the model".into()))?;
        if seen[id.0] {
            return Err(perr("stored twice".into()));
        }
        seen[id.0] = true;
        let slot = store.get_mut(id);
        if slot.shape() != [rows, cols] {
            return Err(perr(format!(
                "shape {rows}x{cols}, the model expects {}x{}",
                slot.rows(),
                slot.cols()
            )));
        }
        if values.len() != rows * cols {
            return Err(perr(format!("{} values for shape {rows}x{cols}", values.len())));
        }
        *slot = Tensor::from_vec(rows, cols, values);
    }
    Ok(Checkpoint {
        model,
        store,
        settings,
    })
}
