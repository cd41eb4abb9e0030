//! Schema JSON and dataset CSV.
//!
//! Schema:
//!
//! ```json
//! {"embedding_dim": 8,
//!  "fields": [{"name": "user_id", "kind": "sparse_id", "vocab_size": 100, "wideness": "both"},
//!             {"name": "price", "kind": "dense_group", "group_width": 3, "wideness": "wide"},
//!             {"name": "shops", "kind": "weighted_list", "vocab_size": 50, "wideness": "deep"}]}
//! ```
//!
//! Dataset: header `click,conversion[,p_true,r_full],<field names...>`.
//! Sparse cells hold an integer id, dense cells `v1|v2|...`, weighted cells
//! `id:weight;id:weight;...`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dcmt_core::features::SampleError;
use dcmt_core::{FeatureField, FeatureKind, FeatureSchema, FeatureValue, Sample, SchemaError, SpacePartition, Wideness};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema: {0}")]
    SchemaSyntax(#[from] serde_json::Error),
    #[error("schema field `{field}`: {message}")]
    SchemaField { field: String, message: String },
    #[error("schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("data header: {0}")]
    Header(String),
    #[error("data line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("data line {line}: {source}")]
    Sample { line: u64, source: SampleError },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_width: Option<usize>,
    wideness: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    embedding_dim: usize,
    fields: Vec<RawField>,
}

fn field_from_raw(raw: RawField) -> Result<FeatureField, FormatError> {
    let err = |message: String| FormatError::SchemaField {
        field: raw.name.clone(),
        message,
    };
    if raw.name.is_empty() || raw.name.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(err("names must be non-empty without whitespace or commas".into()));
    }
    let need = |v: Option<usize>, key: &str| v.ok_or_else(|| err(format!("missing `{key}`")));
    let kind = match raw.kind.as_str() {
        "sparse_id" => FeatureKind::SparseId {
            vocab_size: need(raw.vocab_size, "vocab_size")?,
        },
        "weighted_list" => FeatureKind::WeightedList {
            vocab_size: need(raw.vocab_size, "vocab_size")?,
        },
        "dense_group" => FeatureKind::DenseGroup {
            group_width: need(raw.group_width, "group_width")?,
        },
        other => {
            return Err(err(format!(
                "unknown kind `{other}` (expected sparse_id, dense_group or weighted_list)"
            )))
        }
    };
    let wideness = match raw.wideness.as_str() {
        "deep" => Wideness::Deep,
        "wide" => Wideness::Wide,
        "both" => Wideness::Both,
        other => return Err(err(format!("unknown wideness `{other}` (expected deep, wide or both)"))),
    };
    Ok(FeatureField {
        name: raw.name,
        kind,
        wideness,
    })
}

/// Parses and validates a schema document.
pub fn parse_schema(text: &str) -> Result<FeatureSchema, FormatError> {
    let raw: RawSchema = serde_json::from_str(text)?;
    let fields = raw
        .fields
        .into_iter()
        .map(field_from_raw)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureSchema::new(fields, raw.embedding_dim)?)
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_schema(&text)
}

fn raw_schema(schema: &FeatureSchema) -> RawSchema {
    RawSchema {
        embedding_dim: schema.embedding_dim(),
        fields: schema
            .fields()
            .iter()
            .map(|f| {
                let (vocab_size, group_width) = match f.kind {
                    FeatureKind::SparseId { vocab_size } | FeatureKind::WeightedList { vocab_size } => {
                        (Some(vocab_size), None)
                    }
                    FeatureKind::DenseGroup { group_width } => (None, Some(group_width)),
                };
                RawField {
                    name: f.name.clone(),
                    kind: f.kind.name().to_string(),
                    vocab_size,
                    group_width,
                    wideness: f.wideness.as_str().to_string(),
                }
            })
            .collect(),
    }
}

/// Canonical pretty-printed schema document.
pub fn schema_to_json(schema: &FeatureSchema) -> String {
    let mut s = serde_json::to_string_pretty(&raw_schema(schema)).expect("schema serializes");
    s.push('\n');
    s
}

/// Single-line schema document.
pub fn schema_to_compact_json(schema: &FeatureSchema) -> String {
    serde_json::to_string(&raw_schema(schema)).expect("schema serializes")
}

/// Hex SHA-256 of `text`.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn parse_bool(cell: &str, line: u64, col: &str) -> Result<bool, FormatError> {
    match cell.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(FormatError::Row {
            line,
            message: format!("column `{col}`: expected 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_f64(cell: &str, line: u64, col: &str) -> Result<f64, FormatError> {
    cell.trim().parse::<f64>().map_err(|_| FormatError::Row {
        line,
        message: format!("column `{col}`: `{cell}` is not a number"),
    })
}

fn parse_value(field: &FeatureField, cell: &str, line: u64) -> Result<FeatureValue, FormatError> {
    let bad = |what: &str| FormatError::Row {
        line,
        message: format!("field `{}`: {what}", field.name),
    };
    let cell = cell.trim();
    match field.kind {
        FeatureKind::SparseId { .. } => cell
            .parse::<usize>()
            .map(FeatureValue::Id)
            .map_err(|_| bad(&format!("`{cell}` is not an id"))),
        FeatureKind::DenseGroup { .. } => cell
            .split('|')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(FeatureValue::Dense)
            .map_err(|_| bad(&format!("`{cell}` is not a `|`-separated list of numbers"))),
        FeatureKind::WeightedList { .. } => {
            if cell.is_empty() {
                return Ok(FeatureValue::Weighted(Vec::new()));
            }
            cell.split(';')
                .map(|pair| {
                    let (id, w) = pair.split_once(':')?;
                    Some((id.trim().parse::<usize>().ok()?, w.trim().parse::<f64>().ok()?))
                })
                .collect::<Option<Vec<_>>>()
                .map(FeatureValue::Weighted)
                .ok_or_else(|| bad(&format!("`{cell}` is not a list of id:weight pairs")))
        }
    }
}

fn format_value(value: &FeatureValue) -> String {
    match value {
        FeatureValue::Id(id) => id.to_string(),
        FeatureValue::Dense(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("|"),
        FeatureValue::Weighted(list) => list
            .iter()
            .map(|(id, w)| format!("{id}:{w}"))
            .collect::<Vec<_>>()
            .join(";"),
    }
}

/// Reads a dataset from CSV text. Every row is validated against `schema`.
pub fn read_dataset<R: Read>(reader: R, schema: &FeatureSchema) -> Result<(Vec<Sample>, SpacePartition), FormatError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 || header[0] != "click" || header[1] != "conversion" {
        return Err(FormatError::Header("must start with `click,conversion`".into()));
    }
    let has_p = header.get(2).map(String::as_str) == Some("p_true");
    let has_r = header.get(2 + has_p as usize).map(String::as_str) == Some("r_full");
    let first = 2 + has_p as usize + has_r as usize;
    let names: Vec<&str> = header[first..].iter().map(String::as_str).collect();
    let expected: Vec<&str> = schema.fields().iter().map(|f| f.name.as_str()).collect();
    if names != expected {
        return Err(FormatError::Header(format!(
            "feature columns {names:?} do not match schema fields {expected:?}"
        )));
    }
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let click = parse_bool(&record[0], line, "click")?;
        let conversion = parse_bool(&record[1], line, "conversion")?;
        let p_true = if has_p {
            Some(parse_f64(&record[2], line, "p_true")?)
        } else {
            None
        };
        let r_full = if has_r {
            Some(parse_bool(&record[2 + has_p as usize], line, "r_full")?)
        } else {
            None
        };
        let features = schema
            .fields()
            .iter()
            .enumerate()
            .map(|(k, f)| parse_value(f, &record[first + k], line))
            .collect::<Result<Vec<_>, _>>()?;
        let sample = Sample {
            features,
            click,
            conversion,
            p_true,
            r_full,
        };
        sample
            .validate(schema)
            .map_err(|source| FormatError::Sample { line, source })?;
        samples.push(sample);
    }
    let part = SpacePartition::from_samples(&samples);
    Ok((samples, part))
}

pub fn load_dataset(path: &Path, schema: &FeatureSchema) -> Result<(Vec<Sample>, SpacePartition), FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_dataset(std::io::BufReader::new(file), schema)
}

/// Writes samples as CSV. The ground-truth columns are written when every
/// sample carries them.
pub fn write_dataset<W: Write>(writer: W, schema: &FeatureSchema, samples: &[Sample]) -> Result<(), FormatError> {
    let has_p = !samples.is_empty() && samples.iter().all(|s| s.p_true.is_some());
    let has_r = !samples.is_empty() && samples.iter().all(|s| s.r_full.is_some());
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    let mut header = vec!["click".to_string(), "conversion".to_string()];
    if has_p {
        header.push("p_true".into());
    }
    if has_r {
        header.push("r_full".into());
    }
    header.extend(schema.fields().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    let bit = |b: bool| if b { "1".to_string() } else { "0".to_string() };
    for s in samples {
        let mut row = vec![bit(s.click), bit(s.conversion)];
        if has_p {
            row.push(s.p_true.unwrap_or(f64::NAN).to_string());
        }
        if has_r {
            row.push(bit(s.r_full.unwrap_or(false)));
        }
        row.extend(s.features.iter().map(format_value));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| FormatError::Io {
        path: "<dataset>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = r#"{"embedding_dim": 4, "fields": [
        {"name": "u", "kind": "sparse_id", "vocab_size": 5, "wideness": "deep"},
        {"name": "d", "kind": "dense_group", "group_width": 2, "wideness": "wide"},
        {"name": "w", "kind": "weighted_list", "vocab_size": 10, "wideness": "both"}]}"#;

    #[test]
    fn schema_round_trip() {
        let s = parse_schema(SCHEMA).unwrap();
        assert_eq!(s.deep_width(), 8);
        assert_eq!(s.wide_width(), 8);
        assert_eq!(parse_schema(&schema_to_json(&s)).unwrap(), s);
        assert_eq!(parse_schema(&schema_to_compact_json(&s)).unwrap(), s);
        assert_eq!(sha256_hex("").len(), 64);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = SCHEMA.replace("\"sparse_id\"", "\"spares_id\"");
        let e = parse_schema(&bad).unwrap_err().to_string();
        assert!(e.contains("`u`") && e.contains("spares_id"), "{e}");
        let dup = SCHEMA.replace("\"name\": \"d\"", "\"name\": \"u\"");
        assert!(matches!(parse_schema(&dup), Err(FormatError::Schema(SchemaError::DuplicateField(_)))));
        let spaced = SCHEMA.replace("\"name\": \"d\"", "\"name\": \"d d\"");
        assert!(parse_schema(&spaced).unwrap_err().to_string().contains("`d d`"));
        let zero = SCHEMA.replace("\"vocab_size\": 5", "\"vocab_size\": 0");
        assert!(matches!(parse_schema(&zero), Err(FormatError::Schema(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let s = parse_schema(SCHEMA).unwrap();
        let csv = "click,conversion,u,d,w\n1,1,3,0.5|-1,7:0.5;9:1.5\n1,0,0,0|0,1:1\n0,0,4,1|2,2:1\n";
        let (samples, part) = read_dataset(csv.as_bytes(), &s).unwrap();
        assert_eq!((part.clicked.len(), part.nonclicked.len()), (2, 1));
        let mut out = Vec::new();
        write_dataset(&mut out, &s, &samples).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
    }

    #[test]
    fn dataset_errors() {
        let s = parse_schema(SCHEMA).unwrap();
        let e = read_dataset("click,conversion,u,d,w\n0,1,3,0|0,1:1\n".as_bytes(), &s).unwrap_err();
        assert!(e.to_string().contains("conversion without click"), "{e}");
        let e = read_dataset("click,conversion,u,d,w\n0,0,5,0|0,1:1\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(e, FormatError::Sample { line: 2, .. }), "{e}");
        let (samples, part) = read_dataset("click,conversion,u,d,w\n".as_bytes(), &s).unwrap();
        assert!(samples.is_empty() && part.is_empty());
    }
}
