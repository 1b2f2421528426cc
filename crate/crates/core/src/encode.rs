//! Design-matrix encoding.
//!
//! Numeric features are z-scored with constants fitted on the training rows,
//! binary features become 0/1, and a categorical feature with k levels
//! becomes k-1 indicators against its most frequent training level. Columns
//! that are constant on the training rows are dropped and reported.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ApplicantRecord, Dataset, Value};
use crate::schema::FeatureKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("no features selected")]
    EmptySelection,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("training index list is empty")]
    EmptyTrainIndices,
    #[error("training index {index} is out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("record does not match the encoding: {0}")]
    EncodingMismatch(String),
}

impl EncodeError {
    pub fn code(&self) -> &'static str {
        match self {
            EncodeError::EmptySelection => "EmptySelection",
            EncodeError::UnknownFeature(_) => "UnknownFeature",
            EncodeError::EmptyTrainIndices => "EmptyTrainIndices",
            EncodeError::IndexOutOfRange { .. } => "IndexOutOfRange",
            EncodeError::EncodingMismatch(_) => "EncodingMismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnEncoding {
    Standardized { mean: f64, sd: f64 },
    Binary,
    Indicator { level: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub feature: String,
    pub encoding: ColumnEncoding,
}

/// A column that was dropped because it was constant on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedColumn {
    pub name: String,
    pub feature: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrixMap {
    /// Selected features in schema order.
    pub features: Vec<String>,
    /// Every schema feature, in schema order.
    pub schema_order: Vec<String>,
    pub columns: Vec<EncodedColumn>,
    /// Dropped reference level per categorical feature.
    pub reference_levels: Vec<(String, String)>,
    pub removed: Vec<RemovedColumn>,
    /// Schema fingerprint of the dataset the map was fitted on.
    pub schema_fingerprint: String,
}

impl DesignMatrixMap {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn feature_columns<'a>(&'a self, feature: &'a str) -> impl Iterator<Item = &'a EncodedColumn> + 'a {
        self.columns.iter().filter(move |c| c.feature == feature)
    }

    pub fn encode_record(&self, record: &ApplicantRecord) -> Result<Vec<f64>, EncodeError> {
        self.columns
            .iter()
            .map(|column| {
                let value = record
                    .value(&column.feature)
                    .ok_or_else(|| EncodeError::EncodingMismatch(format!("record lacks `{}`", column.feature)))?;
                encode_cell(column, value)
            })
            .collect()
    }
}

fn encode_cell(column: &EncodedColumn, value: &Value) -> Result<f64, EncodeError> {
    let mismatch = || EncodeError::EncodingMismatch(format!("value `{value}` does not fit column `{}`", column.name));
    match (&column.encoding, value) {
        (ColumnEncoding::Standardized { mean, sd }, Value::Numeric(v)) => Ok((v - mean) / sd),
        (ColumnEncoding::Binary, Value::Binary(b)) => Ok(if *b { 1.0 } else { 0.0 }),
        (ColumnEncoding::Indicator { level }, Value::Level(l)) => Ok(if l == level { 1.0 } else { 0.0 }),
        _ => Err(mismatch()),
    }
}

pub fn indicator_name(feature: &str, level: &str) -> String {
    format!("{feature}={level}")
}

/// Sample mean and standard deviation (n-1 denominator).
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Encodes every record of `dataset` (one row per record) using constants
/// fitted on `train_indices`.
pub fn encode_design_matrix(
    dataset: &Dataset,
    selected: &BTreeSet<String>,
    train_indices: &[usize],
) -> Result<(DMatrix<f64>, DesignMatrixMap), EncodeError> {
    if selected.is_empty() {
        return Err(EncodeError::EmptySelection);
    }
    if let Some(unknown) = selected.iter().find(|s| dataset.schema.feature(s).is_none()) {
        return Err(EncodeError::UnknownFeature(unknown.clone()));
    }
    if train_indices.is_empty() {
        return Err(EncodeError::EmptyTrainIndices);
    }
    if let Some(&index) = train_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(EncodeError::IndexOutOfRange {
            index,
            len: dataset.len(),
        });
    }
    let train: Vec<&ApplicantRecord> = train_indices.iter().map(|&i| &dataset.records[i]).collect();
    let value_of = |r: &'_ ApplicantRecord, feature: &str| -> Result<Value, EncodeError> {
        r.value(feature)
            .cloned()
            .ok_or_else(|| EncodeError::EncodingMismatch(format!("record {} lacks `{feature}`", r.synthetic_id)))
    };

    let mut map = DesignMatrixMap {
        features: Vec::new(),
        schema_order: dataset.schema.feature_names().map(str::to_string).collect(),
        columns: Vec::new(),
        reference_levels: Vec::new(),
        removed: Vec::new(),
        schema_fingerprint: dataset.schema.fingerprint(),
    };
    for spec in dataset.schema.features.iter().filter(|f| selected.contains(&f.name)) {
        map.features.push(spec.name.clone());
        let name = spec.name.as_str();
        let constant = |map: &mut DesignMatrixMap, column: String| {
            map.removed.push(RemovedColumn {
                name: column,
                feature: name.to_string(),
                reason: "constant on training rows".into(),
            });
        };
        match &spec.kind {
            FeatureKind::Numeric => {
                let values = train
                    .iter()
                    .map(|r| {
                        value_of(r, name)?
                            .as_f64()
                            .ok_or_else(|| EncodeError::EncodingMismatch(format!("`{name}` is not numeric")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let (mean, sd) = mean_sd(&values);
                if sd > 0.0 && sd.is_finite() {
                    map.columns.push(EncodedColumn {
                        name: name.to_string(),
                        feature: name.to_string(),
                        encoding: ColumnEncoding::Standardized { mean, sd },
                    });
                } else {
                    constant(&mut map, name.to_string());
                }
            }
            FeatureKind::Binary => {
                let ones = train
                    .iter()
                    .map(|r| value_of(r, name).map(|v| v == Value::Binary(true)))
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .filter(|b| *b)
                    .count();
                if ones == 0 || ones == train.len() {
                    constant(&mut map, name.to_string());
                } else {
                    map.columns.push(EncodedColumn {
                        name: name.to_string(),
                        feature: name.to_string(),
                        encoding: ColumnEncoding::Binary,
                    });
                }
            }
            FeatureKind::Categorical { levels } => {
                let mut counts = vec![0usize; levels.len()];
                for r in &train {
                    if let Value::Level(l) = value_of(r, name)? {
                        if let Some(k) = levels.iter().position(|x| *x == l) {
                            counts[k] += 1;
                        }
                    }
                }
                // Most frequent level; earliest declared level wins ties.
                let reference = counts
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &c)| if c > counts[best] { k } else { best });
                map.reference_levels.push((name.to_string(), levels[reference].clone()));
                for (k, level) in levels.iter().enumerate() {
                    if k == reference {
                        continue;
                    }
                    let column = indicator_name(name, level);
                    if counts[k] == 0 || counts[k] == train.len() {
                        constant(&mut map, column);
                    } else {
                        map.columns.push(EncodedColumn {
                            name: column,
                            feature: name.to_string(),
                            encoding: ColumnEncoding::Indicator { level: level.clone() },
                        });
                    }
                }
            }
        }
    }

    let mut matrix = DMatrix::zeros(dataset.len(), map.width());
    for (i, record) in dataset.records.iter().enumerate() {
        for (j, x) in map.encode_record(record)?.into_iter().enumerate() {
            matrix[(i, j)] = x;
        }
    }
    Ok((matrix, map))
}
