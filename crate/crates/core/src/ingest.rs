//! CSV ingestion: applies derivation rules, drops rows without an outcome
//! and imputes the remaining gaps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive::{
    code_awards, derive_first_generation, derive_work_experience, map_institution_tier, parse_education_levels,
    parse_work_history, AwardLexicon, DeriveError, TierTable,
};
use crate::schema::{Derivation, FeatureKind, FeatureSchema, UNKNOWN_LEVEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("input has no header row")]
    MissingHeader,
    #[error("outcome column `{0}` is not in the header")]
    OutcomeColumnAbsent(String),
    #[error("column `{column}` needed by feature `{feature}` is not in the header")]
    MissingColumn { feature: String, column: String },
    #[error("every row was dropped ({dropped} without an outcome)")]
    AllRowsDropped { dropped: usize },
    #[error("line {line}, column `{column}`: {reason}")]
    InvalidValue {
        line: usize,
        column: String,
        reason: String,
    },
    #[error("line {line}, feature `{feature}`: {source}")]
    Derivation {
        line: usize,
        feature: String,
        source: DeriveError,
    },
    #[error("feature `{0}` has no observed values to impute from")]
    NoObservedValues(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::MissingHeader => "MissingHeader",
            IngestError::OutcomeColumnAbsent(_) => "OutcomeColumnAbsent",
            IngestError::MissingColumn { .. } => "MissingColumn",
            IngestError::AllRowsDropped { .. } => "AllRowsDropped",
            IngestError::InvalidValue { .. } => "InvalidValue",
            IngestError::Derivation { source, .. } => source.code(),
            IngestError::NoObservedValues(_) => "NoObservedValues",
            IngestError::Csv(_) => "ParseError",
        }
    }
}

/// Admit/reject, used both for historical outcomes and model decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Admit,
    Reject,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Admit => "admit",
            Decision::Reject => "reject",
        }
    }

    pub fn parse(text: &str) -> Option<Decision> {
        match text.trim().to_ascii_lowercase().as_str() {
            "admit" | "admitted" | "accept" | "accepted" | "1" | "yes" => Some(Decision::Admit),
            "reject" | "rejected" | "deny" | "denied" | "0" | "no" => Some(Decision::Reject),
            _ => None,
        }
    }

    pub fn as_target(self) -> f64 {
        match self {
            Decision::Admit => 1.0,
            Decision::Reject => 0.0,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Numeric(f64),
    Binary(bool),
    Level(String),
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Numeric(v) => Some(*v),
            Value::Binary(b) => Some(if *b { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    /// Group label for categorical and binary values.
    pub fn level(&self) -> Option<&str> {
        match self {
            Value::Level(l) => Some(l),
            Value::Binary(true) => Some("yes"),
            Value::Binary(false) => Some("no"),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Numeric(v) => write!(f, "{v}"),
            Value::Binary(b) => f.write_str(if *b { "yes" } else { "no" }),
            Value::Level(l) => f.write_str(l),
            Value::Missing => f.write_str(""),
        }
    }
}

pub type SyntheticId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicantRecord {
    pub synthetic_id: SyntheticId,
    pub values: BTreeMap<String, Value>,
    pub outcome: Decision,
    pub imputed: BTreeSet<String>,
}

impl ApplicantRecord {
    pub fn value(&self, feature: &str) -> Option<&Value> {
        self.values.get(feature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Schema after ingestion; categorical features gain an `Unknown` level
    /// when some value had to be imputed.
    pub schema: FeatureSchema,
    pub records: Vec<ApplicantRecord>,
    /// Rows dropped because their outcome was blank.
    pub dropped_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outcomes(&self) -> Vec<Decision> {
        self.records.iter().map(|r| r.outcome).collect()
    }

    pub fn imputed_cell_count(&self) -> usize {
        self.records.iter().map(|r| r.imputed.len()).sum()
    }
}

/// Lookup tables used by derived features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivationTables {
    pub tiers: TierTable,
    pub awards: AwardLexicon,
}

impl DerivationTables {
    pub fn bundled() -> Self {
        DerivationTables {
            tiers: TierTable::from_csv(crate::fixtures::TIERS).expect("bundled tier table"),
            awards: AwardLexicon::from_csv(crate::fixtures::AWARDS).expect("bundled award lexicon"),
        }
    }
}

/// Reads raw applicant rows and produces a dense, validated dataset.
///
/// Rows with a blank outcome are dropped and counted. Missing numeric
/// values become the mean of the observed values, binary values the
/// majority value (ties go to `no`), and categorical values the `Unknown`
/// level. Each imputed cell is named in the record's `imputed` set.
pub fn ingest_csv(text: &str, schema: &FeatureSchema, tables: &DerivationTables) -> Result<Dataset, IngestError> {
    schema.validate().map_err(|e| IngestError::Csv(e.to_string()))?;
    if text.trim().is_empty() {
        return Err(IngestError::MissingHeader);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
        .collect();
    let columns: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let referenced: BTreeSet<&str> = schema
        .features
        .iter()
        .flat_map(|f| f.derivation.columns())
        .chain(std::iter::once(schema.outcome_column.as_str()))
        .collect();
    if !referenced.iter().any(|c| columns.contains_key(c)) {
        return Err(IngestError::MissingHeader);
    }
    let outcome_idx = *columns
        .get(schema.outcome_column.as_str())
        .ok_or_else(|| IngestError::OutcomeColumnAbsent(schema.outcome_column.clone()))?;
    for feature in &schema.features {
        for column in feature.derivation.columns() {
            if !columns.contains_key(column) {
                return Err(IngestError::MissingColumn {
                    feature: feature.name.clone(),
                    column: column.to_string(),
                });
            }
        }
    }

    let mut raw_rows: Vec<(Decision, Vec<Value>)> = Vec::new();
    let mut dropped = 0usize;
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IngestError::Csv(e.to_string()))?;
        let outcome_cell = row.get(outcome_idx).unwrap_or("").trim();
        if outcome_cell.is_empty() {
            dropped += 1;
            continue;
        }
        let outcome = Decision::parse(outcome_cell).ok_or_else(|| IngestError::InvalidValue {
            line,
            column: schema.outcome_column.clone(),
            reason: format!("`{outcome_cell}` is not admit/reject"),
        })?;
        let cell = |column: &str| row.get(columns[column]).unwrap_or("");
        let values = schema
            .features
            .iter()
            .map(|feature| {
                derive_value(
                    feature.name.as_str(),
                    &feature.kind,
                    &feature.derivation,
                    &cell,
                    tables,
                    line,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        raw_rows.push((outcome, values));
    }
    if raw_rows.is_empty() {
        return Err(IngestError::AllRowsDropped { dropped });
    }

    let mut schema = schema.clone();
    let mut fills = Vec::with_capacity(schema.features.len());
    for (j, feature) in schema.features.iter_mut().enumerate() {
        let observed = raw_rows.iter().map(|(_, v)| &v[j]).filter(|v| !v.is_missing());
        let any_missing = raw_rows.iter().any(|(_, v)| v[j].is_missing());
        let fill = match &mut feature.kind {
            FeatureKind::Numeric => {
                let (sum, count) = observed.fold((0.0, 0usize), |(s, c), v| (s + v.as_f64().unwrap_or(0.0), c + 1));
                if count == 0 {
                    return Err(IngestError::NoObservedValues(feature.name.clone()));
                }
                Value::Numeric(sum / count as f64)
            }
            FeatureKind::Binary => {
                let (yes, count) = observed.fold((0usize, 0usize), |(y, c), v| {
                    (y + usize::from(matches!(v, Value::Binary(true))), c + 1)
                });
                if count == 0 {
                    return Err(IngestError::NoObservedValues(feature.name.clone()));
                }
                Value::Binary(2 * yes > count)
            }
            FeatureKind::Categorical { levels } => {
                if any_missing && !levels.iter().any(|l| l == UNKNOWN_LEVEL) {
                    levels.push(UNKNOWN_LEVEL.to_string());
                }
                Value::Level(UNKNOWN_LEVEL.to_string())
            }
        };
        fills.push(fill);
    }

    let records = raw_rows
        .into_iter()
        .enumerate()
        .map(|(i, (outcome, values))| {
            let mut imputed = BTreeSet::new();
            let values = schema
                .features
                .iter()
                .zip(values)
                .zip(&fills)
                .map(|((feature, value), fill)| {
                    let value = if value.is_missing() {
                        imputed.insert(feature.name.clone());
                        fill.clone()
                    } else {
                        value
                    };
                    (feature.name.clone(), value)
                })
                .collect();
            ApplicantRecord {
                synthetic_id: (i + 1) as SyntheticId,
                values,
                outcome,
                imputed,
            }
        })
        .collect();

    Ok(Dataset {
        schema,
        records,
        dropped_count: dropped,
    })
}

fn parse_binary(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" | "1" => Some(true),
        "no" | "n" | "false" | "0" => Some(false),
        _ => None,
    }
}

fn derive_value<'r>(
    feature: &str,
    kind: &FeatureKind,
    derivation: &Derivation,
    cell: &dyn Fn(&str) -> &'r str,
    tables: &DerivationTables,
    line: usize,
) -> Result<Value, IngestError> {
    let wrap = |source: DeriveError| IngestError::Derivation {
        line,
        feature: feature.to_string(),
        source,
    };
    let value = match derivation {
        Derivation::Direct { column } => {
            let text = cell(column).trim();
            if text.is_empty() {
                return Ok(Value::Missing);
            }
            let invalid = |reason: String| IngestError::InvalidValue {
                line,
                column: column.clone(),
                reason,
            };
            match kind {
                FeatureKind::Numeric => {
                    let v: f64 = text.parse().map_err(|_| invalid(format!("`{text}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(invalid(format!("`{text}` is not finite")));
                    }
                    Value::Numeric(v)
                }
                FeatureKind::Binary => {
                    Value::Binary(parse_binary(text).ok_or_else(|| invalid(format!("`{text}` is not yes/no")))?)
                }
                FeatureKind::Categorical { levels } => {
                    let level = levels
                        .iter()
                        .find(|l| l.eq_ignore_ascii_case(text))
                        .ok_or_else(|| invalid(format!("`{text}` is not a declared level")))?;
                    Value::Level(level.clone())
                }
            }
        }
        Derivation::FirstGeneration { columns } => {
            let levels = parse_education_levels(columns.iter().map(|c| cell(c))).map_err(wrap)?;
            derive_first_generation(&levels).map_or(Value::Missing, Value::Binary)
        }
        Derivation::WorkExperience { column } => {
            let periods = parse_work_history(cell(column)).map_err(wrap)?;
            Value::Numeric(derive_work_experience(&periods).map_err(wrap)?)
        }
        Derivation::InstitutionTier { column } => {
            let name = cell(column);
            match map_institution_tier(name, &tables.tiers) {
                Some(tier) => Value::Numeric(f64::from(tier)),
                None => Value::Missing,
            }
        }
        Derivation::AwardCount { category, columns } => {
            let counts = code_awards(columns.iter().map(|c| cell(c)), &tables.awards);
            Value::Numeric(f64::from(counts.get(*category)))
        }
        Derivation::DegreeFlag { level, column } => {
            let text = cell(column).trim();
            if text.is_empty() {
                Value::Missing
            } else {
                let wanted = level.trim().to_lowercase();
                Value::Binary(text.split(';').any(|d| d.trim().to_lowercase() == wanted))
            }
        }
    };
    Ok(value)
}
