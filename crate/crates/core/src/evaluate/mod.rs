//! Model evaluation surfaces: contextualized confusion matrix and metrics,
//! group fairness rates, persona browsing and weight comparison.

mod fairness;
mod performance;
mod personas;
mod weights;

use thiserror::Error;

use crate::encode::EncodeError;
use crate::ingest::{Dataset, Decision};
use crate::trainer::TrainedModel;

pub use fairness::{
    demographic_parity, equal_opportunity, fairness_report, group_rates, FairnessDefinition, FairnessReport, GroupRate,
};
pub use performance::{confusion, evaluate_performance, metrics, ConfusionMatrix, Metric, PerformanceReport};
pub use personas::{query_personas, FeatureFilter, Persona, PersonaPage, PersonaQuery, PersonaValue, Predicate};
pub use weights::{compare_weights, WeightComparison, WeightRow};

pub const MAX_FEATURE_FILTERS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and outcome lists differ in length ({predictions} vs {actuals})")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("record index {index} is out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{0}` is not flagged as sensitive")]
    NotSensitiveFeature(String),
    #[error("feature `{0}` is numeric and cannot define groups")]
    NotGroupable(String),
    #[error("at most {MAX_FEATURE_FILTERS} feature filters are allowed, got {0}")]
    TooManyFilters(usize),
    #[error("bad range for `{feature}`: {reason}")]
    BadRange { feature: String, reason: String },
    #[error("bad filter for `{feature}`: {reason}")]
    BadFilter { feature: String, reason: String },
    #[error("page size must be between 1 and {max}")]
    BadPageSize { max: usize },
    #[error("models were trained over different schemas")]
    SchemaMismatch,
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::LengthMismatch { .. } => "LengthMismatch",
            EvalError::EmptyInput => "EmptyInput",
            EvalError::IndexOutOfRange { .. } => "IndexOutOfRange",
            EvalError::UnknownFeature(_) => "UnknownFeature",
            EvalError::NotSensitiveFeature(_) => "NotSensitiveFeature",
            EvalError::NotGroupable(_) => "NotGroupable",
            EvalError::TooManyFilters(_) => "TooManyFilters",
            EvalError::BadRange { .. } => "BadRange",
            EvalError::BadFilter { .. } => "BadFilter",
            EvalError::BadPageSize { .. } => "BadPageSize",
            EvalError::SchemaMismatch => "SchemaMismatch",
            EvalError::Encode(e) => e.code(),
        }
    }
}

/// Model decisions and historical outcomes for the given record indices.
pub fn predictions(
    model: &TrainedModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(Vec<Decision>, Vec<Decision>), EvalError> {
    let mut predicted = Vec::with_capacity(indices.len());
    let mut actual = Vec::with_capacity(indices.len());
    for &i in indices {
        let record = dataset.records.get(i).ok_or(EvalError::IndexOutOfRange {
            index: i,
            len: dataset.len(),
        })?;
        predicted.push(model.classify(record)?.decision);
        actual.push(record.outcome);
    }
    Ok((predicted, actual))
}
