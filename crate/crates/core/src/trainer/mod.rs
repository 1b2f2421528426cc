//! Linear scoring models: the all-features model, one model per
//! participant, and the group model. All models of a session share one
//! train/test split so their metrics are comparable.

mod ols;
mod split;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{encode_design_matrix, DesignMatrixMap, EncodeError};
use crate::ingest::{ApplicantRecord, Dataset, Decision};
use crate::session::{ModelRegistry, Session, SessionState};

pub use ols::{fit_linear, LinearFit, CONDITION_LIMIT, DEFAULT_RIDGE_EPS};
pub use split::{split, Split, SplitSpec, MIN_RECORDS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("split ratio {0} must lie strictly between 0 and 1 and leave both sides non-empty")]
    InvalidRatio(f64),
    #[error("{n} records; at least {min} are needed to split")]
    TooFewRecords { n: usize, min: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("normal equations are singular even with the ridge term (condition {condition:e})")]
    UnsolvableSystem { condition: f64 },
    #[error("session is not ready to train: {0}")]
    SessionNotReady(String),
    #[error("{0} selected no features")]
    EmptySelection(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

impl TrainError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainError::InvalidRatio(_) => "InvalidRatio",
            TrainError::TooFewRecords { .. } => "TooFewRecords",
            TrainError::DimensionMismatch(_) => "DimensionMismatch",
            TrainError::UnsolvableSystem { .. } => "UnsolvableSystem",
            TrainError::SessionNotReady(_) => "SessionNotReady",
            TrainError::EmptySelection(_) => "EmptySelection",
            TrainError::Encode(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelVariant {
    AllFeatures,
    Individual { participant: String },
    Group,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVariant::AllFeatures => f.write_str("all-features"),
            ModelVariant::Individual { participant } => write!(f, "individual({participant})"),
            ModelVariant::Group => f.write_str("group"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub column: String,
    pub feature: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model_id: String,
    pub session_id: Option<String>,
    pub variant: ModelVariant,
    /// Selected features in schema order.
    pub selected_features: Vec<String>,
    /// One weight per encoded column, in standardized units.
    pub weights: Vec<WeightEntry>,
    pub intercept: f64,
    pub threshold: f64,
    pub split_spec: SplitSpec,
    pub split: Split,
    pub encoding: DesignMatrixMap,
    /// Ridge term used when the plain normal equations were singular.
    pub ridge_fallback: Option<f64>,
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub decision: Decision,
    pub score: f64,
    pub confidence: f64,
}

impl TrainedModel {
    pub fn weight(&self, column: &str) -> Option<f64> {
        self.weights.iter().find(|w| w.column == column).map(|w| w.weight)
    }

    pub fn schema_fingerprint(&self) -> &str {
        &self.encoding.schema_fingerprint
    }

    /// `intercept + sum(weight * encoded value)` using the stored
    /// standardization constants.
    pub fn predict_score(&self, record: &ApplicantRecord) -> Result<f64, EncodeError> {
        let encoded = self.encoding.encode_record(record)?;
        Ok(self.score_encoded(&encoded))
    }

    pub fn score_encoded(&self, encoded: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(encoded).map(|(w, x)| w.weight * x).sum::<f64>()
    }

    pub fn classify(&self, record: &ApplicantRecord) -> Result<Classification, EncodeError> {
        Ok(classify_score(self.predict_score(record)?, self.threshold))
    }
}

/// Admit when the score reaches the threshold (ties admit). Confidence is
/// the distance from the threshold over 0.5, capped at 1.
pub fn classify_score(score: f64, threshold: f64) -> Classification {
    Classification {
        decision: if score >= threshold {
            Decision::Admit
        } else {
            Decision::Reject
        },
        score,
        confidence: ((score - threshold).abs() / 0.5).min(1.0),
    }
}

/// Options shared by every model trained in one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub split: SplitSpec,
    pub threshold: f64,
    pub ridge_eps: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            split: SplitSpec::default(),
            threshold: DEFAULT_THRESHOLD,
            ridge_eps: DEFAULT_RIDGE_EPS,
        }
    }
}

/// Fits one model on the training side of `split`.
pub fn train_model(
    model_id: impl Into<String>,
    session_id: Option<String>,
    variant: ModelVariant,
    dataset: &Dataset,
    selected: &BTreeSet<String>,
    split: &Split,
    options: &TrainOptions,
) -> Result<TrainedModel, TrainError> {
    let (matrix, encoding) = encode_design_matrix(dataset, selected, &split.train)?;
    let train_x = matrix.select_rows(split.train.iter());
    let targets: Vec<f64> = split
        .train
        .iter()
        .map(|&i| dataset.records[i].outcome.as_target())
        .collect();
    let fit = fit_linear(&train_x, &targets, options.ridge_eps)?;
    let weights = encoding
        .columns
        .iter()
        .zip(&fit.weights)
        .map(|(c, w)| WeightEntry {
            column: c.name.clone(),
            feature: c.feature.clone(),
            weight: *w,
        })
        .collect();
    Ok(TrainedModel {
        model_id: model_id.into(),
        session_id,
        variant,
        selected_features: encoding.features.clone(),
        weights,
        intercept: fit.intercept,
        threshold: options.threshold,
        split_spec: options.split,
        split: split.clone(),
        encoding,
        ridge_fallback: fit.ridge,
        condition: fit.condition,
    })
}

pub fn all_features_model(
    model_id: impl Into<String>,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<TrainedModel, TrainError> {
    let split = split(dataset.len(), options.split)?;
    let all: BTreeSet<String> = dataset.schema.feature_names().map(str::to_string).collect();
    train_model(
        model_id,
        None,
        ModelVariant::AllFeatures,
        dataset,
        &all,
        &split,
        options,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub models: Vec<TrainedModel>,
    pub registry: ModelRegistry,
}

pub fn model_id(session_id: &str, variant: &ModelVariant) -> String {
    match variant {
        ModelVariant::AllFeatures => format!("{session_id}.all-features"),
        ModelVariant::Group => format!("{session_id}.group"),
        ModelVariant::Individual { participant } => format!("{session_id}.individual.{participant}"),
    }
}

/// Trains every model a session needs. `existing_all_features` is reused
/// when given; otherwise the all-features model is trained here too.
pub fn train_for_session(
    dataset: &Dataset,
    session: &Session,
    existing_all_features: Option<&TrainedModel>,
) -> Result<ModelSet, TrainError> {
    if session.state != SessionState::GroupFinalized || session.consensus.is_none() {
        return Err(TrainError::SessionNotReady(format!(
            "state is {}, training needs GroupFinalized",
            session.state
        )));
    }
    let incomplete = session.incomplete_participants();
    if !incomplete.is_empty() {
        return Err(TrainError::SessionNotReady(format!(
            "incomplete participants: {incomplete:?}"
        )));
    }
    let options = TrainOptions {
        split: SplitSpec::new(session.settings.split_ratio, session.settings.split_seed)?,
        threshold: session.settings.threshold,
        ridge_eps: DEFAULT_RIDGE_EPS,
    };

    let mut jobs: Vec<(ModelVariant, BTreeSet<String>)> = Vec::new();
    for p in &session.participants {
        let features: BTreeSet<String> = session.included_features(p).into_iter().collect();
        if features.is_empty() {
            return Err(TrainError::EmptySelection(format!("participant `{p}`")));
        }
        jobs.push((ModelVariant::Individual { participant: p.clone() }, features));
    }
    let group: BTreeSet<String> = session.group_features().into_iter().collect();
    if group.is_empty() {
        return Err(TrainError::EmptySelection("the group".into()));
    }
    jobs.push((ModelVariant::Group, group));

    let shared_split = split(dataset.len(), options.split)?;
    let reuse = existing_all_features.filter(|m| m.split == shared_split && m.threshold == options.threshold);
    if reuse.is_none() {
        jobs.push((
            ModelVariant::AllFeatures,
            dataset.schema.feature_names().map(str::to_string).collect(),
        ));
    }

    let mut models = Vec::with_capacity(jobs.len());
    let mut registry = ModelRegistry::default();
    for (variant, features) in jobs {
        let id = model_id(&session.session_id, &variant);
        let model = train_model(
            id.clone(),
            Some(session.session_id.clone()),
            variant.clone(),
            dataset,
            &features,
            &shared_split,
            &options,
        )?;
        match variant {
            ModelVariant::AllFeatures => registry.all_features = Some(id),
            ModelVariant::Group => registry.group = Some(id),
            ModelVariant::Individual { participant } => {
                registry.individual.insert(participant, id);
            }
        }
        models.push(model);
    }
    if let Some(existing) = reuse {
        registry.all_features = Some(existing.model_id.clone());
    }
    Ok(ModelSet { models, registry })
}
