use serde::{Deserialize, Serialize};

use super::{EvalError, MAX_FEATURE_FILTERS};
use crate::ingest::{ApplicantRecord, Dataset, Decision, SyntheticId, Value};
use crate::schema::FeatureKind;
use crate::trainer::TrainedModel;

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    /// Categorical or binary value equals `level`, ignoring ASCII case
    /// (`yes`/`no` for binary).
    Level { level: String },
    /// Inclusive numeric range; either bound may be open.
    Range { min: Option<f64>, max: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFilter {
    pub feature: String,
    #[serde(flatten)]
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaQuery {
    pub model_decision: Option<Decision>,
    pub actual_decision: Option<Decision>,
    pub filters: Vec<FeatureFilter>,
    pub page_size: usize,
    /// Offset into the ordered result list.
    pub cursor: usize,
}

impl Default for PersonaQuery {
    fn default() -> Self {
        PersonaQuery {
            model_decision: None,
            actual_decision: None,
            filters: Vec::new(),
            page_size: DEFAULT_PAGE_SIZE,
            cursor: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaValue {
    pub feature: String,
    pub value: Value,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub synthetic_id: SyntheticId,
    /// Feature values in schema order.
    pub values: Vec<PersonaValue>,
    pub model_decision: Decision,
    /// Score rounded to two decimals for display.
    pub score: f64,
    pub confidence: f64,
    pub actual_decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaPage {
    pub items: Vec<Persona>,
    pub total: usize,
    pub cursor: usize,
    pub next_cursor: Option<usize>,
}

fn check_filter(dataset: &Dataset, filter: &FeatureFilter) -> Result<(), EvalError> {
    let spec = dataset
        .schema
        .feature(&filter.feature)
        .ok_or_else(|| EvalError::UnknownFeature(filter.feature.clone()))?;
    let bad = |reason: &str| EvalError::BadFilter {
        feature: filter.feature.clone(),
        reason: reason.to_string(),
    };
    match (&filter.predicate, &spec.kind) {
        (Predicate::Range { min, max }, FeatureKind::Numeric) => {
            let range_err = |reason: &str| EvalError::BadRange {
                feature: filter.feature.clone(),
                reason: reason.to_string(),
            };
            if min.is_none() && max.is_none() {
                return Err(range_err("at least one bound is required"));
            }
            if min.is_some_and(|v| !v.is_finite()) || max.is_some_and(|v| !v.is_finite()) {
                return Err(range_err("bounds must be finite"));
            }
            if let (Some(lo), Some(hi)) = (min, max) {
                if lo > hi {
                    return Err(range_err("min exceeds max"));
                }
            }
            Ok(())
        }
        (Predicate::Range { .. }, _) => Err(bad("range filters apply to numeric features only")),
        (Predicate::Level { level }, kind) => match kind.levels() {
            None => Err(bad("level filters apply to categorical and binary features only")),
            Some(levels) if !levels.iter().any(|l| l.eq_ignore_ascii_case(level)) => {
                Err(bad(&format!("unknown level `{level}`")))
            }
            Some(_) => Ok(()),
        },
    }
}

fn matches(record: &ApplicantRecord, filter: &FeatureFilter) -> bool {
    let Some(value) = record.value(&filter.feature) else {
        return false;
    };
    match &filter.predicate {
        Predicate::Level { level } => value.level().is_some_and(|l| l.eq_ignore_ascii_case(level)),
        Predicate::Range { min, max } => match value {
            Value::Numeric(v) => min.is_none_or(|lo| *v >= lo) && max.is_none_or(|hi| *v <= hi),
            _ => false,
        },
    }
}

/// Records matching `query`, ordered by descending model score and then
/// ascending synthetic id, one page at a time.
pub fn query_personas(model: &TrainedModel, dataset: &Dataset, query: &PersonaQuery) -> Result<PersonaPage, EvalError> {
    if query.filters.len() > MAX_FEATURE_FILTERS {
        return Err(EvalError::TooManyFilters(query.filters.len()));
    }
    if query.page_size == 0 || query.page_size > MAX_PAGE_SIZE {
        return Err(EvalError::BadPageSize { max: MAX_PAGE_SIZE });
    }
    for filter in &query.filters {
        check_filter(dataset, filter)?;
    }
    let mut hits = Vec::new();
    for record in &dataset.records {
        if query.actual_decision.is_some_and(|d| d != record.outcome) {
            continue;
        }
        if !query.filters.iter().all(|f| matches(record, f)) {
            continue;
        }
        let c = model.classify(record)?;
        if query.model_decision.is_some_and(|d| d != c.decision) {
            continue;
        }
        hits.push((record, c));
    }
    hits.sort_by(|(ra, ca), (rb, cb)| {
        cb.score
            .total_cmp(&ca.score)
            .then(ra.synthetic_id.cmp(&rb.synthetic_id))
    });
    let total = hits.len();
    let items = hits
        .iter()
        .skip(query.cursor)
        .take(query.page_size)
        .map(|(record, c)| Persona {
            synthetic_id: record.synthetic_id,
            values: dataset
                .schema
                .feature_names()
                .filter_map(|f| {
                    record.value(f).map(|v| PersonaValue {
                        feature: f.to_string(),
                        value: v.clone(),
                        imputed: record.imputed.contains(f),
                    })
                })
                .collect(),
            model_decision: c.decision,
            score: crate::derive::round_to(c.score, 2),
            confidence: c.confidence,
            actual_decision: record.outcome,
        })
        .collect();
    let end = query.cursor.saturating_add(query.page_size);
    Ok(PersonaPage {
        items,
        total,
        cursor: query.cursor,
        next_cursor: (end < total).then_some(end),
    })
}
