//! Text forms of persona filters shared by the HTTP query string and the
//! command line.
//!
//! A feature filter is either `Feature=Level` or `Feature:min..max`, where
//! either bound may be left empty.

use serde::{Deserialize, Serialize};

use deliberate_core::evaluate::{FeatureFilter, PersonaQuery, Predicate};
use deliberate_core::Decision;

use crate::error::ApiError;

pub fn parse_filter(text: &str) -> Result<FeatureFilter, ApiError> {
    if let Some((feature, level)) = text.split_once('=') {
        return Ok(FeatureFilter {
            feature: feature.trim().to_string(),
            predicate: Predicate::Level {
                level: level.trim().to_string(),
            },
        });
    }
    let bad = || {
        ApiError::parse(format!(
            "filter `{text}` is neither `Feature=Level` nor `Feature:min..max`"
        ))
    };
    let (feature, range) = text.rsplit_once(':').ok_or_else(bad)?;
    let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
    let bound = |s: &str| -> Result<Option<f64>, ApiError> {
        let s = s.trim();
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad())
        }
    };
    Ok(FeatureFilter {
        feature: feature.trim().to_string(),
        predicate: Predicate::Range {
            min: bound(lo)?,
            max: bound(hi)?,
        },
    })
}

pub fn parse_decision(text: &str) -> Result<Decision, ApiError> {
    Decision::parse(text).ok_or_else(|| ApiError::parse(format!("`{text}` is not admit or reject")))
}

/// Persona query parameters as they arrive over the wire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersonaParams {
    pub model: Option<String>,
    pub actual: Option<String>,
    pub f1: Option<String>,
    pub f2: Option<String>,
    pub f3: Option<String>,
    pub cursor: Option<String>,
    pub page_size: Option<String>,
}

impl PersonaParams {
    pub fn to_query(&self) -> Result<PersonaQuery, ApiError> {
        let mut q = PersonaQuery::default();
        fn set(s: &Option<String>) -> Option<&str> {
            s.as_deref().map(str::trim).filter(|s| !s.is_empty())
        }
        if let Some(m) = set(&self.model) {
            q.model_decision = Some(parse_decision(m)?);
        }
        if let Some(a) = set(&self.actual) {
            q.actual_decision = Some(parse_decision(a)?);
        }
        for f in [&self.f1, &self.f2, &self.f3].into_iter().filter_map(set) {
            q.filters.push(parse_filter(f)?);
        }
        if let Some(c) = set(&self.cursor) {
            q.cursor = c
                .parse()
                .map_err(|_| ApiError::parse(format!("cursor `{c}` is not a number")))?;
        }
        if let Some(p) = set(&self.page_size) {
            q.page_size = p
                .parse()
                .map_err(|_| ApiError::parse(format!("page size `{p}` is not a number")))?;
        }
        Ok(q)
    }
}
