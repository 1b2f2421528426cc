//! Data exploration views: one-feature distributions and pairwise views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::mean_sd;
use crate::ingest::{Dataset, SyntheticId, Value};
use crate::schema::{FeatureKind, FeatureSpec};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExploreError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("a bivariate view needs two different features, got `{0}` twice")]
    SameFeature(String),
    #[error("bin count must be at least 1")]
    InvalidBins,
}

impl ExploreError {
    pub fn code(&self) -> &'static str {
        match self {
            ExploreError::UnknownFeature(_) => "UnknownFeature",
            ExploreError::SameFeature(_) => "SameFeature",
            ExploreError::InvalidBins => "InvalidBins",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` strictly increasing edges. Bins are right-open
    /// except the last, which is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    Numeric {
        mean: f64,
        median: f64,
        sd: f64,
        min: f64,
        max: f64,
        histogram: Histogram,
    },
    Categorical {
        counts: BTreeMap<String, usize>,
        proportions: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateSummary {
    pub feature: String,
    pub n: usize,
    pub distribution: Distribution,
}

/// Five-number summary with linear-interpolation quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub synthetic_id: SyntheticId,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BivariateShape {
    Scatter {
        points: Vec<ScatterPoint>,
    },
    /// `numeric` summarized within each level of `group`.
    BoxByGroup {
        numeric: String,
        group: String,
        groups: BTreeMap<String, BoxStats>,
    },
    /// `cells[level_a][level_b]`.
    Contingency {
        cells: BTreeMap<String, BTreeMap<String, usize>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateView {
    pub feature_a: String,
    pub feature_b: String,
    pub shape: BivariateShape,
}

/// Linear interpolation between order statistics of `sorted` (which must be
/// ascending and non-empty).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(BoxStats {
        n: sorted.len(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Equal-width histogram over `[min, max]`. A constant sample gets a single
/// unit-wide bin centred on its value.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || min == max {
        let centre = if values.is_empty() { 0.0 } else { min };
        return Histogram {
            edges: vec![centre - 0.5, centre + 0.5],
            counts: vec![values.len()],
        };
    }
    let width = (max - min) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|k| min + width * k as f64).collect();
    edges.push(max);
    let mut counts = vec![0; bins];
    for &v in values {
        // Last bin is closed; everything else is [edge_k, edge_k+1).
        let k = edges[1..bins].partition_point(|e| *e <= v);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

fn feature<'a>(dataset: &'a Dataset, name: &str) -> Result<&'a FeatureSpec, ExploreError> {
    dataset
        .schema
        .feature(name)
        .ok_or_else(|| ExploreError::UnknownFeature(name.to_string()))
}

fn numeric_values(dataset: &Dataset, name: &str) -> Vec<f64> {
    dataset
        .records
        .iter()
        .filter_map(|r| r.value(name).and_then(Value::as_f64))
        .collect()
}

fn level_values<'a>(dataset: &'a Dataset, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    dataset
        .records
        .iter()
        .filter_map(move |r| r.value(name).and_then(Value::level))
}

pub fn univariate_summary(dataset: &Dataset, name: &str) -> Result<UnivariateSummary, ExploreError> {
    univariate_summary_with_bins(dataset, name, DEFAULT_BINS)
}

pub fn univariate_summary_with_bins(
    dataset: &Dataset,
    name: &str,
    bins: usize,
) -> Result<UnivariateSummary, ExploreError> {
    if bins == 0 {
        return Err(ExploreError::InvalidBins);
    }
    let spec = feature(dataset, name)?;
    let distribution = match &spec.kind {
        FeatureKind::Numeric => {
            let values = numeric_values(dataset, name);
            let (mean, sd) = mean_sd(&values);
            let stats = box_stats(&values).expect("datasets are non-empty");
            Distribution::Numeric {
                mean,
                median: stats.median,
                sd,
                min: stats.min,
                max: stats.max,
                histogram: histogram(&values, bins),
            }
        }
        kind => {
            let mut counts: BTreeMap<String, usize> =
                kind.levels().unwrap_or_default().into_iter().map(|l| (l, 0)).collect();
            for level in level_values(dataset, name) {
                *counts.entry(level.to_string()).or_default() += 1;
            }
            let n = dataset.len() as f64;
            let proportions = counts.iter().map(|(l, c)| (l.clone(), *c as f64 / n)).collect();
            Distribution::Categorical { counts, proportions }
        }
    };
    Ok(UnivariateSummary {
        feature: name.to_string(),
        n: dataset.len(),
        distribution,
    })
}

pub fn bivariate_view(dataset: &Dataset, feature_a: &str, feature_b: &str) -> Result<BivariateView, ExploreError> {
    let a = feature(dataset, feature_a)?;
    let b = feature(dataset, feature_b)?;
    if feature_a == feature_b {
        return Err(ExploreError::SameFeature(feature_a.to_string()));
    }
    let shape = match (a.kind.is_numeric(), b.kind.is_numeric()) {
        (true, true) => BivariateShape::Scatter {
            points: dataset
                .records
                .iter()
                .filter_map(|r| {
                    Some(ScatterPoint {
                        synthetic_id: r.synthetic_id,
                        a: r.value(feature_a)?.as_f64()?,
                        b: r.value(feature_b)?.as_f64()?,
                    })
                })
                .collect(),
        },
        (true, false) | (false, true) => {
            let (numeric, group) = if a.kind.is_numeric() { (a, b) } else { (b, a) };
            let mut by_level: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &dataset.records {
                if let (Some(x), Some(level)) = (
                    r.value(&numeric.name).and_then(Value::as_f64),
                    r.value(&group.name).and_then(Value::level),
                ) {
                    by_level.entry(level.to_string()).or_default().push(x);
                }
            }
            BivariateShape::BoxByGroup {
                numeric: numeric.name.clone(),
                group: group.name.clone(),
                groups: by_level
                    .into_iter()
                    .filter_map(|(level, xs)| box_stats(&xs).map(|s| (level, s)))
                    .collect(),
            }
        }
        (false, false) => {
            let levels_a = a.kind.levels().unwrap_or_default();
            let levels_b = b.kind.levels().unwrap_or_default();
            let mut cells: BTreeMap<String, BTreeMap<String, usize>> = levels_a
                .iter()
                .map(|la| (la.clone(), levels_b.iter().map(|lb| (lb.clone(), 0)).collect()))
                .collect();
            for r in &dataset.records {
                if let (Some(la), Some(lb)) = (
                    r.value(feature_a).and_then(Value::level),
                    r.value(feature_b).and_then(Value::level),
                ) {
                    *cells
                        .entry(la.to_string())
                        .or_default()
                        .entry(lb.to_string())
                        .or_default() += 1;
                }
            }
            BivariateShape::Contingency { cells }
        }
    };
    Ok(BivariateView {
        feature_a: feature_a.to_string(),
        feature_b: feature_b.to_string(),
        shape,
    })
}
