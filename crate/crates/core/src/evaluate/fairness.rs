use std::fmt;

use serde::{Deserialize, Serialize};

use super::{predictions, EvalError};
use crate::ingest::{Dataset, Decision};
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessDefinition {
    DemographicParity,
    EqualOpportunity,
}

impl FairnessDefinition {
    pub fn as_str(self) -> &'static str {
        match self {
            FairnessDefinition::DemographicParity => "demographic_parity",
            FairnessDefinition::EqualOpportunity => "equal_opportunity",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "demographic_parity" => Some(FairnessDefinition::DemographicParity),
            "equal_opportunity" => Some(FairnessDefinition::EqualOpportunity),
            _ => None,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            FairnessDefinition::DemographicParity => {
                "Demographic parity compares how often the model admits applicants in each group. \
                 A fair model admits every group at about the same rate."
            }
            FairnessDefinition::EqualOpportunity => {
                "Equal opportunity looks only at applicants the committee admitted and compares how \
                 often the model also admits them in each group. A fair model finds qualified \
                 applicants equally often in every group."
            }
        }
    }
}

impl fmt::Display for FairnessDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub group: String,
    /// Records counted in the denominator.
    pub n: usize,
    /// Denominator records the model admits.
    pub admitted: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub definition: FairnessDefinition,
    pub description: String,
    pub group_feature: String,
    pub per_group: Vec<GroupRate>,
    /// Groups whose denominator was empty.
    pub excluded_groups: Vec<String>,
    /// Largest absolute difference between any two group rates.
    pub max_disparity: f64,
    pub warnings: Vec<String>,
}

/// Per-group rates from plain label vectors. `levels` fixes the report
/// order; groups seen in `groups` but absent from `levels` follow it.
pub fn group_rates(
    definition: FairnessDefinition,
    group_feature: &str,
    levels: &[String],
    groups: &[String],
    predicted: &[Decision],
    actual: &[Decision],
) -> Result<FairnessReport, EvalError> {
    if groups.len() != predicted.len() || predicted.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predicted.len(),
            actuals: actual.len().min(groups.len()),
        });
    }
    if groups.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut order: Vec<String> = levels.to_vec();
    for g in groups {
        if !order.contains(g) {
            order.push(g.clone());
        }
    }
    let mut per_group = Vec::new();
    let mut excluded_groups = Vec::new();
    for level in order {
        let mut n = 0;
        let mut admitted = 0;
        for ((g, p), a) in groups.iter().zip(predicted).zip(actual) {
            if *g != level {
                continue;
            }
            if definition == FairnessDefinition::EqualOpportunity && *a != Decision::Admit {
                continue;
            }
            n += 1;
            if *p == Decision::Admit {
                admitted += 1;
            }
        }
        if n == 0 {
            excluded_groups.push(level);
        } else {
            per_group.push(GroupRate {
                group: level,
                n,
                admitted,
                rate: admitted as f64 / n as f64,
            });
        }
    }
    let max = per_group.iter().map(|g| g.rate).fold(f64::NEG_INFINITY, f64::max);
    let min = per_group.iter().map(|g| g.rate).fold(f64::INFINITY, f64::min);
    let mut warnings = Vec::new();
    let max_disparity = match per_group.len() {
        0 => {
            warnings.push("no group has records to compare".to_string());
            0.0
        }
        1 => {
            warnings.push(format!(
                "single group: only `{}` has records to compare",
                per_group[0].group
            ));
            0.0
        }
        _ => max - min,
    };
    Ok(FairnessReport {
        definition,
        description: definition.description().to_string(),
        group_feature: group_feature.to_string(),
        per_group,
        excluded_groups,
        max_disparity,
        warnings,
    })
}

/// Fairness of `model` over the records at `indices`, grouped by a
/// sensitive categorical or binary feature.
pub fn fairness_report(
    definition: FairnessDefinition,
    model: &TrainedModel,
    dataset: &Dataset,
    group_feature: &str,
    indices: &[usize],
) -> Result<FairnessReport, EvalError> {
    let spec = dataset
        .schema
        .feature(group_feature)
        .ok_or_else(|| EvalError::UnknownFeature(group_feature.to_string()))?;
    if !spec.sensitive {
        return Err(EvalError::NotSensitiveFeature(group_feature.to_string()));
    }
    let levels = spec
        .kind
        .levels()
        .ok_or_else(|| EvalError::NotGroupable(group_feature.to_string()))?;
    if indices.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (predicted, actual) = predictions(model, dataset, indices)?;
    let groups: Vec<String> = indices
        .iter()
        .map(|&i| {
            dataset.records[i]
                .value(group_feature)
                .and_then(|v| v.level())
                .unwrap_or(crate::schema::UNKNOWN_LEVEL)
                .to_string()
        })
        .collect();
    group_rates(definition, group_feature, &levels, &groups, &predicted, &actual)
}

pub fn demographic_parity(
    model: &TrainedModel,
    dataset: &Dataset,
    group_feature: &str,
    indices: &[usize],
) -> Result<FairnessReport, EvalError> {
    fairness_report(
        FairnessDefinition::DemographicParity,
        model,
        dataset,
        group_feature,
        indices,
    )
}

pub fn equal_opportunity(
    model: &TrainedModel,
    dataset: &Dataset,
    group_feature: &str,
    indices: &[usize],
) -> Result<FairnessReport, EvalError> {
    fairness_report(
        FairnessDefinition::EqualOpportunity,
        model,
        dataset,
        group_feature,
        indices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use Decision::{Admit as A, Reject as R};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn demographic_parity_example() {
        // Group A: 3 of 4 admitted. Group B: 1 of 4 admitted.
        let groups = s(&["A", "A", "A", "A", "B", "B", "B", "B"]);
        let pred = [A, A, A, R, A, R, R, R];
        let actual = [A; 8];
        let r = group_rates(
            FairnessDefinition::DemographicParity,
            "g",
            &s(&["A", "B"]),
            &groups,
            &pred,
            &actual,
        )
        .unwrap();
        assert_eq!(r.per_group[0].rate, 0.75);
        assert_eq!(r.per_group[1].rate, 0.25);
        assert_eq!(r.max_disparity, 0.5);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn equal_opportunity_uses_admitted_only() {
        let groups = s(&["A", "A", "A", "B", "B", "B"]);
        let pred = [A, R, A, A, A, R];
        let actual = [A, A, R, A, R, R];
        let r = group_rates(
            FairnessDefinition::EqualOpportunity,
            "g",
            &s(&["A", "B"]),
            &groups,
            &pred,
            &actual,
        )
        .unwrap();
        assert_eq!((r.per_group[0].n, r.per_group[0].admitted), (2, 1));
        assert_eq!((r.per_group[1].n, r.per_group[1].admitted), (1, 1));
        assert_eq!(r.max_disparity, 0.5);
    }

    #[test]
    fn empty_denominators_are_excluded() {
        let groups = s(&["A", "A", "B"]);
        let r = group_rates(
            FairnessDefinition::EqualOpportunity,
            "g",
            &s(&["A", "B", "C"]),
            &groups,
            &[A, R, A],
            &[A, A, R],
        )
        .unwrap();
        assert_eq!(r.excluded_groups, ["B", "C"]);
        assert_eq!(r.max_disparity, 0.0);
        assert!(r.warnings[0].starts_with("single group"));
    }

    #[test]
    fn unlisted_groups_are_appended() {
        let r = group_rates(
            FairnessDefinition::DemographicParity,
            "g",
            &s(&["A"]),
            &s(&["Z", "A"]),
            &[A, R],
            &[A, A],
        )
        .unwrap();
        let names: Vec<&str> = r.per_group.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["A", "Z"]);
    }

    #[test]
    fn definition_names_round_trip() {
        for d in [
            FairnessDefinition::DemographicParity,
            FairnessDefinition::EqualOpportunity,
        ] {
            assert_eq!(FairnessDefinition::parse(d.as_str()), Some(d));
            assert!(!d.description().is_empty());
        }
        assert_eq!(
            FairnessDefinition::parse("equal-opportunity"),
            Some(FairnessDefinition::EqualOpportunity)
        );
    }
}
