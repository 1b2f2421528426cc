use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub feature: String,
    pub column: String,
    /// `None` when the model has no such column.
    pub weight_a: Option<f64>,
    pub weight_b: Option<f64>,
    pub selected_a: bool,
    pub selected_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightComparison {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<WeightRow>,
}

/// Side-by-side weights for two models trained over the same schema. Rows
/// follow schema order; within a feature, columns of `a` come first.
pub fn compare_weights(a: &TrainedModel, b: &TrainedModel) -> Result<WeightComparison, EvalError> {
    if a.schema_fingerprint() != b.schema_fingerprint() {
        return Err(EvalError::SchemaMismatch);
    }
    let mut rows = Vec::new();
    for feature in &a.encoding.schema_order {
        let mut columns: Vec<&str> = Vec::new();
        for w in a.weights.iter().chain(&b.weights).filter(|w| &w.feature == feature) {
            if !columns.contains(&w.column.as_str()) {
                columns.push(&w.column);
            }
        }
        for column in columns {
            rows.push(WeightRow {
                feature: feature.clone(),
                column: column.to_string(),
                weight_a: a.weight(column),
                weight_b: b.weight(column),
                selected_a: a.selected_features.contains(feature),
                selected_b: b.selected_features.contains(feature),
            });
        }
    }
    Ok(WeightComparison {
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        rows,
    })
}
