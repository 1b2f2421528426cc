use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use super::{predictions, EvalError};
use crate::ingest::{Dataset, Decision};
use crate::trainer::TrainedModel;

/// Counts with admit as the positive class. A false positive is an
/// applicant the model admits whom the committee rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// A ratio that may be undefined because its denominator is zero.
/// Serializes as a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn ratio(num: usize, den: usize) -> Metric {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => serializer.serialize_f64(*v),
            Metric::Undefined => serializer.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MetricVisitor;
        impl Visitor<'_> for MetricVisitor {
            type Value = Metric;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"undefined\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Metric, E> {
                Ok(Metric::Value(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Metric, E> {
                Ok(Metric::Value(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Metric, E> {
                Ok(Metric::Value(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Metric, E> {
                if v == "undefined" {
                    Ok(Metric::Undefined)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(MetricVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub matrix: ConfusionMatrix,
    pub n: usize,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
}

pub fn confusion(predictions: &[Decision], actuals: &[Decision]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != actuals.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            actuals: actuals.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut m = ConfusionMatrix::default();
    for (p, a) in predictions.iter().zip(actuals) {
        match (p, a) {
            (Decision::Admit, Decision::Admit) => m.tp += 1,
            (Decision::Admit, Decision::Reject) => m.fp += 1,
            (Decision::Reject, Decision::Reject) => m.tn += 1,
            (Decision::Reject, Decision::Admit) => m.fn_ += 1,
        }
    }
    Ok(m)
}

pub fn metrics(matrix: ConfusionMatrix) -> PerformanceReport {
    let n = matrix.total();
    PerformanceReport {
        matrix,
        n,
        accuracy: Metric::ratio(matrix.tp + matrix.tn, n),
        precision: Metric::ratio(matrix.tp, matrix.tp + matrix.fp),
        recall: Metric::ratio(matrix.tp, matrix.tp + matrix.fn_),
    }
}

/// Confusion matrix and metrics for `model` over `indices`.
pub fn evaluate_performance(
    model: &TrainedModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<PerformanceReport, EvalError> {
    let (predicted, actual) = predictions(model, dataset, indices)?;
    Ok(metrics(confusion(&predicted, &actual)?))
}
