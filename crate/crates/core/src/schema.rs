//! Declarative feature schema.
//!
//! A schema is a TOML document naming the outcome column and listing every
//! feature in display order. Each feature has a kind, a derivation rule that
//! says how it is computed from the raw CSV columns, a sensitivity flag and a
//! free-text unit. See `docs/schema.md` for the full grammar.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Level name used when a categorical value is missing and gets imputed.
pub const UNKNOWN_LEVEL: &str = "Unknown";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("schema does not parse: {0}")]
    Parse(String),
    #[error("schema lists no features")]
    EmptySchema,
    #[error("feature `{0}` is declared more than once")]
    DuplicateFeature(String),
    #[error("feature `{feature}` uses unknown derivation `{derivation}`")]
    UnknownDerivation { feature: String, derivation: String },
    #[error("feature `{feature}` is invalid: {reason}")]
    InvalidFeature { feature: String, reason: String },
}

impl SchemaError {
    pub fn code(&self) -> &'static str {
        match self {
            SchemaError::Parse(_) => "ParseError",
            SchemaError::EmptySchema => "EmptySchema",
            SchemaError::DuplicateFeature(_) => "DuplicateFeature",
            SchemaError::UnknownDerivation { .. } => "UnknownDerivation",
            SchemaError::InvalidFeature { .. } => "InvalidFeature",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Binary,
    Categorical { levels: Vec<String> },
}

impl FeatureKind {
    /// Number of design-matrix columns this kind expands to before
    /// degenerate columns are dropped.
    pub fn encoded_width(&self) -> usize {
        match self {
            FeatureKind::Numeric | FeatureKind::Binary => 1,
            FeatureKind::Categorical { levels } => levels.len().saturating_sub(1),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, FeatureKind::Numeric)
    }

    /// Level names for grouped views. Binary features use `no`/`yes`.
    pub fn levels(&self) -> Option<Vec<String>> {
        match self {
            FeatureKind::Numeric => None,
            FeatureKind::Binary => Some(vec!["no".to_string(), "yes".to_string()]),
            FeatureKind::Categorical { levels } => Some(levels.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AwardCategory {
    Arts,
    Competition,
    Leadership,
    Research,
    Scholastic,
    Service,
}

impl AwardCategory {
    pub const ALL: [AwardCategory; 6] = [
        AwardCategory::Arts,
        AwardCategory::Competition,
        AwardCategory::Leadership,
        AwardCategory::Research,
        AwardCategory::Scholastic,
        AwardCategory::Service,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AwardCategory::Arts => "arts",
            AwardCategory::Competition => "competition",
            AwardCategory::Leadership => "leadership",
            AwardCategory::Research => "research",
            AwardCategory::Scholastic => "scholastic",
            AwardCategory::Service => "service",
        }
    }

    pub fn parse(text: &str) -> Option<AwardCategory> {
        let text = text.trim().to_ascii_lowercase();
        AwardCategory::ALL.into_iter().find(|c| c.as_str() == text)
    }
}

impl fmt::Display for AwardCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a feature value is computed from raw CSV columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Derivation {
    /// Copy one column as-is.
    Direct { column: String },
    /// Parent/guardian education columns; yes when every reported level is
    /// below a bachelor's degree.
    FirstGeneration { columns: Vec<String> },
    /// A column of `start/end` ISO date pairs separated by `;`.
    WorkExperience { column: String },
    /// Institution name looked up in the tier table.
    InstitutionTier { column: String },
    /// Up to three free-text award columns coded through the award lexicon.
    AwardCount {
        category: AwardCategory,
        columns: Vec<String>,
    },
    /// A `;`-separated list of held degrees; yes when `level` is present.
    DegreeFlag { level: String, column: String },
}

const DERIVATION_NAMES: [&str; 6] = [
    "direct",
    "first_generation",
    "work_experience",
    "institution_tier",
    "award_count",
    "degree_flag",
];

impl Derivation {
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Derivation::Direct { column }
            | Derivation::WorkExperience { column }
            | Derivation::InstitutionTier { column }
            | Derivation::DegreeFlag { column, .. } => vec![column.as_str()],
            Derivation::FirstGeneration { columns } | Derivation::AwardCount { columns, .. } => {
                columns.iter().map(String::as_str).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub derivation: Derivation,
    #[serde(default)]
    pub sensitive: bool,
    #[serde(default)]
    pub unit: String,
}

impl FeatureSpec {
    fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |reason: &str| SchemaError::InvalidFeature {
            feature: self.name.clone(),
            reason: reason.to_string(),
        };
        if let FeatureKind::Categorical { levels } = &self.kind {
            if levels.len() < 2 {
                return Err(invalid("categorical features need at least two levels"));
            }
            let unique: BTreeSet<&str> = levels.iter().map(|l| l.trim()).collect();
            if unique.len() != levels.len() {
                return Err(invalid("categorical levels must be unique"));
            }
            if levels.iter().any(|l| l.trim().is_empty()) {
                return Err(invalid("categorical levels must be non-empty"));
            }
        }
        let columns = self.derivation.columns();
        if columns.is_empty() || columns.iter().any(|c| c.trim().is_empty()) {
            return Err(invalid("derivation must name at least one non-empty column"));
        }
        let compatible = matches!(
            (&self.derivation, &self.kind),
            (Derivation::Direct { .. }, _)
                | (
                    Derivation::FirstGeneration { .. } | Derivation::DegreeFlag { .. },
                    FeatureKind::Binary
                )
                | (
                    Derivation::WorkExperience { .. }
                        | Derivation::InstitutionTier { .. }
                        | Derivation::AwardCount { .. },
                    FeatureKind::Numeric
                )
        );
        if !compatible {
            return Err(invalid("derivation does not produce values of the declared kind"));
        }
        if let Derivation::AwardCount { columns, .. } = &self.derivation {
            if columns.len() > 3 {
                return Err(invalid("award counts read at most three text fields"));
            }
        }
        if let Derivation::DegreeFlag { level, .. } = &self.derivation {
            if level.trim().is_empty() {
                return Err(invalid("degree flag needs a degree level"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub outcome_column: String,
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(outcome_column: impl Into<String>, features: Vec<FeatureSpec>) -> Result<Self, SchemaError> {
        let schema = FeatureSchema {
            outcome_column: outcome_column.into(),
            features,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.features.is_empty() {
            return Err(SchemaError::EmptySchema);
        }
        if self.outcome_column.trim().is_empty() {
            return Err(SchemaError::Parse("outcome_column must be non-empty".into()));
        }
        let mut seen = BTreeSet::new();
        for feature in &self.features {
            if feature.name.trim().is_empty() {
                return Err(SchemaError::InvalidFeature {
                    feature: feature.name.clone(),
                    reason: "feature names must be non-empty".into(),
                });
            }
            if !seen.insert(feature.name.as_str()) {
                return Err(SchemaError::DuplicateFeature(feature.name.clone()));
            }
            if feature.name == self.outcome_column {
                return Err(SchemaError::InvalidFeature {
                    feature: feature.name.clone(),
                    reason: "the outcome column cannot also be a feature".into(),
                });
            }
            feature.validate()?;
        }
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Column count of the full design matrix, before degenerate columns are
    /// removed.
    pub fn encoded_width(&self) -> usize {
        self.features.iter().map(|f| f.kind.encoded_width()).sum()
    }

    /// Stable hex digest of the schema, used to check that two models were
    /// built over the same feature set.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    outcome_column: String,
    #[serde(default)]
    features: Vec<RawFeature>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    name: String,
    kind: String,
    #[serde(default)]
    levels: Vec<String>,
    derivation: toml::Value,
    #[serde(default)]
    sensitive: bool,
    #[serde(default)]
    unit: String,
}

/// Parses and validates a schema document.
pub fn load_schema(config_text: &str) -> Result<FeatureSchema, SchemaError> {
    let raw: RawSchema = toml::from_str(config_text).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let mut features = Vec::with_capacity(raw.features.len());
    for f in raw.features {
        let kind = match f.kind.trim() {
            "numeric" => FeatureKind::Numeric,
            "binary" => FeatureKind::Binary,
            "categorical" => FeatureKind::Categorical {
                levels: f.levels.iter().map(|l| l.trim().to_string()).collect(),
            },
            other => {
                return Err(SchemaError::InvalidFeature {
                    feature: f.name,
                    reason: format!("unknown kind `{other}`"),
                })
            }
        };
        if !matches!(kind, FeatureKind::Categorical { .. }) && !f.levels.is_empty() {
            return Err(SchemaError::InvalidFeature {
                feature: f.name,
                reason: "only categorical features declare levels".into(),
            });
        }
        let derivation_name = f
            .derivation
            .get("kind")
            .and_then(toml::Value::as_str)
            .ok_or_else(|| SchemaError::Parse(format!("feature `{}`: derivation needs a `kind`", f.name)))?;
        if !DERIVATION_NAMES.contains(&derivation_name) {
            return Err(SchemaError::UnknownDerivation {
                feature: f.name,
                derivation: derivation_name.to_string(),
            });
        }
        let derivation = Derivation::deserialize(f.derivation.clone())
            .map_err(|e| SchemaError::Parse(format!("feature `{}`: {e}", f.name)))?;
        features.push(FeatureSpec {
            name: f.name,
            kind,
            derivation,
            sensitive: f.sensitive,
            unit: f.unit,
        });
    }
    FeatureSchema::new(raw.outcome_column, features)
}
