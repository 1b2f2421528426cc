//! Bundled example inputs: the eighteen-feature admissions schema, a tier
//! table, an award lexicon and a synthetic applicant file.

use crate::ingest::{ingest_csv, Dataset, DerivationTables, IngestError};
use crate::schema::{load_schema, FeatureSchema};

pub const SCHEMA: &str = include_str!("../fixtures/schema.toml");
pub const TIERS: &str = include_str!("../fixtures/tiers.csv");
pub const AWARDS: &str = include_str!("../fixtures/awards.csv");
pub const APPLICANTS: &str = include_str!("../fixtures/applicants.csv");

pub fn schema() -> FeatureSchema {
    load_schema(SCHEMA).expect("bundled schema is valid")
}

/// The synthetic applicant file ingested with the bundled schema and tables.
pub fn dataset() -> Result<Dataset, IngestError> {
    ingest_csv(APPLICANTS, &schema(), &DerivationTables::bundled())
}
