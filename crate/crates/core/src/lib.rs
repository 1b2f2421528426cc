//! Core of the deliberation toolkit: schema-driven ingestion of historical
//! selection decisions, exploration views, linear scoring models, model
//! evaluation (performance, fairness, personas, weight comparison) and the
//! facilitated session workflow.

pub mod derive;
pub mod encode;
pub mod evaluate;
pub mod explore;
pub mod fixtures;
pub mod ingest;
pub mod schema;
pub mod session;
pub mod trainer;

pub use ingest::{ApplicantRecord, Dataset, Decision, DerivationTables, Value};
pub use schema::{FeatureSchema, FeatureSpec};
pub use session::Session;
pub use trainer::TrainedModel;
