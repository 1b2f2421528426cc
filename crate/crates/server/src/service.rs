//! Transport-free service layer. Every endpoint is one method returning the
//! JSON payload, so the HTTP router and the command-line tool produce
//! identical bytes for the same state.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use deliberate_core::derive::{AwardLexicon, TierTable};
use deliberate_core::evaluate::{self, FairnessDefinition};
use deliberate_core::explore;
use deliberate_core::ingest::{ingest_csv, DerivationTables};
use deliberate_core::schema::load_schema;
use deliberate_core::session::{
    FeatureDecision, Inclusion, PromptConfig, Role, SessionCommand, SessionError, SessionEvent, SessionSettings,
    SessionState,
};
use deliberate_core::trainer::{train_for_session, ModelSet, ModelVariant, TrainError};
use deliberate_core::{Dataset, Decision, Session, TrainedModel};

use crate::error::{ApiError, ErrorBody};
use crate::query::PersonaParams;
use crate::store::{PersistedState, SessionTokens, Store, StoredEvent, DEFAULT_SNAPSHOT_EVERY};

/// How a caller proves its role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    /// In-process caller holding the storage lock (the command-line tool).
    Local,
    Bearer(Option<String>),
}

impl Auth {
    pub fn bearer(token: &str) -> Auth {
        Auth::Bearer(Some(token.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub storage: PathBuf,
    pub snapshot_every: u64,
    /// Token accepted for `/admin/sessions` and as facilitator everywhere.
    pub admin_token: Option<String>,
    /// Defaults for sessions that do not override them.
    pub settings: SessionSettings,
    pub dataset_id: String,
}

impl ServiceConfig {
    pub fn new(storage: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            storage: storage.into(),
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            admin_token: None,
            settings: SessionSettings::default(),
            dataset_id: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainingStatus {
    Idle,
    Running { version: u64 },
    Done { model_ids: Vec<String> },
    Failed { error: ErrorBody },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPatch {
    pub threshold: Option<f64>,
    pub split_ratio: Option<f64>,
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub dataset_id: Option<String>,
    pub participants: Vec<String>,
    #[serde(default)]
    pub settings: SettingsPatch,
    /// Prompt overrides keyed by screen id.
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
    #[serde(default)]
    pub training_video: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceRequest {
    pub event: String,
    #[serde(default)]
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    #[serde(default)]
    pub expected_version: Option<u64>,
    pub selections: Vec<FeatureDecision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusRequest {
    #[serde(default)]
    pub tiebreaks: BTreeMap<String, Inclusion>,
    #[serde(default)]
    pub facilitator: Option<String>,
    #[serde(default)]
    pub expected_version: Option<u64>,
}

/// Raw inputs for registering a dataset.
#[derive(Debug, Clone, Default)]
pub struct IngestInput {
    pub data_csv: String,
    pub schema_toml: String,
    pub tiers_csv: Option<String>,
    pub awards_csv: Option<String>,
}

struct Inner {
    state: PersistedState,
    store: Store,
    training: BTreeMap<String, TrainingStatus>,
}

enum Undo {
    Dataset(String, Option<Dataset>),
    Session(String, Option<Box<Session>>, Option<SessionTokens>),
    Models(Vec<(String, Option<TrainedModel>)>),
}

impl Inner {
    /// Applies `event` and appends it to the log; on a storage error the
    /// in-memory state is rolled back.
    fn commit(&mut self, event: StoredEvent) -> Result<(), ApiError> {
        let undo = match &event {
            StoredEvent::DatasetRegistered { dataset_id, .. } => {
                Undo::Dataset(dataset_id.clone(), self.state.datasets.get(dataset_id).cloned())
            }
            StoredEvent::SessionCreated { session, .. } => Undo::Session(
                session.session_id.clone(),
                self.state.sessions.get(&session.session_id).cloned().map(Box::new),
                self.state.tokens.get(&session.session_id).cloned(),
            ),
            StoredEvent::SessionCommand { session_id, .. } => Undo::Session(
                session_id.clone(),
                self.state.sessions.get(session_id).cloned().map(Box::new),
                self.state.tokens.get(session_id).cloned(),
            ),
            StoredEvent::ModelsStored { models } => Undo::Models(
                models
                    .iter()
                    .map(|m| (m.model_id.clone(), self.state.models.get(&m.model_id).cloned()))
                    .collect(),
            ),
        };
        self.state.apply(&event)?;
        if let Err(e) = self.store.append(&event, &self.state) {
            fn restore<T>(map: &mut BTreeMap<String, T>, key: String, old: Option<T>) {
                match old {
                    Some(v) => {
                        map.insert(key, v);
                    }
                    None => {
                        map.remove(&key);
                    }
                }
            }
            match undo {
                Undo::Dataset(id, old) => restore(&mut self.state.datasets, id, old),
                Undo::Session(id, old, tokens) => {
                    restore(&mut self.state.sessions, id.clone(), old.map(|s| *s));
                    restore(&mut self.state.tokens, id, tokens);
                }
                Undo::Models(list) => {
                    for (id, old) in list {
                        restore(&mut self.state.models, id, old);
                    }
                }
            }
            return Err(e);
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<&Session, ApiError> {
        self.state
            .sessions
            .get(id)
            .ok_or_else(|| ApiError::not_found("UnknownSession", id))
    }

    fn dataset(&self, id: &str) -> Result<&Dataset, ApiError> {
        self.state
            .datasets
            .get(id)
            .ok_or_else(|| ApiError::not_found("UnknownDataset", id))
    }

    fn model(&self, id: &str) -> Result<&TrainedModel, ApiError> {
        self.state
            .models
            .get(id)
            .ok_or_else(|| ApiError::not_found("UnknownModel", id))
    }

    /// Dataset a model was trained on.
    fn model_dataset(&self, model: &TrainedModel) -> Result<&Dataset, ApiError> {
        if let Some(session) = model.session_id.as_deref().and_then(|s| self.state.sessions.get(s)) {
            return self.dataset(&session.dataset_id);
        }
        self.state
            .datasets
            .values()
            .find(|d| d.schema.fingerprint() == model.schema_fingerprint())
            .ok_or_else(|| ApiError::not_found("UnknownDataset", model.schema_fingerprint()))
    }

    fn training_status(&self, session: &Session) -> TrainingStatus {
        if session.state >= SessionState::ModelsTrained {
            return TrainingStatus::Done {
                model_ids: session.models.model_ids(),
            };
        }
        self.training
            .get(&session.session_id)
            .cloned()
            .unwrap_or(TrainingStatus::Idle)
    }
}

struct TrainingJob {
    session_id: String,
    version: u64,
    dataset: Dataset,
    session: Session,
    reuse: Option<TrainedModel>,
}

enum Prepared {
    Finished(TrainingStatus),
    Job(Box<TrainingJob>),
}

pub struct Service {
    config: ServiceConfig,
    inner: Mutex<Inner>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, ApiError> {
    serde_json::to_value(v).map_err(|e| ApiError::new("Internal", e.to_string()))
}

fn with_fields(mut payload: Value, fields: &[(&str, Value)]) -> Value {
    if let Value::Object(map) = &mut payload {
        for (k, v) in fields {
            map.insert((*k).to_string(), v.clone());
        }
    }
    payload
}

fn new_token() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl Service {
    pub fn open(config: ServiceConfig) -> Result<Service, ApiError> {
        config.settings.validate()?;
        let (store, state) = Store::open(&config.storage, config.snapshot_every)?;
        Ok(Service {
            config,
            inner: Mutex::new(Inner {
                state,
                store,
                training: BTreeMap::new(),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// A copy of the full in-memory state.
    pub fn state(&self) -> PersistedState {
        self.lock().state.clone()
    }

    /// Writes a snapshot so the next start does not replay the log.
    pub fn flush(&self) -> Result<(), ApiError> {
        let mut inner = self.lock();
        let Inner { state, store, .. } = &mut *inner;
        store.snapshot(state)
    }

    fn require_admin(&self, inner: &Inner, auth: &Auth) -> Result<(), ApiError> {
        match auth {
            Auth::Local => Ok(()),
            Auth::Bearer(None) => Err(ApiError::unauthorized()),
            Auth::Bearer(Some(t)) => {
                if self.config.admin_token.as_deref() == Some(t.as_str()) {
                    Ok(())
                } else if inner
                    .state
                    .tokens
                    .values()
                    .any(|k| &k.participant == t || &k.facilitator == t)
                {
                    Err(ApiError::forbidden("this operation"))
                } else {
                    Err(ApiError::unauthorized())
                }
            }
        }
    }

    fn role_in(&self, inner: &Inner, auth: &Auth, session_id: &str) -> Result<Role, ApiError> {
        inner.session(session_id)?;
        let token = match auth {
            Auth::Local => return Ok(Role::Facilitator),
            Auth::Bearer(None) => return Err(ApiError::unauthorized()),
            Auth::Bearer(Some(t)) => t,
        };
        if self.config.admin_token.as_deref() == Some(token.as_str()) {
            return Ok(Role::Facilitator);
        }
        match inner.state.tokens.get(session_id) {
            Some(k) if &k.facilitator == token => Ok(Role::Facilitator),
            Some(k) if &k.participant == token => Ok(Role::Participant),
            _ => Err(ApiError::unauthorized()),
        }
    }

    fn require_facilitator(&self, inner: &Inner, auth: &Auth, session_id: &str, what: &str) -> Result<(), ApiError> {
        match self.role_in(inner, auth, session_id)? {
            Role::Facilitator => Ok(()),
            Role::Participant => Err(ApiError::forbidden(what)),
        }
    }

    /// Any session that owns or references the model grants access.
    fn authorize_model(&self, inner: &Inner, auth: &Auth, model_id: &str) -> Result<(), ApiError> {
        let model = inner.model(model_id)?;
        if matches!(auth, Auth::Local) {
            return Ok(());
        }
        let mut last = ApiError::unauthorized();
        for session in inner.state.sessions.values() {
            let related = model.session_id.as_deref() == Some(session.session_id.as_str())
                || session.models.model_ids().iter().any(|m| m == model_id);
            if related {
                match self.role_in(inner, auth, &session.session_id) {
                    Ok(_) => return Ok(()),
                    Err(e) => last = e,
                }
            }
        }
        if let Auth::Bearer(Some(t)) = auth {
            if self.config.admin_token.as_deref() == Some(t.as_str()) {
                return Ok(());
            }
        }
        Err(last)
    }

    pub fn health(&self) -> Value {
        let inner = self.lock();
        json!({
            "status": "ok",
            "datasets": inner.state.datasets.len(),
            "sessions": inner.state.sessions.len(),
            "models": inner.state.models.len(),
            "events": inner.store.seq(),
        })
    }

    fn dataset_summary(dataset_id: &str, dataset: &Dataset) -> Value {
        let outcomes = dataset.outcomes();
        let admit = outcomes.iter().filter(|d| **d == Decision::Admit).count();
        json!({
            "dataset_id": dataset_id,
            "records": dataset.len(),
            "dropped": dataset.dropped_count,
            "imputed_cells": dataset.imputed_cell_count(),
            "features": dataset.schema.features.len(),
            "encoded_width": dataset.schema.encoded_width(),
            "schema_fingerprint": dataset.schema.fingerprint(),
            "outcomes": {"admit": admit, "reject": outcomes.len() - admit},
        })
    }

    /// Parses, derives and registers a dataset under `dataset_id`.
    /// Registering identical content again is a no-op.
    pub fn ingest(&self, auth: &Auth, dataset_id: &str, input: &IngestInput) -> Result<Value, ApiError> {
        let schema = load_schema(&input.schema_toml)?;
        let bundled = DerivationTables::bundled();
        let tables = DerivationTables {
            tiers: match &input.tiers_csv {
                Some(t) => TierTable::from_csv(t)?,
                None => bundled.tiers,
            },
            awards: match &input.awards_csv {
                Some(a) => AwardLexicon::from_csv(a)?,
                None => bundled.awards,
            },
        };
        let dataset = ingest_csv(&input.data_csv, &schema, &tables)?;
        self.register_dataset(auth, dataset_id, dataset)
    }

    pub fn register_dataset(&self, auth: &Auth, dataset_id: &str, dataset: Dataset) -> Result<Value, ApiError> {
        if dataset_id.trim().is_empty() {
            return Err(ApiError::parse("dataset id must be non-empty"));
        }
        let mut inner = self.lock();
        self.require_admin(&inner, auth)?;
        let summary = Self::dataset_summary(dataset_id, &dataset);
        if inner.state.datasets.get(dataset_id) != Some(&dataset) {
            inner.commit(StoredEvent::DatasetRegistered {
                dataset_id: dataset_id.to_string(),
                dataset: Box::new(dataset),
            })?;
        }
        Ok(summary)
    }

    pub fn datasets(&self, auth: &Auth) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.require_admin(&inner, auth)?;
        let list: Vec<Value> = inner
            .state
            .datasets
            .iter()
            .map(|(id, d)| Self::dataset_summary(id, d))
            .collect();
        Ok(json!({ "datasets": list }))
    }

    pub fn create_session(&self, auth: &Auth, req: CreateSessionRequest) -> Result<Value, ApiError> {
        let mut inner = self.lock();
        self.require_admin(&inner, auth)?;
        let dataset_id = req.dataset_id.unwrap_or_else(|| self.config.dataset_id.clone());
        let session_id = req.session_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        if session_id.trim().is_empty() || session_id.contains('/') {
            return Err(ApiError::parse("session id must be non-empty and contain no `/`"));
        }
        let defaults = &self.config.settings;
        let settings = SessionSettings {
            threshold: req.settings.threshold.unwrap_or(defaults.threshold),
            split_ratio: req.settings.split_ratio.unwrap_or(defaults.split_ratio),
            split_seed: req.settings.split_seed.unwrap_or(defaults.split_seed),
        };
        let prompts = PromptConfig {
            prompts: req.prompts,
            training_video: req.training_video,
        };
        let session = Session::create(
            session_id.clone(),
            dataset_id.clone(),
            inner.state.datasets.get(&dataset_id),
            &req.participants,
            prompts,
            settings,
        )?;
        let tokens = SessionTokens {
            participant: new_token(),
            facilitator: new_token(),
        };
        let payload = json!({
            "session": to_value(&session)?,
            "participant_token": tokens.participant,
            "facilitator_token": tokens.facilitator,
        });
        inner.commit(StoredEvent::SessionCreated {
            session: Box::new(session),
            tokens,
        })?;
        Ok(payload)
    }

    pub fn sessions(&self, auth: &Auth) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.require_admin(&inner, auth)?;
        let list: Vec<Value> = inner
            .state
            .sessions
            .values()
            .map(|s| {
                json!({
                    "session_id": s.session_id,
                    "dataset_id": s.dataset_id,
                    "state": s.state,
                    "participants": s.participants,
                    "version": s.version,
                })
            })
            .collect();
        Ok(json!({ "sessions": list }))
    }

    /// Session tokens, for the facilitator's command-line tool.
    pub fn tokens(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.require_admin(&inner, auth)?;
        inner.session(session_id)?;
        to_value(&inner.state.tokens.get(session_id))
    }

    pub fn session(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        to_value(inner.session(session_id)?)
    }

    pub fn advance(&self, auth: &Auth, session_id: &str, req: AdvanceRequest) -> Result<Value, ApiError> {
        let mut inner = self.lock();
        let role = self.role_in(&inner, auth, session_id)?;
        let kind = deliberate_core::session::EventKind::parse(&req.event)
            .ok_or_else(|| ApiError::parse(format!("unknown event `{}`", req.event)))?;
        let transition = SessionEvent::simple(kind).ok_or_else(|| {
            ApiError::parse(format!(
                "`{kind}` carries a payload; use the consensus or train endpoint"
            ))
        })?;
        inner.commit(StoredEvent::SessionCommand {
            session_id: session_id.to_string(),
            command: SessionCommand::Advance { role, transition },
            expected_version: req.expected_version,
        })?;
        let s = inner.session(session_id)?;
        Ok(json!({"session_id": s.session_id, "state": s.state, "version": s.version}))
    }

    fn exploration_dataset<'a>(
        &self,
        inner: &'a Inner,
        auth: &Auth,
        session_id: &str,
    ) -> Result<&'a Dataset, ApiError> {
        self.role_in(inner, auth, session_id)?;
        let session = inner.session(session_id)?;
        if session.state == SessionState::Created {
            return Err(SessionError::WrongState {
                expected: "DataExploration or later".into(),
                actual: session.state,
            }
            .into());
        }
        inner.dataset(&session.dataset_id)
    }

    pub fn explore_feature(
        &self,
        auth: &Auth,
        session_id: &str,
        feature: &str,
        bins: Option<usize>,
    ) -> Result<Value, ApiError> {
        let inner = self.lock();
        let dataset = self.exploration_dataset(&inner, auth, session_id)?;
        let summary = match bins {
            Some(b) => explore::univariate_summary_with_bins(dataset, feature, b)?,
            None => explore::univariate_summary(dataset, feature)?,
        };
        to_value(&summary)
    }

    pub fn explore_pair(&self, auth: &Auth, session_id: &str, a: &str, b: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        let dataset = self.exploration_dataset(&inner, auth, session_id)?;
        to_value(&explore::bivariate_view(dataset, a, b)?)
    }

    pub fn features(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        let session = inner.session(session_id)?;
        let dataset = inner.dataset(&session.dataset_id)?;
        let incomplete = session.incomplete_participants();
        Ok(json!({
            "session_id": session.session_id,
            "features": to_value(&dataset.schema.features)?,
            "selections": to_value(&session.selections)?,
            "incomplete_participants": incomplete,
            "version": session.version,
        }))
    }

    /// Records a batch of selections atomically: either every decision is
    /// stored or none is.
    pub fn record_selections(&self, auth: &Auth, session_id: &str, req: SelectionRequest) -> Result<Value, ApiError> {
        let mut inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        if req.selections.is_empty() {
            return Err(ApiError::parse("no selections given"));
        }
        let commands: Vec<(SessionCommand, Option<u64>)> = req
            .selections
            .into_iter()
            .enumerate()
            .map(|(i, decision)| {
                (
                    SessionCommand::RecordSelection { decision },
                    if i == 0 { req.expected_version } else { None },
                )
            })
            .collect();
        let mut scratch = inner.session(session_id)?.clone();
        for (command, expected) in &commands {
            scratch.apply(command, *expected)?;
        }
        let mut acks = Vec::with_capacity(commands.len());
        for (command, expected_version) in commands {
            let SessionCommand::RecordSelection { decision } = &command else {
                unreachable!("only selections are batched")
            };
            let (pid, feature) = (decision.participant_id.clone(), decision.feature.clone());
            inner.commit(StoredEvent::SessionCommand {
                session_id: session_id.to_string(),
                command,
                expected_version,
            })?;
            let s = inner.session(session_id)?;
            acks.push(json!({
                "participant_id": pid,
                "feature": feature,
                "participant_complete": s.is_complete(&pid),
                "version": s.version,
            }));
        }
        let s = inner.session(session_id)?;
        Ok(json!({"session_id": session_id, "version": s.version, "acks": acks}))
    }

    pub fn deliberation_csv(&self, auth: &Auth, session_id: &str) -> Result<String, ApiError> {
        let inner = self.lock();
        self.require_facilitator(&inner, auth, session_id, "the deliberation export")?;
        Ok(inner.session(session_id)?.export_deliberation_file()?.to_csv())
    }

    pub fn deliberation_json(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.require_facilitator(&inner, auth, session_id, "the deliberation export")?;
        to_value(&inner.session(session_id)?.export_deliberation_file()?)
    }

    pub fn tally(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        let session = inner.session(session_id)?;
        let records = match &session.consensus {
            Some(c) => c.clone(),
            None => session.tally_all()?,
        };
        let ties: Vec<&str> = records
            .iter()
            .filter(|r| r.is_tied() && r.outcome.is_none())
            .map(|r| r.feature.as_str())
            .collect();
        Ok(json!({
            "session_id": session_id,
            "finalized": session.consensus.is_some(),
            "records": to_value(&records)?,
            "unresolved_ties": ties,
        }))
    }

    pub fn finalize(&self, auth: &Auth, session_id: &str, req: ConsensusRequest) -> Result<Value, ApiError> {
        let mut inner = self.lock();
        self.require_facilitator(&inner, auth, session_id, "finalizing the group selection")?;
        inner.commit(StoredEvent::SessionCommand {
            session_id: session_id.to_string(),
            command: SessionCommand::Advance {
                role: Role::Facilitator,
                transition: SessionEvent::FinalizeGroup {
                    tiebreaks: req.tiebreaks,
                    facilitator: req.facilitator.unwrap_or_else(|| "facilitator".into()),
                },
            },
            expected_version: req.expected_version,
        })?;
        let s = inner.session(session_id)?;
        Ok(json!({
            "session_id": session_id,
            "state": s.state,
            "version": s.version,
            "consensus": to_value(&s.consensus)?,
            "group_features": s.group_features(),
        }))
    }

    fn prepare_training(&self, inner: &mut Inner, auth: &Auth, session_id: &str) -> Result<Prepared, ApiError> {
        self.require_facilitator(inner, auth, session_id, "training")?;
        let session = inner.session(session_id)?;
        let status = inner.training_status(session);
        if matches!(status, TrainingStatus::Done { .. } | TrainingStatus::Running { .. }) {
            return Ok(Prepared::Finished(status));
        }
        if session.state != SessionState::GroupFinalized {
            return Err(TrainError::SessionNotReady(format!(
                "state is {}, training needs GroupFinalized",
                session.state
            ))
            .into());
        }
        let dataset = inner.dataset(&session.dataset_id)?.clone();
        let reuse = inner
            .state
            .models
            .values()
            .find(|m| {
                m.variant == ModelVariant::AllFeatures
                    && m.schema_fingerprint() == dataset.schema.fingerprint()
                    && m.session_id
                        .as_deref()
                        .and_then(|s| inner.state.sessions.get(s))
                        .is_some_and(|s| s.dataset_id == session.dataset_id)
            })
            .cloned();
        let job = TrainingJob {
            session_id: session_id.to_string(),
            version: session.version,
            dataset,
            session: session.clone(),
            reuse,
        };
        inner
            .training
            .insert(session_id.to_string(), TrainingStatus::Running { version: job.version });
        Ok(Prepared::Job(Box::new(job)))
    }

    fn finish_training(&self, job: &TrainingJob, result: Result<ModelSet, TrainError>) -> TrainingStatus {
        let mut inner = self.lock();
        let outcome = result.map_err(ApiError::from).and_then(|set| {
            inner.commit(StoredEvent::ModelsStored { models: set.models })?;
            inner.commit(StoredEvent::SessionCommand {
                session_id: job.session_id.clone(),
                command: SessionCommand::Advance {
                    role: Role::Facilitator,
                    transition: SessionEvent::ModelsTrained {
                        registry: set.registry.clone(),
                    },
                },
                expected_version: Some(job.version),
            })?;
            Ok(set.registry.model_ids())
        });
        let status = match outcome {
            Ok(model_ids) => TrainingStatus::Done { model_ids },
            Err(e) => TrainingStatus::Failed { error: e.body() },
        };
        inner.training.insert(job.session_id.clone(), status.clone());
        status
    }

    fn status_payload(session_id: &str, status: &TrainingStatus) -> Result<Value, ApiError> {
        Ok(with_fields(to_value(status)?, &[("session_id", json!(session_id))]))
    }

    /// Starts training on a background thread and returns immediately.
    /// Repeating the call while running or after completion returns the
    /// current status without training again.
    pub fn start_training(self: &Arc<Self>, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let prepared = {
            let mut inner = self.lock();
            self.prepare_training(&mut inner, auth, session_id)?
        };
        match prepared {
            Prepared::Finished(status) => Self::status_payload(session_id, &status),
            Prepared::Job(job) => {
                let status = TrainingStatus::Running { version: job.version };
                let service = Arc::clone(self);
                std::thread::spawn(move || {
                    let result = train_for_session(&job.dataset, &job.session, job.reuse.as_ref());
                    service.finish_training(&job, result);
                });
                Self::status_payload(session_id, &status)
            }
        }
    }

    /// Trains in the calling thread. A failed run is reported as the error.
    pub fn train_blocking(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let prepared = {
            let mut inner = self.lock();
            self.prepare_training(&mut inner, auth, session_id)?
        };
        let status = match prepared {
            Prepared::Finished(status) => status,
            Prepared::Job(job) => {
                let result = train_for_session(&job.dataset, &job.session, job.reuse.as_ref());
                self.finish_training(&job, result)
            }
        };
        if let TrainingStatus::Failed { error } = status {
            return Err(error.into());
        }
        Self::status_payload(session_id, &status)
    }

    pub fn models(&self, auth: &Auth, session_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        let session = inner.session(session_id)?;
        let mut models = Vec::new();
        for id in session.models.model_ids() {
            let m = inner.model(&id)?;
            models.push(json!({
                "model_id": m.model_id,
                "variant": to_value(&m.variant)?,
                "selected_features": m.selected_features,
                "threshold": m.threshold,
                "train_size": m.split.train.len(),
                "test_size": m.split.test.len(),
                "ridge_fallback": m.ridge_fallback,
                "condition": m.condition,
            }));
        }
        Ok(json!({
            "session_id": session_id,
            "training": to_value(&inner.training_status(session))?,
            "registry": to_value(&session.models)?,
            "models": models,
        }))
    }

    pub fn weights(&self, auth: &Auth, model_id: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.authorize_model(&inner, auth, model_id)?;
        let m = inner.model(model_id)?;
        Ok(json!({
            "model_id": m.model_id,
            "session_id": m.session_id,
            "variant": to_value(&m.variant)?,
            "selected_features": m.selected_features,
            "intercept": m.intercept,
            "threshold": m.threshold,
            "weights": to_value(&m.weights)?,
            "reference_levels": to_value(&m.encoding.reference_levels)?,
            "removed_columns": to_value(&m.encoding.removed)?,
            "ridge_fallback": m.ridge_fallback,
            "condition": m.condition,
        }))
    }

    pub fn compare(&self, auth: &Auth, model_id: &str, other: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.authorize_model(&inner, auth, model_id)?;
        self.authorize_model(&inner, auth, other)?;
        to_value(&evaluate::compare_weights(inner.model(model_id)?, inner.model(other)?)?)
    }

    fn eval_indices(
        model: &TrainedModel,
        dataset: &Dataset,
        on: Option<&str>,
    ) -> Result<(Vec<usize>, &'static str), ApiError> {
        match on.unwrap_or("test") {
            "test" => Ok((model.split.test.clone(), "test")),
            "train" => Ok((model.split.train.clone(), "train")),
            "all" => Ok(((0..dataset.len()).collect(), "all")),
            other => Err(ApiError::parse(format!(
                "`on` must be test, train or all, got `{other}`"
            ))),
        }
    }

    pub fn performance(&self, auth: &Auth, model_id: &str, on: Option<&str>) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.authorize_model(&inner, auth, model_id)?;
        let model = inner.model(model_id)?;
        let dataset = inner.model_dataset(model)?;
        let (indices, label) = Self::eval_indices(model, dataset, on)?;
        let report = evaluate::evaluate_performance(model, dataset, &indices)?;
        Ok(with_fields(
            to_value(&report)?,
            &[("model_id", json!(model_id)), ("evaluated_on", json!(label))],
        ))
    }

    pub fn fairness(
        &self,
        auth: &Auth,
        model_id: &str,
        feature: Option<&str>,
        definition: Option<&str>,
        on: Option<&str>,
    ) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.authorize_model(&inner, auth, model_id)?;
        let feature = feature
            .filter(|f| !f.trim().is_empty())
            .ok_or_else(|| ApiError::parse("`feature` is required"))?;
        let definition = match definition {
            None => FairnessDefinition::DemographicParity,
            Some(d) => FairnessDefinition::parse(d)
                .ok_or_else(|| ApiError::parse(format!("unknown fairness definition `{d}`")))?,
        };
        let model = inner.model(model_id)?;
        let dataset = inner.model_dataset(model)?;
        let (indices, label) = Self::eval_indices(model, dataset, on)?;
        let report = evaluate::fairness_report(definition, model, dataset, feature, &indices)?;
        Ok(with_fields(
            to_value(&report)?,
            &[("model_id", json!(model_id)), ("evaluated_on", json!(label))],
        ))
    }

    pub fn personas(&self, auth: &Auth, model_id: &str, params: &PersonaParams) -> Result<Value, ApiError> {
        let query = params.to_query()?;
        let inner = self.lock();
        self.authorize_model(&inner, auth, model_id)?;
        let model = inner.model(model_id)?;
        let dataset = inner.model_dataset(model)?;
        let page = evaluate::query_personas(model, dataset, &query)?;
        Ok(with_fields(to_value(&page)?, &[("model_id", json!(model_id))]))
    }

    pub fn prompt(&self, auth: &Auth, session_id: &str, screen: &str) -> Result<Value, ApiError> {
        let inner = self.lock();
        self.role_in(&inner, auth, session_id)?;
        let session = inner.session(session_id)?;
        let prompt = session.reflective_prompt(screen)?;
        let mut payload = json!({"session_id": session_id, "screen": screen, "prompt": prompt});
        if screen == "training" {
            payload["training_video"] = json!(session.prompts.training_video);
        }
        Ok(payload)
    }

    /// Drops every dataset, session and model.
    pub fn reset(&self, auth: &Auth) -> Result<Value, ApiError> {
        let mut inner = self.lock();
        self.require_admin(&inner, auth)?;
        let removed = json!({
            "datasets": inner.state.datasets.len(),
            "sessions": inner.state.sessions.len(),
            "models": inner.state.models.len(),
        });
        inner.store.wipe()?;
        inner.state = PersistedState::default();
        inner.training.clear();
        Ok(json!({"reset": true, "removed": removed}))
    }
}
