//! Deliberation sessions.
//!
//! A session walks a fixed state graph:
//!
//! ```text
//! Created -> DataExploration -> IndividualSelection -> GroupDeliberation
//!         -> GroupFinalized -> ModelsTrained -> Evaluation -> Completed
//! ```
//!
//! with one facilitator-only rollback edge from `GroupDeliberation` back to
//! `IndividualSelection`. Every successful mutation bumps `version`; callers
//! pass the version they read to get optimistic concurrency.

mod deliberation;
mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Dataset;

pub use deliberation::{DeliberationEntry, DeliberationFile, DeliberationRow};
pub use prompts::{PromptConfig, SCREENS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("participant roster is empty")]
    EmptyRoster,
    #[error("participant `{0}` is listed twice")]
    DuplicateParticipant(String),
    #[error("participant ids must be non-empty")]
    InvalidParticipant,
    #[error("invalid session settings: {0}")]
    InvalidSettings(String),
    #[error("dataset `{0}` is not available")]
    DatasetMissing(String),
    #[error("event `{event}` is not allowed in state {state}")]
    IllegalTransition { state: SessionState, event: EventKind },
    #[error("event `{0}` is reserved for the facilitator")]
    Forbidden(EventKind),
    #[error("operation needs state {expected}, session is in {actual}")]
    WrongState { expected: String, actual: SessionState },
    #[error("unknown participant `{0}`")]
    UnknownParticipant(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("participants have not decided every feature: {0:?}")]
    ParticipantsIncomplete(Vec<String>),
    #[error("tied features need a facilitator tiebreak: {0:?}")]
    MissingTiebreak(Vec<String>),
    #[error("feature `{0}` is not tied; a tiebreak is not allowed")]
    SpuriousTiebreak(String),
    #[error("model registry is incomplete: {0}")]
    IncompleteRegistry(String),
    #[error("stale version: expected {expected}, session is at {actual}")]
    StaleVersion { expected: u64, actual: u64 },
    #[error("unknown screen `{0}`")]
    UnknownScreen(String),
    #[error("prompt config does not parse: {0}")]
    PromptConfig(String),
    #[error("deliberation file is malformed: {0}")]
    MalformedDeliberationFile(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyRoster => "EmptyRoster",
            SessionError::DuplicateParticipant(_) => "DuplicateParticipant",
            SessionError::InvalidParticipant => "InvalidParticipant",
            SessionError::InvalidSettings(_) => "InvalidSettings",
            SessionError::DatasetMissing(_) => "DatasetMissing",
            SessionError::IllegalTransition { .. } => "IllegalTransition",
            SessionError::Forbidden(_) => "Forbidden",
            SessionError::WrongState { .. } => "WrongState",
            SessionError::UnknownParticipant(_) => "UnknownParticipant",
            SessionError::UnknownFeature(_) => "UnknownFeature",
            SessionError::ParticipantsIncomplete(_) => "ParticipantsIncomplete",
            SessionError::MissingTiebreak(_) => "MissingTiebreak",
            SessionError::SpuriousTiebreak(_) => "SpuriousTiebreak",
            SessionError::IncompleteRegistry(_) => "IncompleteRegistry",
            SessionError::StaleVersion { .. } => "StaleVersion",
            SessionError::UnknownScreen(_) => "UnknownScreen",
            SessionError::PromptConfig(_) => "ParseError",
            SessionError::MalformedDeliberationFile(_) => "ParseError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Created,
    DataExploration,
    IndividualSelection,
    GroupDeliberation,
    GroupFinalized,
    ModelsTrained,
    Evaluation,
    Completed,
}

impl SessionState {
    pub const ALL: [SessionState; 8] = [
        SessionState::Created,
        SessionState::DataExploration,
        SessionState::IndividualSelection,
        SessionState::GroupDeliberation,
        SessionState::GroupFinalized,
        SessionState::ModelsTrained,
        SessionState::Evaluation,
        SessionState::Completed,
    ];
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Participant,
    Facilitator,
}

/// Payload-free name of a session event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StartExploration,
    StartSelection,
    StartDeliberation,
    Rollback,
    FinalizeGroup,
    ModelsTrained,
    StartEvaluation,
    Complete,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::StartExploration,
        EventKind::StartSelection,
        EventKind::StartDeliberation,
        EventKind::Rollback,
        EventKind::FinalizeGroup,
        EventKind::ModelsTrained,
        EventKind::StartEvaluation,
        EventKind::Complete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::StartExploration => "start_exploration",
            EventKind::StartSelection => "start_selection",
            EventKind::StartDeliberation => "start_deliberation",
            EventKind::Rollback => "rollback",
            EventKind::FinalizeGroup => "finalize_group",
            EventKind::ModelsTrained => "models_trained",
            EventKind::StartEvaluation => "start_evaluation",
            EventKind::Complete => "complete",
        }
    }

    pub fn parse(text: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|e| e.as_str() == text.trim())
    }

    pub fn facilitator_only(self) -> bool {
        matches!(
            self,
            EventKind::StartDeliberation | EventKind::Rollback | EventKind::FinalizeGroup | EventKind::ModelsTrained
        )
    }

    /// The documented edge for this event, as `(from, to)`.
    pub fn edge(self) -> (SessionState, SessionState) {
        use SessionState::*;
        match self {
            EventKind::StartExploration => (Created, DataExploration),
            EventKind::StartSelection => (DataExploration, IndividualSelection),
            EventKind::StartDeliberation => (IndividualSelection, GroupDeliberation),
            EventKind::Rollback => (GroupDeliberation, IndividualSelection),
            EventKind::FinalizeGroup => (GroupDeliberation, GroupFinalized),
            EventKind::ModelsTrained => (GroupFinalized, ModelsTrained),
            EventKind::StartEvaluation => (ModelsTrained, Evaluation),
            EventKind::Complete => (Evaluation, Completed),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    Include,
    Exclude,
}

impl Inclusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Inclusion::Include => "include",
            Inclusion::Exclude => "exclude",
        }
    }

    pub fn parse(text: &str) -> Option<Inclusion> {
        match text.trim() {
            "include" => Some(Inclusion::Include),
            "exclude" => Some(Inclusion::Exclude),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDecision {
    pub participant_id: String,
    pub feature: String,
    pub decision: Inclusion,
    #[serde(default)]
    pub unsure: bool,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Majority,
    FacilitatorTiebreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub feature: String,
    pub include_votes: u32,
    pub exclude_votes: u32,
    /// Share of votes for inclusion, rounded to a whole percent.
    pub include_percent: u32,
    /// `None` while a tie awaits the facilitator.
    pub outcome: Option<Inclusion>,
    pub resolved_by: Option<Resolution>,
}

impl ConsensusRecord {
    pub fn from_votes(feature: &str, include_votes: u32, exclude_votes: u32) -> Self {
        let total = include_votes + exclude_votes;
        let include_percent = if total == 0 {
            0
        } else {
            (100.0 * f64::from(include_votes) / f64::from(total)).round() as u32
        };
        let (outcome, resolved_by) = match include_votes.cmp(&exclude_votes) {
            std::cmp::Ordering::Greater => (Some(Inclusion::Include), Some(Resolution::Majority)),
            std::cmp::Ordering::Less => (Some(Inclusion::Exclude), Some(Resolution::Majority)),
            std::cmp::Ordering::Equal => (None, None),
        };
        ConsensusRecord {
            feature: feature.to_string(),
            include_votes,
            exclude_votes,
            include_percent,
            outcome,
            resolved_by,
        }
    }

    pub fn is_tied(&self) -> bool {
        self.include_votes == self.exclude_votes
    }
}

/// Model ids produced for a session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub all_features: Option<String>,
    pub group: Option<String>,
    pub individual: BTreeMap<String, String>,
}

impl ModelRegistry {
    pub fn model_ids(&self) -> Vec<String> {
        self.all_features
            .iter()
            .chain(self.group.iter())
            .chain(self.individual.values())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub threshold: f64,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl SessionSettings {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !self.threshold.is_finite() {
            return Err(SessionError::InvalidSettings("threshold must be finite".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(SessionError::InvalidSettings(format!(
                "split ratio {} must lie strictly between 0 and 1",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

impl Default for SessionSettings {
    fn default() -> Self {
        SessionSettings {
            threshold: 0.5,
            split_ratio: 0.7,
            split_seed: 2207,
        }
    }
}

/// A state-machine event with its payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    StartExploration,
    StartSelection,
    StartDeliberation,
    Rollback,
    FinalizeGroup {
        #[serde(default)]
        tiebreaks: BTreeMap<String, Inclusion>,
        facilitator: String,
    },
    ModelsTrained {
        registry: ModelRegistry,
    },
    StartEvaluation,
    Complete,
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SessionEvent::StartExploration => EventKind::StartExploration,
            SessionEvent::StartSelection => EventKind::StartSelection,
            SessionEvent::StartDeliberation => EventKind::StartDeliberation,
            SessionEvent::Rollback => EventKind::Rollback,
            SessionEvent::FinalizeGroup { .. } => EventKind::FinalizeGroup,
            SessionEvent::ModelsTrained { .. } => EventKind::ModelsTrained,
            SessionEvent::StartEvaluation => EventKind::StartEvaluation,
            SessionEvent::Complete => EventKind::Complete,
        }
    }

    /// Payload-free events; `None` for the two that need a payload.
    pub fn simple(kind: EventKind) -> Option<SessionEvent> {
        Some(match kind {
            EventKind::StartExploration => SessionEvent::StartExploration,
            EventKind::StartSelection => SessionEvent::StartSelection,
            EventKind::StartDeliberation => SessionEvent::StartDeliberation,
            EventKind::Rollback => SessionEvent::Rollback,
            EventKind::StartEvaluation => SessionEvent::StartEvaluation,
            EventKind::Complete => SessionEvent::Complete,
            EventKind::FinalizeGroup | EventKind::ModelsTrained => return None,
        })
    }
}

/// A mutation applied through [`Session::apply`]; this is what the service
/// appends to its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum SessionCommand {
    Advance { role: Role, transition: SessionEvent },
    RecordSelection { decision: FeatureDecision },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAck {
    pub participant_id: String,
    pub feature: String,
    pub participant_complete: bool,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub dataset_id: String,
    /// Schema feature names in display order.
    pub features: Vec<String>,
    pub state: SessionState,
    pub participants: Vec<String>,
    /// participant -> feature -> decision.
    pub selections: BTreeMap<String, BTreeMap<String, FeatureDecision>>,
    /// Present exactly when the state is `GroupFinalized` or later.
    pub consensus: Option<Vec<ConsensusRecord>>,
    pub finalized_by: Option<String>,
    pub models: ModelRegistry,
    pub prompts: PromptConfig,
    pub settings: SessionSettings,
    pub version: u64,
}

impl Session {
    pub fn create(
        session_id: impl Into<String>,
        dataset_id: impl Into<String>,
        dataset: Option<&Dataset>,
        roster: &[String],
        prompts: PromptConfig,
        settings: SessionSettings,
    ) -> Result<Session, SessionError> {
        let dataset_id = dataset_id.into();
        let dataset = dataset.ok_or_else(|| SessionError::DatasetMissing(dataset_id.clone()))?;
        settings.validate()?;
        if roster.is_empty() {
            return Err(SessionError::EmptyRoster);
        }
        let mut seen = BTreeSet::new();
        for p in roster {
            if p.trim().is_empty() {
                return Err(SessionError::InvalidParticipant);
            }
            if !seen.insert(p.as_str()) {
                return Err(SessionError::DuplicateParticipant(p.clone()));
            }
        }
        Ok(Session {
            session_id: session_id.into(),
            dataset_id,
            features: dataset.schema.feature_names().map(str::to_string).collect(),
            state: SessionState::Created,
            participants: roster.to_vec(),
            selections: roster.iter().map(|p| (p.clone(), BTreeMap::new())).collect(),
            consensus: None,
            finalized_by: None,
            models: ModelRegistry::default(),
            prompts,
            settings,
            version: 0,
        })
    }

    pub fn is_complete(&self, participant: &str) -> bool {
        self.selections
            .get(participant)
            .is_some_and(|s| self.features.iter().all(|f| s.contains_key(f)))
    }

    pub fn incomplete_participants(&self) -> Vec<String> {
        self.participants
            .iter()
            .filter(|p| !self.is_complete(p))
            .cloned()
            .collect()
    }

    fn require_complete(&self) -> Result<(), SessionError> {
        let missing = self.incomplete_participants();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(SessionError::ParticipantsIncomplete(missing))
        }
    }

    fn require_state(&self, expected: SessionState) -> Result<(), SessionError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(SessionError::WrongState {
                expected: expected.to_string(),
                actual: self.state,
            })
        }
    }

    /// Applies a command after checking `expected_version`.
    pub fn apply(&mut self, command: &SessionCommand, expected_version: Option<u64>) -> Result<(), SessionError> {
        if let Some(expected) = expected_version {
            if expected != self.version {
                return Err(SessionError::StaleVersion {
                    expected,
                    actual: self.version,
                });
            }
        }
        match command {
            SessionCommand::Advance { role, transition } => self.advance(transition.clone(), *role).map(|_| ()),
            SessionCommand::RecordSelection { decision } => self.record_selection(decision.clone()).map(|_| ()),
        }
    }

    pub fn advance(&mut self, event: SessionEvent, role: Role) -> Result<SessionState, SessionError> {
        let kind = event.kind();
        let (from, to) = kind.edge();
        if self.state != from {
            return Err(SessionError::IllegalTransition {
                state: self.state,
                event: kind,
            });
        }
        if kind.facilitator_only() && role != Role::Facilitator {
            return Err(SessionError::Forbidden(kind));
        }
        match event {
            SessionEvent::StartDeliberation => self.require_complete()?,
            SessionEvent::FinalizeGroup { tiebreaks, facilitator } => {
                let consensus = self.resolve_consensus(&tiebreaks)?;
                self.consensus = Some(consensus);
                self.finalized_by = Some(facilitator);
            }
            SessionEvent::ModelsTrained { registry } => {
                self.check_registry(&registry)?;
                self.models = registry;
            }
            _ => {}
        }
        self.state = to;
        self.version += 1;
        Ok(to)
    }

    fn check_registry(&self, registry: &ModelRegistry) -> Result<(), SessionError> {
        if registry.all_features.is_none() {
            return Err(SessionError::IncompleteRegistry("missing all-features model".into()));
        }
        if registry.group.is_none() {
            return Err(SessionError::IncompleteRegistry("missing group model".into()));
        }
        if let Some(p) = self.participants.iter().find(|p| !registry.individual.contains_key(*p)) {
            return Err(SessionError::IncompleteRegistry(format!(
                "missing individual model for `{p}`"
            )));
        }
        Ok(())
    }

    pub fn record_selection(&mut self, decision: FeatureDecision) -> Result<SelectionAck, SessionError> {
        self.require_state(SessionState::IndividualSelection)?;
        if !self.participants.contains(&decision.participant_id) {
            return Err(SessionError::UnknownParticipant(decision.participant_id));
        }
        if !self.features.contains(&decision.feature) {
            return Err(SessionError::UnknownFeature(decision.feature));
        }
        let participant_id = decision.participant_id.clone();
        let feature = decision.feature.clone();
        self.selections
            .entry(participant_id.clone())
            .or_default()
            .insert(feature.clone(), decision);
        self.version += 1;
        Ok(SelectionAck {
            participant_complete: self.is_complete(&participant_id),
            participant_id,
            feature,
            version: self.version,
        })
    }

    pub fn decision(&self, participant: &str, feature: &str) -> Option<&FeatureDecision> {
        self.selections.get(participant)?.get(feature)
    }

    /// Features a participant chose to include, in schema order.
    pub fn included_features(&self, participant: &str) -> Vec<String> {
        self.features
            .iter()
            .filter(|f| {
                self.decision(participant, f)
                    .is_some_and(|d| d.decision == Inclusion::Include)
            })
            .cloned()
            .collect()
    }

    /// Features the group included; empty before finalization.
    pub fn group_features(&self) -> Vec<String> {
        self.consensus
            .iter()
            .flatten()
            .filter(|c| c.outcome == Some(Inclusion::Include))
            .map(|c| c.feature.clone())
            .collect()
    }

    /// Recounts the votes for one feature from the raw selections. Unsure
    /// flags do not change the count.
    pub fn tally(&self, feature: &str) -> Result<ConsensusRecord, SessionError> {
        if !self.features.iter().any(|f| f == feature) {
            return Err(SessionError::UnknownFeature(feature.to_string()));
        }
        self.require_complete()?;
        let (mut include, mut exclude) = (0u32, 0u32);
        for p in &self.participants {
            match self.decision(p, feature).map(|d| d.decision) {
                Some(Inclusion::Include) => include += 1,
                Some(Inclusion::Exclude) => exclude += 1,
                None => {}
            }
        }
        Ok(ConsensusRecord::from_votes(feature, include, exclude))
    }

    pub fn tally_all(&self) -> Result<Vec<ConsensusRecord>, SessionError> {
        self.features.iter().map(|f| self.tally(f)).collect()
    }

    fn resolve_consensus(&self, tiebreaks: &BTreeMap<String, Inclusion>) -> Result<Vec<ConsensusRecord>, SessionError> {
        let mut records = self.tally_all()?;
        if let Some(unknown) = tiebreaks.keys().find(|f| !self.features.contains(f)) {
            return Err(SessionError::UnknownFeature(unknown.clone()));
        }
        if let Some(spurious) = records
            .iter()
            .find(|r| !r.is_tied() && tiebreaks.contains_key(&r.feature))
        {
            return Err(SessionError::SpuriousTiebreak(spurious.feature.clone()));
        }
        let missing: Vec<String> = records
            .iter()
            .filter(|r| r.is_tied() && !tiebreaks.contains_key(&r.feature))
            .map(|r| r.feature.clone())
            .collect();
        if !missing.is_empty() {
            return Err(SessionError::MissingTiebreak(missing));
        }
        for record in records.iter_mut().filter(|r| r.is_tied()) {
            record.outcome = Some(tiebreaks[&record.feature]);
            record.resolved_by = Some(Resolution::FacilitatorTiebreak);
        }
        Ok(records)
    }

    /// Finalizes the group feature set. Every tied feature needs a tiebreak
    /// and only tied features may have one.
    pub fn finalize_group(
        &mut self,
        tiebreaks: BTreeMap<String, Inclusion>,
        facilitator: &str,
    ) -> Result<Vec<ConsensusRecord>, SessionError> {
        self.advance(
            SessionEvent::FinalizeGroup {
                tiebreaks,
                facilitator: facilitator.to_string(),
            },
            Role::Facilitator,
        )?;
        Ok(self.consensus.clone().unwrap_or_default())
    }

    pub fn export_deliberation_file(&self) -> Result<DeliberationFile, SessionError> {
        self.require_state(SessionState::GroupDeliberation)?;
        self.require_complete()?;
        let features = self
            .features
            .iter()
            .map(|feature| DeliberationRow {
                feature: feature.clone(),
                selections: self
                    .participants
                    .iter()
                    .map(|p| {
                        let d = self.decision(p, feature).expect("participants are complete");
                        DeliberationEntry {
                            participant: p.clone(),
                            decision: d.decision,
                            unsure: d.unsure,
                            reason: d.reason.clone(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(DeliberationFile {
            participants: self.participants.clone(),
            features,
        })
    }

    pub fn reflective_prompt(&self, screen: &str) -> Result<&str, SessionError> {
        self.prompts.prompt(screen)
    }
}
