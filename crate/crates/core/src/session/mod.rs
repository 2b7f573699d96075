//! Dialogue sessions.
//!
//! A session owns one convergence model and one dialogue state and records
//! everything that happens to them as an append-only list of
//! [`SessionEvent`]s. Posting a user turn runs the pipeline
//!
//! 1. `turn_added` for the user turn
//! 2. per detected exemplar: `exemplar_accepted` or `exemplar_rejected`
//! 3. per feature that accepted an exemplar: `state_updated` if recalculated
//! 4. `prediction_made` for each detected exemplar, then for the system
//!    state of each feature that accepted an exemplar
//! 5. `phase_changed` if the dialogue moves into another phase, the system
//!    `turn_added`, a `prediction_made` per system production and a
//!    `variant_switch` where the system's own adaptive variant changed
//!
//! Text input skips steps 2 to 4.
//!
//! The session clock is logical: each turn starts where the previous one
//! ended plus [`TURN_GAP_MS`], so replaying the same inputs reproduces the
//! same timestamps.

mod archive;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{SessionObservations, UtteranceObservation, BASELINE_PHASE};
use crate::classify::{ClassifyError, VariantClassifier};
use crate::config::{hash_text, ConfigError, FeatureConfig, Toolkit};
use crate::convergence::{
    ConvergenceError, ConvergenceModel, Exemplar, FeatureState, IngestResult, Speaker, StateUpdate,
};
use crate::dialogue::{
    advance, parse_domain, render_response, DialogueDomain, DialogueError, DomainError,
    Realization,
};
use crate::speech::{validate_record, DetectionContext, SpeechAdapter, SpeechError, UtteranceRecord};

pub use archive::{
    events_match, replay_against, replay_session, verify_replay, ArchiveResources, ReplayError,
    SessionArchive, ARCHIVE_FORMAT,
};

/// Silence between consecutive turns on the session clock.
pub const TURN_GAP_MS: u64 = 500;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session {0:?} has reached a terminal state")]
    TerminalSession(String),
    #[error(transparent)]
    Validation(#[from] SpeechError),
    #[error("resources do not fit together: {0}")]
    ResourceMismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Convergence(#[from] ConvergenceError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

/// Everything a session is built from. Shared read-only between sessions.
#[derive(Debug)]
pub struct SessionResources {
    pub feature_config: FeatureConfig,
    pub config_hash: String,
    pub domain: DialogueDomain,
    pub domain_xml: String,
    pub domain_hash: String,
    toolkit: Toolkit,
    classifiers: BTreeMap<String, VariantClassifier>,
    adapter: Arc<dyn SpeechAdapter>,
}

impl SessionResources {
    pub fn new(feature_config: FeatureConfig, domain_xml: &str) -> Result<Self, SessionError> {
        Self::with_toolkit(feature_config, domain_xml, Toolkit::default())
    }

    /// Parses the domain and checks that every feature annotation in it
    /// refers to a configured feature and variant.
    pub fn with_toolkit(
        feature_config: FeatureConfig,
        domain_xml: &str,
        toolkit: Toolkit,
    ) -> Result<Self, SessionError> {
        feature_config.validate(&toolkit)?;
        let domain = parse_domain(domain_xml)?;
        for state in &domain.states {
            for word in &state.prompt.words {
                let def = feature_config.feature(&word.feature_id).ok_or_else(|| {
                    SessionError::ResourceMismatch(format!(
                        "state {:?} annotates unknown feature {:?}",
                        state.id, word.feature_id
                    ))
                })?;
                if let Realization::Variant(label) = &word.realization {
                    if def.variant(label).is_none() {
                        return Err(SessionError::ResourceMismatch(format!(
                            "state {:?} pins unknown variant {label:?} of {:?}",
                            state.id, def.id
                        )));
                    }
                }
            }
        }
        let classifiers = feature_config.build_classifiers(&toolkit)?;
        let adapter = feature_config.adapter(&toolkit)?;
        Ok(Self {
            config_hash: feature_config.content_hash(),
            domain_hash: hash_text(domain_xml),
            domain_xml: domain_xml.to_string(),
            feature_config,
            domain,
            toolkit,
            classifiers,
            adapter,
        })
    }

    pub fn classifier(&self, feature_id: &str) -> Option<&VariantClassifier> {
        self.classifiers.get(feature_id)
    }

    pub fn adapter(&self) -> &Arc<dyn SpeechAdapter> {
        &self.adapter
    }

    pub fn toolkit(&self) -> &Toolkit {
        &self.toolkit
    }
}

/// One numbered dialogue contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub transcript: String,
    /// For user turns the state being answered, for system turns the state
    /// whose prompt was spoken.
    pub state_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub timestamp_ms: u64,
    /// The utterance record: the user's spoken input, or the system's
    /// synthesized production. Absent for typed user input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<UtteranceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    /// A measured user realization.
    UserExemplar,
    /// The system's convergence state after the update step.
    SystemState,
    /// A feature-bearing word the system actually produced.
    SystemProduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    TurnAdded {
        turn: Turn,
    },
    ExemplarAccepted {
        exemplar: Exemplar,
    },
    ExemplarRejected {
        exemplar: Exemplar,
        reason: String,
    },
    StateUpdated {
        turn_index: usize,
        update: StateUpdate,
    },
    PredictionMade {
        turn_index: usize,
        speaker: Speaker,
        source: PredictionSource,
        feature_id: String,
        values: Vec<f64>,
        label: String,
        score: f64,
    },
    VariantSwitch {
        turn_index: usize,
        feature_id: String,
        from: String,
        to: String,
    },
    PhaseChanged {
        turn_index: usize,
        from: Option<String>,
        to: Option<String>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::TurnAdded { .. } => "turn_added",
            EventBody::ExemplarAccepted { .. } => "exemplar_accepted",
            EventBody::ExemplarRejected { .. } => "exemplar_rejected",
            EventBody::StateUpdated { .. } => "state_updated",
            EventBody::PredictionMade { .. } => "prediction_made",
            EventBody::VariantSwitch { .. } => "variant_switch",
            EventBody::PhaseChanged { .. } => "phase_changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Input of a user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TurnInput {
    Text { text: String },
    Record { record: UtteranceRecord },
}

impl TurnInput {
    pub fn text(text: impl Into<String>) -> Self {
        TurnInput::Text { text: text.into() }
    }

    pub fn record(record: UtteranceRecord) -> Self {
        TurnInput::Record { record }
    }
}

/// What one call to [`Session::post_turn`] produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub user: Turn,
    pub system: Turn,
    /// Seq of the first event appended by this call.
    pub first_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub domain_id: String,
    pub feature_config_id: String,
    pub state_id: String,
    pub phase: Option<String>,
    pub terminal: bool,
    pub turn_count: usize,
    pub event_count: usize,
    pub clock_ms: u64,
    pub features: Vec<FeatureState>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    resources: Arc<SessionResources>,
    model: ConvergenceModel,
    state_id: String,
    turns: Vec<Turn>,
    events: Vec<SessionEvent>,
    clock_ms: u64,
    terminal: bool,
    /// Predicted user variants per feature during the baseline phase.
    baseline_counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// Last predicted variant of the system's adaptive productions.
    system_variant: BTreeMap<String, String>,
}

impl Session {
    pub fn new(id: impl Into<String>, resources: Arc<SessionResources>) -> Result<Self, SessionError> {
        let model = resources.feature_config.build_model(&resources.toolkit)?;
        let mut system_variant = BTreeMap::new();
        for def in &resources.feature_config.features {
            let classifier = resources
                .classifier(&def.id)
                .expect("resources hold a classifier per feature");
            system_variant.insert(def.id.clone(), classifier.predict(&def.initial_value)?.label);
        }
        let state_id = resources.domain.initial_state.clone();
        let terminal = resources.domain.initial().is_terminal;
        Ok(Self {
            id: id.into(),
            resources,
            model,
            state_id,
            turns: Vec::new(),
            events: Vec::new(),
            clock_ms: 0,
            terminal,
            baseline_counts: BTreeMap::new(),
            system_variant,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn resources(&self) -> &Arc<SessionResources> {
        &self.resources
    }

    pub fn model(&self) -> &ConvergenceModel {
        &self.model
    }

    pub fn state_id(&self) -> &str {
        &self.state_id
    }

    pub fn phase(&self) -> Option<&str> {
        self.resources
            .domain
            .state(&self.state_id)
            .ok()
            .and_then(|s| s.phase.as_deref())
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn events_from(&self, from_seq: u64) -> &[SessionEvent] {
        let start = (from_seq as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            domain_id: self.resources.domain.id.clone(),
            feature_config_id: self.resources.feature_config.id.clone(),
            state_id: self.state_id.clone(),
            phase: self.phase().map(str::to_string),
            terminal: self.terminal,
            turn_count: self.turns.len(),
            event_count: self.events.len(),
            clock_ms: self.clock_ms,
            features: self.model.states().cloned().collect(),
        }
    }

    /// The user's baseline variant per feature: the strict majority of the
    /// predictions made during the baseline phase.
    pub fn baseline_variants(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (feature, counts) in &self.baseline_counts {
            let best = counts.values().copied().max().unwrap_or(0);
            let mut leaders = counts.iter().filter(|(_, &c)| c == best);
            if let (Some((label, _)), None) = (leaders.next(), leaders.next()) {
                out.insert(feature.clone(), label.clone());
            }
        }
        out
    }

    /// Runs one user input through the pipeline. On error nothing is
    /// appended.
    pub fn post_turn(&mut self, input: TurnInput) -> Result<TurnOutcome, SessionError> {
        if self.terminal {
            return Err(SessionError::TerminalSession(self.id.clone()));
        }
        let (transcript, record) = match input {
            TurnInput::Text { text } => {
                if text.trim().is_empty() {
                    return Err(SpeechError::Validation {
                        field: "text".into(),
                        detail: "input text is empty".into(),
                    }
                    .into());
                }
                (text, None)
            }
            TurnInput::Record { record } => {
                if record.speaker != Speaker::User {
                    return Err(SpeechError::Validation {
                        field: "speaker".into(),
                        detail: "posted records must come from the user".into(),
                    }
                    .into());
                }
                validate_record(&record, &self.model)?;
                (record.transcript.clone(), Some(record))
            }
        };
        let resources = Arc::clone(&self.resources);
        let domain = &resources.domain;
        // Check the dialogue step before anything is appended.
        let transition = advance(domain, &self.state_id, &transcript)?;
        let next_state = domain.state(transition.next_state)?;
        let template = transition.template.clone();
        let next_id = next_state.id.clone();
        let next_phase = next_state.phase.clone();
        let next_terminal = next_state.is_terminal;

        let first_seq = self.events.len() as u64;
        let user_phase = self.phase().map(str::to_string);
        let user_index = self.turns.len();
        let user_start = self.clock_ms;
        let user_turn = Turn {
            index: user_index,
            speaker: Speaker::User,
            transcript: transcript.clone(),
            state_id: self.state_id.clone(),
            phase: user_phase.clone(),
            timestamp_ms: user_start,
            record: record.clone(),
        };
        self.push_turn(user_turn.clone());
        self.clock_ms += record.as_ref().map_or(0, |r| r.duration_ms()) + TURN_GAP_MS;

        if let Some(record) = &record {
            let detected = crate::speech::detect_instances(
                record,
                &self.model,
                DetectionContext {
                    turn_index: user_index,
                    turn_start_ms: user_start,
                },
            );
            let mut affected: Vec<String> = Vec::new();
            for exemplar in &detected {
                match self.model.ingest_exemplar(&exemplar.feature_id, exemplar)? {
                    IngestResult::Accepted => {
                        if !affected.contains(&exemplar.feature_id) {
                            affected.push(exemplar.feature_id.clone());
                        }
                        self.push(EventBody::ExemplarAccepted {
                            exemplar: exemplar.clone(),
                        });
                    }
                    IngestResult::RejectedOutOfRange => self.push(EventBody::ExemplarRejected {
                        exemplar: exemplar.clone(),
                        reason: "out_of_range".into(),
                    }),
                    IngestResult::SystemProduction => unreachable!("user records only"),
                }
            }
            for feature_id in &affected {
                if let Some(update) = self.model.maybe_update_state(feature_id)? {
                    self.push(EventBody::StateUpdated {
                        turn_index: user_index,
                        update,
                    });
                }
            }
            for exemplar in &detected {
                let prediction = self.classifier(&exemplar.feature_id).predict(&exemplar.values)?;
                if user_phase.as_deref() == Some(BASELINE_PHASE) {
                    *self
                        .baseline_counts
                        .entry(exemplar.feature_id.clone())
                        .or_default()
                        .entry(prediction.label.clone())
                        .or_default() += 1;
                }
                self.push(EventBody::PredictionMade {
                    turn_index: user_index,
                    speaker: Speaker::User,
                    source: PredictionSource::UserExemplar,
                    feature_id: exemplar.feature_id.clone(),
                    values: exemplar.values.clone(),
                    label: prediction.label,
                    score: prediction.score,
                });
            }
            for feature_id in &affected {
                let values = self.model.state(feature_id)?.current_value.clone();
                let prediction = self.classifier(feature_id).predict(&values)?;
                self.push(EventBody::PredictionMade {
                    turn_index: user_index,
                    speaker: Speaker::System,
                    source: PredictionSource::SystemState,
                    feature_id: feature_id.clone(),
                    values,
                    label: prediction.label,
                    score: prediction.score,
                });
            }
        }

        let system_index = user_index + 1;
        if next_phase != user_phase {
            self.push(EventBody::PhaseChanged {
                turn_index: system_index,
                from: user_phase,
                to: next_phase.clone(),
            });
        }
        let utterance = render_response(&template, &self.model, &self.baseline_variants())?;
        let system_record = resources.adapter.synthesize(&utterance);
        let system_turn = Turn {
            index: system_index,
            speaker: Speaker::System,
            transcript: utterance.text.clone(),
            state_id: next_id.clone(),
            phase: next_phase,
            timestamp_ms: self.clock_ms,
            record: Some(system_record.clone()),
        };
        self.push_turn(system_turn.clone());
        self.clock_ms += system_record.duration_ms() + TURN_GAP_MS;
        self.state_id = next_id;
        self.terminal = next_terminal;

        let mut switches = Vec::new();
        for production in &utterance.productions {
            let prediction = self
                .classifier(&production.feature_id)
                .predict(&production.values)?;
            if production.pinned_variant.is_none() {
                let previous = self
                    .system_variant
                    .insert(production.feature_id.clone(), prediction.label.clone());
                if let Some(from) = previous.filter(|p| *p != prediction.label) {
                    switches.push(EventBody::VariantSwitch {
                        turn_index: system_index,
                        feature_id: production.feature_id.clone(),
                        from,
                        to: prediction.label.clone(),
                    });
                }
            }
            self.push(EventBody::PredictionMade {
                turn_index: system_index,
                speaker: Speaker::System,
                source: PredictionSource::SystemProduction,
                feature_id: production.feature_id.clone(),
                values: production.values.clone(),
                label: prediction.label,
                score: prediction.score,
            });
        }
        for switch in switches {
            self.push(switch);
        }

        Ok(TurnOutcome {
            user: user_turn,
            system: system_turn,
            first_seq,
        })
    }

    /// Serializes the session with the resources it was built from.
    pub fn archive(&self) -> SessionArchive {
        SessionArchive::of(self)
    }

    fn classifier(&self, feature_id: &str) -> &VariantClassifier {
        self.resources
            .classifier(feature_id)
            .expect("resources hold a classifier per feature")
    }

    fn push_turn(&mut self, turn: Turn) {
        self.turns.push(turn.clone());
        self.push(EventBody::TurnAdded { turn });
    }

    fn push(&mut self, body: EventBody) {
        let seq = self.events.len() as u64;
        self.events.push(SessionEvent { seq, body });
    }
}

/// Per-utterance observations of one feature, for the analysis module.
///
/// Each user prediction of the feature is paired with the predicted variant
/// of the same feature in the immediately preceding system turn, if that
/// turn produced it.
pub fn observations_from_events(
    session_id: &str,
    events: &[SessionEvent],
    feature_id: &str,
    canonical_variant: &str,
) -> SessionObservations {
    let mut phases: BTreeMap<usize, Option<String>> = BTreeMap::new();
    let mut system_labels: BTreeMap<usize, String> = BTreeMap::new();
    let mut utterances = Vec::new();
    for event in events {
        match &event.body {
            EventBody::TurnAdded { turn } => {
                phases.insert(turn.index, turn.phase.clone());
            }
            EventBody::PredictionMade {
                turn_index,
                source,
                feature_id: f,
                label,
                ..
            } if f == feature_id => match source {
                PredictionSource::SystemProduction => {
                    system_labels.insert(*turn_index, label.clone());
                }
                PredictionSource::UserExemplar => utterances.push(UtteranceObservation {
                    turn_index: *turn_index,
                    phase: phases.get(turn_index).cloned().flatten(),
                    user_label: label.clone(),
                    stimulus_label: turn_index
                        .checked_sub(1)
                        .and_then(|i| system_labels.get(&i).cloned()),
                }),
                PredictionSource::SystemState => {}
            },
            _ => {}
        }
    }
    SessionObservations {
        session_id: session_id.to_string(),
        feature_id: feature_id.to_string(),
        canonical_variant: canonical_variant.to_string(),
        utterances,
    }
}
