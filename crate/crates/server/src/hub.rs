//! Session registry shared by all HTTP handlers.
//!
//! Each session sits behind its own mutex, so turns of one session are
//! serialized while different sessions proceed independently. Appended
//! events are fanned out on a broadcast channel; a subscriber takes the
//! backlog and its receiver under the same lock, so it sees every event
//! exactly once.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use tokio::sync::broadcast;

use phonconv::config::FeatureConfig;
use phonconv::convergence::FeatureDefinition;
use phonconv::dialogue::parse_domain;
use phonconv::session::{
    Session, SessionArchive, SessionError, SessionEvent, SessionResources, SessionSummary,
    TurnInput, TurnOutcome,
};
use phonconv::speech::{parse_stream, SpeechError};

/// Events buffered per subscriber before it is considered too slow and
/// disconnected.
pub const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown feature config {0:?}")]
    UnknownConfig(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("{0}")]
    Ambiguous(String),
    #[error("line {line}: {source}")]
    Source { line: usize, source: SpeechError },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("invalid resource: {0}")]
    InvalidResource(String),
}

struct SessionSlot {
    session: Mutex<Session>,
    events: broadcast::Sender<SessionEvent>,
}

/// Result of running an uploaded utterance stream.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SourceRun {
    pub turns: Vec<TurnOutcome>,
    /// Records not posted because the dialogue reached a terminal state.
    pub skipped: usize,
}

pub struct Hub {
    configs: BTreeMap<String, FeatureConfig>,
    domains: BTreeMap<String, String>,
    resources: Mutex<HashMap<(String, String), Arc<SessionResources>>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl Hub {
    /// Registers feature configs and domain files under their ids.
    pub fn new(configs: Vec<FeatureConfig>, domains: Vec<String>) -> Result<Self, HubError> {
        let mut by_id = BTreeMap::new();
        for config in configs {
            let id = config.id.clone();
            if by_id.insert(id.clone(), config).is_some() {
                return Err(HubError::InvalidResource(format!("feature config {id:?} given twice")));
            }
        }
        let mut domain_map = BTreeMap::new();
        for xml in domains {
            let domain = parse_domain(&xml).map_err(|e| HubError::InvalidResource(e.to_string()))?;
            if domain_map.insert(domain.id.clone(), xml).is_some() {
                return Err(HubError::InvalidResource(format!("domain {:?} given twice", domain.id)));
            }
        }
        Ok(Self {
            configs: by_id,
            domains: domain_map,
            resources: Mutex::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn config_ids(&self) -> Vec<&str> {
        self.configs.keys().map(String::as_str).collect()
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.domains.keys().map(String::as_str).collect()
    }

    fn pick<'a, T>(
        map: &'a BTreeMap<String, T>,
        id: Option<&str>,
        what: &str,
        unknown: fn(String) -> HubError,
    ) -> Result<&'a String, HubError> {
        match id {
            Some(id) => map.get_key_value(id).map(|(k, _)| k).ok_or_else(|| unknown(id.into())),
            None if map.len() == 1 => Ok(map.keys().next().expect("one entry")),
            None => Err(HubError::Ambiguous(format!(
                "{} {what}s are loaded; name one",
                map.len()
            ))),
        }
    }

    /// The features of a config; without an id, of the only loaded config.
    pub fn features(&self, config_id: Option<&str>) -> Result<Vec<FeatureDefinition>, HubError> {
        let id = Self::pick(&self.configs, config_id, "feature config", HubError::UnknownConfig)?;
        Ok(self.configs[id].features.clone())
    }

    fn resources_for(&self, domain_id: &str, config_id: &str) -> Result<Arc<SessionResources>, HubError> {
        let key = (domain_id.to_string(), config_id.to_string());
        let mut cache = self.resources.lock().expect("resource cache poisoned");
        if let Some(res) = cache.get(&key) {
            return Ok(Arc::clone(res));
        }
        let res = Arc::new(SessionResources::new(
            self.configs[config_id].clone(),
            &self.domains[domain_id],
        )?);
        cache.insert(key, Arc::clone(&res));
        Ok(res)
    }

    pub fn create_session(
        &self,
        domain_id: Option<&str>,
        config_id: Option<&str>,
    ) -> Result<String, HubError> {
        let domain = Self::pick(&self.domains, domain_id, "domain", HubError::UnknownDomain)?;
        let config = Self::pick(&self.configs, config_id, "feature config", HubError::UnknownConfig)?;
        let resources = self.resources_for(domain, config)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::new(id.clone(), resources)?;
        let (events, _) = broadcast::channel(SUBSCRIBER_BUFFER);
        let slot = Arc::new(SessionSlot {
            session: Mutex::new(session),
            events,
        });
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), slot);
        log::info!("session {id} created ({domain} / {config})");
        Ok(id)
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, HubError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| HubError::UnknownSession(id.to_string()))
    }

    fn post_locked(
        slot: &SessionSlot,
        session: &mut Session,
        input: TurnInput,
    ) -> Result<TurnOutcome, HubError> {
        let outcome = session.post_turn(input)?;
        for event in session.events_from(outcome.first_seq) {
            // no receivers is fine
            let _ = slot.events.send(event.clone());
        }
        Ok(outcome)
    }

    pub fn post_turn(&self, id: &str, input: TurnInput) -> Result<TurnOutcome, HubError> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().expect("session poisoned");
        Self::post_locked(&slot, &mut session, input)
    }

    /// Parses a whole utterance stream, then posts its records in order
    /// until the dialogue ends.
    pub fn run_source(&self, id: &str, text: &str) -> Result<SourceRun, HubError> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().expect("session poisoned");
        let adapter = Arc::clone(session.resources().adapter());
        let records = parse_stream(text, adapter.as_ref(), session.model())
            .map_err(|(line, source)| HubError::Source { line, source })?;
        let total = records.len();
        let mut turns = Vec::new();
        for record in records {
            if session.is_terminal() {
                break;
            }
            turns.push(Self::post_locked(&slot, &mut session, TurnInput::record(record))?);
        }
        Ok(SourceRun {
            skipped: total - turns.len(),
            turns,
        })
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, HubError> {
        let slot = self.slot(id)?;
        let session = slot.session.lock().expect("session poisoned");
        Ok(session.summary())
    }

    pub fn archive(&self, id: &str) -> Result<SessionArchive, HubError> {
        let slot = self.slot(id)?;
        let session = slot.session.lock().expect("session poisoned");
        Ok(session.archive())
    }

    /// Events with `seq >= from` recorded so far, and a receiver for the
    /// ones appended afterwards.
    pub fn subscribe(
        &self,
        id: &str,
        from: u64,
    ) -> Result<(Vec<SessionEvent>, broadcast::Receiver<SessionEvent>), HubError> {
        let slot = self.slot(id)?;
        let session = slot.session.lock().expect("session poisoned");
        let backlog = session.events_from(from).to_vec();
        Ok((backlog, slot.events.subscribe()))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }
}
