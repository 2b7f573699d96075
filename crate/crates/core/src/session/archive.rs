//! Session archives and replay by re-execution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{EventBody, Session, SessionError, SessionEvent, SessionResources, TurnInput};
use crate::config::{hash_text, FeatureConfig};
use crate::convergence::Speaker;

pub const ARCHIVE_FORMAT: u32 = 1;

/// Absolute and relative tolerance when comparing numbers in event logs.
const NUMBER_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveResources {
    pub feature_config: FeatureConfig,
    pub domain_xml: String,
}

/// A complete, self-contained record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionArchive {
    pub format: u32,
    pub session_id: String,
    pub domain_id: String,
    pub feature_config_id: String,
    pub config_hash: String,
    pub domain_hash: String,
    pub resources: ArchiveResources,
    pub events: Vec<SessionEvent>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("archive is corrupt: {0}")]
    ArchiveCorrupt(String),
    #[error("{which} hash differs: archive has {archived}, resources have {actual}")]
    ConfigMismatch {
        which: &'static str,
        archived: String,
        actual: String,
    },
    #[error("replayed event log diverges at seq {seq}: {detail}")]
    Divergence { seq: u64, detail: String },
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl SessionArchive {
    pub(super) fn of(session: &Session) -> Self {
        let res = &session.resources;
        Self {
            format: ARCHIVE_FORMAT,
            session_id: session.id.clone(),
            domain_id: res.domain.id.clone(),
            feature_config_id: res.feature_config.id.clone(),
            config_hash: res.config_hash.clone(),
            domain_hash: res.domain_hash.clone(),
            resources: ArchiveResources {
                feature_config: res.feature_config.clone(),
                domain_xml: res.domain_xml.clone(),
            },
            events: session.events.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ReplayError> {
        serde_json::from_str(text).map_err(|e| ReplayError::ArchiveCorrupt(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("archive serializes")
    }

    /// Checks the format, the event numbering and the embedded hashes, and
    /// builds the resources the archive was recorded with.
    pub fn resources(&self) -> Result<SessionResources, ReplayError> {
        if self.format != ARCHIVE_FORMAT {
            return Err(ReplayError::ArchiveCorrupt(format!(
                "unsupported format {}",
                self.format
            )));
        }
        for (i, event) in self.events.iter().enumerate() {
            if event.seq != i as u64 {
                return Err(ReplayError::ArchiveCorrupt(format!(
                    "event {i} carries seq {}",
                    event.seq
                )));
            }
        }
        let config_hash = self.resources.feature_config.content_hash();
        if config_hash != self.config_hash {
            return Err(ReplayError::ConfigMismatch {
                which: "feature config",
                archived: self.config_hash.clone(),
                actual: config_hash,
            });
        }
        let domain_hash = hash_text(&self.resources.domain_xml);
        if domain_hash != self.domain_hash {
            return Err(ReplayError::ConfigMismatch {
                which: "domain",
                archived: self.domain_hash.clone(),
                actual: domain_hash,
            });
        }
        SessionResources::new(
            self.resources.feature_config.clone(),
            &self.resources.domain_xml,
        )
        .map_err(|e| ReplayError::ArchiveCorrupt(e.to_string()))
    }

    /// The recorded user inputs in order.
    pub fn inputs(&self) -> Result<Vec<TurnInput>, ReplayError> {
        let mut inputs = Vec::new();
        for event in &self.events {
            if let EventBody::TurnAdded { turn } = &event.body {
                if turn.speaker != Speaker::User {
                    continue;
                }
                inputs.push(match &turn.record {
                    Some(record) => {
                        if record.transcript != turn.transcript {
                            return Err(ReplayError::ArchiveCorrupt(format!(
                                "turn {} transcript differs from its record",
                                turn.index
                            )));
                        }
                        TurnInput::record(record.clone())
                    }
                    None => TurnInput::text(turn.transcript.clone()),
                });
            }
        }
        Ok(inputs)
    }
}

/// Re-executes the archive's user inputs against its own resources.
pub fn replay_session(archive: &SessionArchive) -> Result<Session, ReplayError> {
    let resources = Arc::new(archive.resources()?);
    rerun(archive, resources)
}

/// Re-executes the archive against resources loaded elsewhere, which must
/// hash identically to the archived ones.
pub fn replay_against(
    archive: &SessionArchive,
    resources: Arc<SessionResources>,
) -> Result<Session, ReplayError> {
    archive.resources()?;
    if archive.config_hash != resources.config_hash {
        return Err(ReplayError::ConfigMismatch {
            which: "feature config",
            archived: archive.config_hash.clone(),
            actual: resources.config_hash.clone(),
        });
    }
    if archive.domain_hash != resources.domain_hash {
        return Err(ReplayError::ConfigMismatch {
            which: "domain",
            archived: archive.domain_hash.clone(),
            actual: resources.domain_hash.clone(),
        });
    }
    rerun(archive, resources)
}

fn rerun(archive: &SessionArchive, resources: Arc<SessionResources>) -> Result<Session, ReplayError> {
    let inputs = archive.inputs()?;
    let mut session = Session::new(archive.session_id.clone(), resources)?;
    for input in inputs {
        session.post_turn(input)?;
    }
    Ok(session)
}

/// Replays the archive and checks that the new event log equals the
/// archived one.
pub fn verify_replay(archive: &SessionArchive) -> Result<Session, ReplayError> {
    let session = replay_session(archive)?;
    let replayed = session.events();
    for (i, (old, new)) in archive.events.iter().zip(replayed).enumerate() {
        let old_json = serde_json::to_value(old).expect("event serializes");
        let new_json = serde_json::to_value(new).expect("event serializes");
        if !values_match(&old_json, &new_json) {
            return Err(ReplayError::Divergence {
                seq: i as u64,
                detail: format!("archived {old_json} but replay produced {new_json}"),
            });
        }
    }
    if archive.events.len() != replayed.len() {
        return Err(ReplayError::Divergence {
            seq: archive.events.len().min(replayed.len()) as u64,
            detail: format!(
                "archive has {} events, replay produced {}",
                archive.events.len(),
                replayed.len()
            ),
        });
    }
    Ok(session)
}

/// Compares two event logs structurally, numbers to within 1e-12.
pub fn events_match(a: &[SessionEvent], b: &[SessionEvent]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            values_match(
                &serde_json::to_value(x).expect("event serializes"),
                &serde_json::to_value(y).expect("event serializes"),
            )
        })
}

fn values_match(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => {
                let diff = (x - y).abs();
                diff <= NUMBER_TOLERANCE || diff <= NUMBER_TOLERANCE * x.abs().max(y.abs())
            }
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_match(a, b))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter()
                    .all(|(k, v)| y.get(k).is_some_and(|w| values_match(v, w)))
        }
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn number_tolerance() {
        assert!(values_match(&json!({"a": [1.0, 2.0]}), &json!({"a": [1.0, 2.0 + 1e-13]})));
        assert!(!values_match(&json!({"a": [1.0]}), &json!({"a": [1.0 + 1e-9]})));
        assert!(!values_match(&json!({"a": 1}), &json!({"b": 1})));
        assert!(!values_match(&json!(["x"]), &json!(["y"])));
        // relative for large magnitudes
        assert!(values_match(&json!(2000.0), &json!(2000.0 + 1e-10)));
    }
}
