//! Boundary between (simulated) speech and the dialogue pipeline.
//!
//! Real audio, recognition and formant tracking are replaced by utterance
//! records: one JSON object per line carrying the transcript and phone
//! segments with pre-extracted feature measurements.
//!
//! ```json
//! {"speaker":"user","transcript":"Gerät","segments":[{"phone":"E:","start_ms":0,"end_ms":120,"features":{"ae":[580.0,1950.0]}}]}
//! ```

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::{ConvergenceModel, Exemplar, FeatureDefinition, Speaker};
use crate::dialogue::SystemUtterance;
use crate::registry::Registry;

/// Duration of one synthesized word slot.
pub const WORD_SLOT_MS: u64 = 300;
/// Audible part of a synthesized word slot.
pub const WORD_SPAN_MS: u64 = 280;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneSegment {
    pub phone: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub features: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub speaker: Speaker,
    pub transcript: String,
    pub segments: Vec<PhoneSegment>,
}

impl UtteranceRecord {
    pub fn duration_ms(&self) -> u64 {
        self.segments.iter().map(|s| s.end_ms).max().unwrap_or(0)
    }

    /// Serializes to the single-line stream format.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeechError {
    #[error("cannot parse utterance record: {0}")]
    Parse(String),
    #[error("invalid utterance record ({field}): {detail}")]
    Validation { field: String, detail: String },
    #[error("unknown speech adapter {0:?}")]
    UnknownAdapter(String),
}

fn invalid(field: &str, detail: impl Into<String>) -> SpeechError {
    SpeechError::Validation {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Lookup of registered feature definitions.
pub trait FeatureCatalog {
    fn feature(&self, id: &str) -> Option<&FeatureDefinition>;
    /// All features in registration order.
    fn all(&self) -> Vec<&FeatureDefinition>;
}

impl FeatureCatalog for ConvergenceModel {
    fn feature(&self, id: &str) -> Option<&FeatureDefinition> {
        self.definition(id).ok().map(|d| d.as_ref())
    }

    fn all(&self) -> Vec<&FeatureDefinition> {
        self.definitions().map(|d| d.as_ref()).collect()
    }
}

impl FeatureCatalog for [FeatureDefinition] {
    fn feature(&self, id: &str) -> Option<&FeatureDefinition> {
        self.iter().find(|d| d.id == id)
    }

    fn all(&self) -> Vec<&FeatureDefinition> {
        self.iter().collect()
    }
}

impl FeatureCatalog for Vec<FeatureDefinition> {
    fn feature(&self, id: &str) -> Option<&FeatureDefinition> {
        self.as_slice().feature(id)
    }

    fn all(&self) -> Vec<&FeatureDefinition> {
        self.as_slice().all()
    }
}

/// Parses one line of an utterance stream and validates it.
pub fn parse_utterance_record(
    raw: &str,
    features: &dyn FeatureCatalog,
) -> Result<UtteranceRecord, SpeechError> {
    let record: UtteranceRecord =
        serde_json::from_str(raw.trim()).map_err(|e| SpeechError::Parse(e.to_string()))?;
    validate_record(&record, features)?;
    Ok(record)
}

pub fn validate_record(
    record: &UtteranceRecord,
    features: &dyn FeatureCatalog,
) -> Result<(), SpeechError> {
    if record.speaker == Speaker::User && record.transcript.trim().is_empty() {
        return Err(invalid("transcript", "user transcript is empty"));
    }
    let mut previous_end = 0;
    for (i, seg) in record.segments.iter().enumerate() {
        if seg.end_ms <= seg.start_ms {
            return Err(invalid(
                "segment times",
                format!("segment {i} ends at or before its start"),
            ));
        }
        if seg.start_ms < previous_end {
            return Err(invalid(
                "segment times",
                format!("segment {i} overlaps its predecessor"),
            ));
        }
        previous_end = seg.end_ms;
        for (feature_id, values) in &seg.features {
            let def = features
                .feature(feature_id)
                .ok_or_else(|| invalid("features", format!("unknown feature {feature_id:?}")))?;
            if values.len() != def.dimensionality() {
                return Err(invalid(
                    "dimensionality",
                    format!(
                        "feature {feature_id:?} needs {} values, got {}",
                        def.dimensionality(),
                        values.len()
                    ),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid("features", "non-finite measurement"));
            }
        }
    }
    Ok(())
}

/// Position of a record within a session, used to stamp exemplars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectionContext {
    pub turn_index: usize,
    /// Session clock at the start of the utterance.
    pub turn_start_ms: u64,
}

/// Emits one exemplar per (segment, feature) pair where the segment's phone
/// belongs to the feature and carries a measurement for it. Segments that
/// match a feature but lack its measurement are skipped with a warning.
pub fn detect_instances(
    record: &UtteranceRecord,
    features: &dyn FeatureCatalog,
    ctx: DetectionContext,
) -> Vec<Exemplar> {
    let defs = features.all();
    let mut out = Vec::new();
    for seg in &record.segments {
        for def in &defs {
            if !def.phonemes.iter().any(|p| *p == seg.phone) {
                continue;
            }
            match seg.features.get(&def.id) {
                Some(values) => out.push(Exemplar {
                    feature_id: def.id.clone(),
                    values: values.clone(),
                    speaker: record.speaker,
                    turn_index: ctx.turn_index,
                    timestamp: ctx.turn_start_ms + seg.start_ms,
                }),
                None => log::warn!(
                    "turn {}: segment {:?} at {} ms matches feature {:?} but has no measurement",
                    ctx.turn_index,
                    seg.phone,
                    seg.start_ms,
                    def.id
                ),
            }
        }
    }
    out
}

/// Renders a system utterance as a record: one segment per feature-bearing
/// word, word `k` spanning `[300k, 300k + 280)` ms.
pub fn synthesize_stub(utterance: &SystemUtterance) -> UtteranceRecord {
    let mut by_word: BTreeMap<usize, PhoneSegment> = BTreeMap::new();
    for prod in &utterance.productions {
        let k = prod.word_index as u64;
        by_word
            .entry(prod.word_index)
            .or_insert_with(|| PhoneSegment {
                phone: prod.phone.clone(),
                start_ms: WORD_SLOT_MS * k,
                end_ms: WORD_SLOT_MS * k + WORD_SPAN_MS,
                features: BTreeMap::new(),
            })
            .features
            .insert(prod.feature_id.clone(), prod.values.clone());
    }
    UtteranceRecord {
        speaker: Speaker::System,
        transcript: utterance.text.clone(),
        segments: by_word.into_values().collect(),
    }
}

/// Source of user speech and sink of system speech.
pub trait SpeechAdapter: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn recognize(
        &self,
        raw: &str,
        features: &dyn FeatureCatalog,
    ) -> Result<UtteranceRecord, SpeechError>;
    fn synthesize(&self, utterance: &SystemUtterance) -> UtteranceRecord;
}

/// Reads pre-extracted utterance records; synthesis is the parameter stub.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileAdapter;

impl SpeechAdapter for FileAdapter {
    fn name(&self) -> &'static str {
        "file"
    }

    fn recognize(
        &self,
        raw: &str,
        features: &dyn FeatureCatalog,
    ) -> Result<UtteranceRecord, SpeechError> {
        parse_utterance_record(raw, features)
    }

    fn synthesize(&self, utterance: &SystemUtterance) -> UtteranceRecord {
        synthesize_stub(utterance)
    }
}

pub type AdapterRegistry = Registry<Arc<dyn SpeechAdapter>>;

pub fn builtin_adapters() -> AdapterRegistry {
    let mut registry = AdapterRegistry::new("speech_adapter");
    registry.register("file", Arc::new(FileAdapter));
    registry
}

/// Parses every non-blank line of an utterance stream file.
pub fn parse_stream(
    text: &str,
    adapter: &dyn SpeechAdapter,
    features: &dyn FeatureCatalog,
) -> Result<Vec<UtteranceRecord>, (usize, SpeechError)> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| adapter.recognize(line, features).map_err(|e| (i + 1, e)))
        .collect()
}
