//! Shadowing experiments run as automated dialogues.
//!
//! An experiment domain has a baseline, a shadowing and a post phase. Every
//! shadowing prompt carries exactly one annotated target word, the stimulus.
//! Each participant is an utterance stream that is fed, in order, into its
//! own session; the resulting event logs are reduced to an
//! [`ExperimentReport`].
//!
//! The synthetic cohort generator stands in for recorded participants: each
//! participant has a designed convergence degree, and each shadowed
//! utterance realizes the stimulus variant with that probability.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    experiment_report, summarize_session, AnalysisError, ExperimentReport, BASELINE_PHASE,
    POST_PHASE, SHADOWING_PHASE,
};
use crate::classify::LabeledPoint;
use crate::config::{ClassifierConfig, FeatureConfig};
use crate::convergence::{FeatureDefinition, Speaker};
use crate::dialogue::{parse_domain, DialogueDomain, Realization};
use crate::session::{
    observations_from_events, Session, SessionArchive, SessionError, SessionResources, TurnInput,
};
use crate::speech::{parse_stream, PhoneSegment, UtteranceRecord};

pub const DEFAULT_BASELINE_UTTERANCES: usize = 12;
pub const DEFAULT_SHADOWING_UTTERANCES: usize = 24;
pub const DEFAULT_POST_UTTERANCES: usize = 6;

/// File extension of participant utterance streams.
pub const STREAM_EXTENSION: &str = "jsonl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("invalid experiment script: {0}")]
    InvalidScript(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Example words per feature, used for prompts and transcripts.
fn target_words(feature_id: &str) -> &'static [&'static str] {
    match feature_id {
        "ae" => &["Gerät", "spät", "Käse", "Mädchen", "wählen", "Bär"],
        "ig" => &["süchtig", "König", "wichtig", "billig", "ruhig", "fertig"],
        "en" => &["besuchen", "laufen", "haben", "legen", "sagen", "kaufen"],
        _ => &["Wort"],
    }
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Builds a three-phase shadowing domain for one feature. Baseline and
/// post prompts ask the participant to read a word; shadowing prompts speak
/// the word in the variant opposite the participant's baseline variant.
pub fn shadowing_domain(
    def: &FeatureDefinition,
    baseline: usize,
    shadowing: usize,
    post: usize,
) -> String {
    let words = target_words(&def.id);
    let feature = xml_escape(&def.id);
    let mut states: Vec<(&str, String)> = Vec::new();
    for i in 0..baseline {
        let word = words[i % words.len()];
        states.push((BASELINE_PHASE, format!("Bitte lesen Sie: {word}")));
    }
    for i in 0..shadowing {
        let word = words[i % words.len()];
        states.push((
            SHADOWING_PHASE,
            format!(r#"Bitte wiederholen Sie: <w feature="{feature}" variant="contrast">{word}</w>"#),
        ));
    }
    for i in 0..post {
        let word = words[i % words.len()];
        states.push((POST_PHASE, format!("Bitte lesen Sie noch einmal: {word}")));
    }

    let mut xml = String::new();
    let first = if states.is_empty() { "end".to_string() } else { "u0".to_string() };
    writeln!(
        xml,
        r#"<domain id="shadowing-{feature}" initial="{first}" fallback="Bitte noch einmal.">"#
    )
    .unwrap();
    for phase in [BASELINE_PHASE, SHADOWING_PHASE, POST_PHASE] {
        let members: Vec<usize> = (0..states.len()).filter(|&i| states[i].0 == phase).collect();
        if members.is_empty() {
            continue;
        }
        writeln!(xml, r#"  <phase id="{phase}">"#).unwrap();
        for i in members {
            let next = if i + 1 < states.len() {
                format!("u{}", i + 1)
            } else {
                "end".to_string()
            };
            writeln!(
                xml,
                r#"    <state id="u{i}"><prompt>{}</prompt><trigger pattern="*" target="{next}"/></state>"#,
                states[i].1
            )
            .unwrap();
        }
        writeln!(xml, "  </phase>").unwrap();
    }
    writeln!(
        xml,
        r#"  <state id="end" terminal="true"><prompt>Vielen Dank, das war alles.</prompt></state>"#
    )
    .unwrap();
    xml.push_str("</domain>\n");
    xml
}

/// Checks the script rules on a parsed domain and returns the target
/// feature of its stimuli.
pub fn script_feature(domain: &DialogueDomain) -> Result<String, ExperimentError> {
    let ranks: Vec<Option<usize>> = [BASELINE_PHASE, SHADOWING_PHASE, POST_PHASE]
        .iter()
        .map(|p| domain.phase_rank(p))
        .collect();
    let (Some(b), Some(s)) = (ranks[0], ranks[1]) else {
        return Err(ExperimentError::InvalidScript(
            "domain needs a baseline and a shadowing phase".into(),
        ));
    };
    if b > s || ranks[2].is_some_and(|p| p < s) {
        return Err(ExperimentError::InvalidScript(
            "phases must be ordered baseline, shadowing, post".into(),
        ));
    }
    let mut targets: Vec<String> = Vec::new();
    for state in &domain.states {
        if state.phase.as_deref() != Some(SHADOWING_PHASE) {
            continue;
        }
        match state.prompt.words.as_slice() {
            [word] => {
                if !targets.contains(&word.feature_id) {
                    targets.push(word.feature_id.clone());
                }
            }
            words => {
                return Err(ExperimentError::InvalidScript(format!(
                    "stimulus {:?} has {} target features, expected one",
                    state.id,
                    words.len()
                )))
            }
        }
    }
    match targets.as_slice() {
        [single] => Ok(single.clone()),
        [] => Err(ExperimentError::InvalidScript("no stimuli in the shadowing phase".into())),
        _ => Err(ExperimentError::InvalidScript(format!(
            "stimuli target several features ({}); choose one",
            targets.join(", ")
        ))),
    }
}

/// The data points of the stimuli: every stimulus word of `def` in the
/// domain, recorded in each variant it can be realized in.
pub fn stimulus_training_points(domain: &DialogueDomain, def: &FeatureDefinition) -> Vec<LabeledPoint> {
    let mut points = Vec::new();
    for state in &domain.states {
        for word in state.prompt.words.iter().filter(|w| w.feature_id == def.id) {
            let labels: Vec<&str> = match &word.realization {
                Realization::Variant(label) => vec![label.as_str()],
                Realization::Adaptive | Realization::Contrast => {
                    def.variants.iter().map(|v| v.label.as_str()).collect()
                }
            };
            for label in labels {
                if let Some(v) = def.variant(label) {
                    points.push(LabeledPoint::new(v.prototype.clone(), label));
                }
            }
        }
    }
    points
}

/// One participant's utterance stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantSource {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentScript {
    pub feature_config: FeatureConfig,
    pub domain_xml: String,
    pub feature_id: String,
    pub sources: Vec<ParticipantSource>,
}

impl ExperimentScript {
    /// Validates the domain and attaches a classifier for the target
    /// feature trained on the stimulus data points, unless the config
    /// already declares one.
    pub fn new(
        mut feature_config: FeatureConfig,
        domain_xml: String,
        classifier_kind: &str,
        sources: Vec<ParticipantSource>,
    ) -> Result<Self, ExperimentError> {
        let domain = parse_domain(&domain_xml).map_err(SessionError::from)?;
        let feature_id = script_feature(&domain)?;
        let def = feature_config.feature(&feature_id).cloned().ok_or_else(|| {
            ExperimentError::InvalidScript(format!(
                "stimuli target {feature_id:?}, which the feature config lacks"
            ))
        })?;
        if !feature_config.classifiers.iter().any(|c| c.feature == feature_id) {
            feature_config.classifiers.push(ClassifierConfig {
                feature: feature_id.clone(),
                kind: classifier_kind.to_string(),
                training_data: None,
                points: stimulus_training_points(&domain, &def),
            });
        }
        Ok(Self {
            feature_config,
            domain_xml,
            feature_id,
            sources,
        })
    }

    /// Reads every `*.jsonl` file of `dir`, ordered by file name; the file
    /// stem becomes the participant id.
    pub fn load_sources(dir: &Path) -> Result<Vec<ParticipantSource>, ExperimentError> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_error(dir))? {
            let path = entry.map_err(io_error(dir))?.path();
            if path.extension().is_some_and(|e| e == STREAM_EXTENSION) {
                paths.push(path);
            }
        }
        paths.sort();
        paths
            .into_iter()
            .map(|path| {
                let text = fs::read_to_string(&path).map_err(io_error(&path))?;
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(ParticipantSource { id, text })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Archives of the participants that ran, in source order.
    pub archives: Vec<SessionArchive>,
    pub report: ExperimentReport,
}

fn run_participant(
    source: &ParticipantSource,
    resources: &Arc<SessionResources>,
) -> Result<SessionArchive, String> {
    let adapter = Arc::clone(resources.adapter());
    let mut session = Session::new(source.id.clone(), Arc::clone(resources))
        .map_err(|e| e.to_string())?;
    let records = parse_stream(&source.text, adapter.as_ref(), session.model())
        .map_err(|(line, e)| format!("line {line}: {e}"))?;
    for (i, record) in records.into_iter().enumerate() {
        if session.is_terminal() {
            log::warn!(
                "{}: dialogue ended before utterance {}; the rest is ignored",
                source.id,
                i + 1
            );
            break;
        }
        session
            .post_turn(TurnInput::record(record))
            .map_err(|e| format!("utterance {}: {e}", i + 1))?;
    }
    Ok(session.archive())
}

/// Runs every participant in its own session, in parallel. Participants
/// that fail are listed in the report instead of aborting the run.
pub fn run_experiment(script: &ExperimentScript) -> Result<ExperimentOutcome, ExperimentError> {
    let resources = Arc::new(SessionResources::new(
        script.feature_config.clone(),
        &script.domain_xml,
    )?);
    let results: Vec<Result<SessionArchive, String>> = script
        .sources
        .par_iter()
        .map(|source| run_participant(source, &resources))
        .collect();
    let mut archives = Vec::new();
    let mut failures = Vec::new();
    for (source, result) in script.sources.iter().zip(results) {
        match result {
            Ok(archive) => archives.push(archive),
            Err(message) => failures.push(format!("{}: {message}", source.id)),
        }
    }
    let mut report = report_from_archives(&archives, &script.feature_id)?;
    failures.append(&mut report.failures);
    report.failures = failures;
    Ok(ExperimentOutcome { archives, report })
}

/// Analyses archived sessions for one feature. Sessions without shadowed
/// utterances of the feature are listed as failures.
pub fn report_from_archives(
    archives: &[SessionArchive],
    feature_id: &str,
) -> Result<ExperimentReport, ExperimentError> {
    let mut observations = Vec::new();
    let mut failures = Vec::new();
    for archive in archives {
        let Some(def) = archive.resources.feature_config.feature(feature_id) else {
            failures.push(format!("{}: feature {feature_id:?} not configured", archive.session_id));
            continue;
        };
        let obs = observations_from_events(
            &archive.session_id,
            &archive.events,
            feature_id,
            &def.canonical_variant,
        );
        match summarize_session(&obs) {
            Ok(_) => observations.push(obs),
            Err(e) => failures.push(format!("{}: {e}", archive.session_id)),
        }
    }
    let mut report = match experiment_report(&observations, feature_id) {
        Ok(report) => report,
        Err(AnalysisError::NoSessions) if !failures.is_empty() => ExperimentReport {
            feature_id: feature_id.to_string(),
            rows: Vec::new(),
            participants: Vec::new(),
            failures: Vec::new(),
        },
        Err(e) => return Err(e.into()),
    };
    report.failures = failures;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortGroup {
    pub degree: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub feature_id: String,
    pub participants: usize,
    pub groups: Vec<CohortGroup>,
    /// Jitter standard deviation as a fraction of each dimension's range.
    pub noise: f64,
    pub seed: u64,
    pub baseline_utterances: usize,
    pub shadowing_utterances: usize,
    pub post_utterances: usize,
}

impl CohortSpec {
    /// Thirty participants with degrees 0.05, 0.5 and 0.95 in proportions
    /// 23, 50 and 27 percent.
    pub fn three_group(feature_id: &str, seed: u64) -> Self {
        Self {
            feature_id: feature_id.to_string(),
            participants: 30,
            groups: vec![
                CohortGroup {
                    degree: 0.05,
                    proportion: 0.23,
                },
                CohortGroup {
                    degree: 0.5,
                    proportion: 0.50,
                },
                CohortGroup {
                    degree: 0.95,
                    proportion: 0.27,
                },
            ],
            noise: 0.02,
            seed,
            baseline_utterances: DEFAULT_BASELINE_UTTERANCES,
            shadowing_utterances: DEFAULT_SHADOWING_UTTERANCES,
            post_utterances: DEFAULT_POST_UTTERANCES,
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::InvalidSpec(msg));
        if self.groups.is_empty() {
            return bad("no groups".into());
        }
        let total: f64 = self.groups.iter().map(|g| g.proportion).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("proportions sum to {total}, not 1"));
        }
        for g in &self.groups {
            if !(0.0..=1.0).contains(&g.degree) || !(0.0..=1.0).contains(&g.proportion) {
                return bad(format!(
                    "degree {} and proportion {} must lie in [0, 1]",
                    g.degree, g.proportion
                ));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a finite value >= 0", self.noise));
        }
        if self.shadowing_utterances == 0 {
            return bad("no shadowing utterances".into());
        }
        Ok(())
    }

    /// Participants per group by the largest-remainder method.
    pub fn group_sizes(&self) -> Vec<usize> {
        let exact: Vec<f64> = self
            .groups
            .iter()
            .map(|g| g.proportion * self.participants as f64)
            .collect();
        let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = self.participants - sizes.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            sizes[i] += 1;
        }
        sizes
    }
}

/// The design of one synthetic participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPlan {
    pub id: String,
    pub degree: f64,
    pub baseline_variant: String,
    pub stimulus_variant: String,
    /// Per shadowed utterance: whether it realizes the stimulus variant.
    pub shadowed_as_stimulus: Vec<bool>,
}

impl ParticipantPlan {
    /// Fraction of shadowed utterances designed in the stimulus variant.
    pub fn realized_degree(&self) -> f64 {
        let n = self.shadowed_as_stimulus.len();
        self.shadowed_as_stimulus.iter().filter(|&&x| x).count() as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub spec: CohortSpec,
    pub participants: Vec<ParticipantPlan>,
    pub sources: Vec<ParticipantSource>,
}

/// Name of the design manifest written next to the streams.
pub const COHORT_MANIFEST: &str = "cohort.json";

impl SyntheticCohort {
    /// Writes one stream per participant and the design manifest.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let mut written = Vec::new();
        for source in &self.sources {
            let path = dir.join(format!("{}.{STREAM_EXTENSION}", source.id));
            fs::write(&path, &source.text).map_err(io_error(&path))?;
            written.push(path);
        }
        let manifest = serde_json::json!({
            "spec": self.spec,
            "participants": self.participants,
        });
        let path = dir.join(COHORT_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(io_error(&path))?;
        written.push(path);
        Ok(written)
    }
}

/// Generates a deterministic cohort for the three-phase domain built by
/// [`shadowing_domain`] with the same utterance counts.
///
/// Participants are assigned to groups in order. Their baseline variant
/// alternates between the feature's two variants by participant index.
/// Shadowed utterances realize the stimulus variant on a Bernoulli(degree)
/// draw, all other utterances the baseline variant. Values are the variant
/// prototype plus Gaussian jitter with standard deviation `noise` times the
/// range width, clamped to the range.
pub fn generate_synthetic_cohort(
    spec: &CohortSpec,
    def: &FeatureDefinition,
) -> Result<SyntheticCohort, ExperimentError> {
    spec.validate()?;
    if def.id != spec.feature_id {
        return Err(ExperimentError::InvalidSpec(format!(
            "spec is for {:?} but the definition is {:?}",
            spec.feature_id, def.id
        )));
    }
    if def.variants.len() != 2 {
        return Err(ExperimentError::InvalidSpec(format!(
            "feature {:?} needs two variants",
            def.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter: Vec<Normal<f64>> = def
        .dimensions
        .iter()
        .map(|d| Normal::new(0.0, spec.noise * d.width()).expect("noise validated"))
        .collect();
    let words = target_words(&def.id);
    let width = spec.participants.to_string().len().max(2);

    let mut participants = Vec::with_capacity(spec.participants);
    let mut sources = Vec::with_capacity(spec.participants);
    let mut index = 0;
    for (group, size) in spec.groups.iter().zip(spec.group_sizes()) {
        let flip = Bernoulli::new(group.degree).expect("degree validated");
        for _ in 0..size {
            let id = format!("p{:0width$}", index + 1);
            let baseline = &def.variants[index % 2];
            let stimulus = &def.variants[(index + 1) % 2];
            let shadowed: Vec<bool> = (0..spec.shadowing_utterances)
                .map(|_| flip.sample(&mut rng))
                .collect();

            let mut plan_labels: Vec<&str> = Vec::new();
            plan_labels.extend((0..spec.baseline_utterances).map(|_| baseline.label.as_str()));
            plan_labels.extend(shadowed.iter().map(|&s| {
                if s {
                    stimulus.label.as_str()
                } else {
                    baseline.label.as_str()
                }
            }));
            plan_labels.extend((0..spec.post_utterances).map(|_| baseline.label.as_str()));

            let mut text = String::new();
            let phase_starts = [0, spec.baseline_utterances, spec.baseline_utterances + spec.shadowing_utterances];
            for (k, label) in plan_labels.iter().enumerate() {
                let within = k - phase_starts.iter().rev().find(|&&s| s <= k).copied().unwrap_or(0);
                let prototype = &def.variant(label).expect("label from definition").prototype;
                let values: Vec<f64> = prototype
                    .iter()
                    .zip(&def.dimensions)
                    .zip(&jitter)
                    .map(|((p, dim), noise)| (p + noise.sample(&mut rng)).clamp(dim.min, dim.max))
                    .collect();
                let record = UtteranceRecord {
                    speaker: Speaker::User,
                    transcript: words[within % words.len()].to_string(),
                    segments: vec![PhoneSegment {
                        phone: def.phone_for_variant(Some(label)).to_string(),
                        start_ms: 40,
                        end_ms: 200,
                        features: BTreeMap::from([(def.id.clone(), values)]),
                    }],
                };
                text.push_str(&record.to_line());
                text.push('\n');
            }
            participants.push(ParticipantPlan {
                id: id.clone(),
                degree: group.degree,
                baseline_variant: baseline.label.clone(),
                stimulus_variant: stimulus.label.clone(),
                shadowed_as_stimulus: shadowed,
            });
            sources.push(ParticipantSource { id, text });
            index += 1;
        }
    }
    Ok(SyntheticCohort {
        spec: spec.clone(),
        participants,
        sources,
    })
}
