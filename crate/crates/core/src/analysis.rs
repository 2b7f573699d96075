//! Post-hoc analysis of mutual phonetic influence.
//!
//! The shadowing phase of a session is treated as an annotation task: for
//! every shadowed utterance one annotator is the classifier's prediction of
//! the user's realization, the other the prediction of the stimulus the user
//! was listening to. Sessions are grouped by convergence degree and the
//! annotations are pooled per group.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub const BASELINE_PHASE: &str = "baseline";
pub const SHADOWING_PHASE: &str = "shadowing";
pub const POST_PHASE: &str = "post";

/// Upper bound (inclusive) of the Low group.
pub const LOW_THRESHOLD: f64 = 0.10;
/// Lower bound (inclusive) of the High group.
pub const HIGH_THRESHOLD: f64 = 0.90;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("annotation list is empty")]
    Empty,
    #[error("no shadowing data for {0}")]
    NoData(String),
    #[error("degree {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("kappa undefined: both annotators constant and disagreeing")]
    DegenerateMarginals,
    #[error("no sessions to report on")]
    NoSessions,
}

/// Paired labels of the user's and the model's predictor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPair {
    pub items: Vec<(String, String)>,
}

impl AnnotationPair {
    pub fn new(items: Vec<(String, String)>) -> Self {
        Self { items }
    }

    pub fn from_labels(user: &[&str], model: &[&str]) -> Self {
        assert_eq!(user.len(), model.len());
        Self {
            items: user
                .iter()
                .zip(model)
                .map(|(u, m)| (u.to_string(), m.to_string()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn extend(&mut self, other: &AnnotationPair) {
        self.items.extend_from_slice(&other.items);
    }

    fn observed_agreement(&self) -> f64 {
        let agree = self.items.iter().filter(|(u, m)| u == m).count();
        agree as f64 / self.items.len() as f64
    }

    /// Marginal proportions per label: (user, model).
    fn marginals(&self) -> BTreeMap<&str, (f64, f64)> {
        let n = self.items.len() as f64;
        let mut out: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        for (u, m) in &self.items {
            out.entry(u.as_str()).or_default().0 += 1.0;
            out.entry(m.as_str()).or_default().1 += 1.0;
        }
        for v in out.values_mut() {
            v.0 /= n;
            v.1 /= n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorGroup {
    Low,
    Mid,
    High,
}

impl BehaviorGroup {
    pub const ALL: [BehaviorGroup; 3] = [BehaviorGroup::Low, BehaviorGroup::Mid, BehaviorGroup::High];
}

impl fmt::Display for BehaviorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BehaviorGroup::Low => "Low",
            BehaviorGroup::Mid => "Mid",
            BehaviorGroup::High => "High",
        })
    }
}

/// `degree <= 0.10` is Low, `degree >= 0.90` is High, anything between Mid.
pub fn classify_behavior(degree: f64) -> Result<BehaviorGroup, AnalysisError> {
    if !(0.0..=1.0).contains(&degree) {
        return Err(AnalysisError::OutOfRange(degree));
    }
    Ok(if degree <= LOW_THRESHOLD {
        BehaviorGroup::Low
    } else if degree >= HIGH_THRESHOLD {
        BehaviorGroup::High
    } else {
        BehaviorGroup::Mid
    })
}

pub fn percent_agreement(pair: &AnnotationPair) -> Result<f64, AnalysisError> {
    if pair.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(100.0 * pair.observed_agreement())
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(pair: &AnnotationPair) -> Result<f64, AnalysisError> {
    if pair.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let p_o = pair.observed_agreement();
    let p_e: f64 = pair.marginals().values().map(|(u, m)| u * m).sum();
    if p_e >= 1.0 {
        return if p_o >= 1.0 {
            Ok(1.0)
        } else {
            Err(AnalysisError::DegenerateMarginals)
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Large-sample z-test of kappa against zero, using the null variance of
/// Fleiss, Cohen and Everitt (1969).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaTest {
    pub kappa: f64,
    pub z: f64,
    pub p_value: f64,
}

impl KappaTest {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

pub fn significance_stars(p_value: f64) -> &'static str {
    if p_value < 0.001 {
        "***"
    } else if p_value < 0.01 {
        "**"
    } else if p_value < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Returns `None` when the variance under the null is zero or undefined.
pub fn kappa_z_test(pair: &AnnotationPair) -> Result<Option<KappaTest>, AnalysisError> {
    let kappa = cohen_kappa(pair)?;
    let n = pair.len() as f64;
    let marginals = pair.marginals();
    let p_e: f64 = marginals.values().map(|(u, m)| u * m).sum();
    let cross: f64 = marginals.values().map(|(u, m)| u * m * (u + m)).sum();
    let variance = (p_e + p_e * p_e - cross) / (n * (1.0 - p_e).powi(2));
    if !(variance.is_finite() && variance > 0.0) {
        return Ok(None);
    }
    let z = kappa / variance.sqrt();
    let normal = Normal::standard();
    let p_value = 2.0 * normal.sf(z.abs());
    Ok(Some(KappaTest { kappa, z, p_value }))
}

/// One user utterance of a session as seen by the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceObservation {
    pub turn_index: usize,
    pub phase: Option<String>,
    /// Predicted variant of the user's realization.
    pub user_label: String,
    /// Predicted variant of the system production the user was answering.
    pub stimulus_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionObservations {
    pub session_id: String,
    pub feature_id: String,
    pub canonical_variant: String,
    pub utterances: Vec<UtteranceObservation>,
}

impl SessionObservations {
    fn in_phase<'a>(&'a self, phase: &'a str) -> impl Iterator<Item = &'a UtteranceObservation> {
        self.utterances
            .iter()
            .filter(move |u| u.phase.as_deref() == Some(phase))
    }

    /// Majority predicted variant of the baseline phase; ties and missing
    /// data fall back to the canonical variant.
    pub fn baseline_variant(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in self.in_phase(BASELINE_PHASE) {
            *counts.entry(u.user_label.as_str()).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let leaders: Vec<&str> = counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(l, _)| *l)
            .collect();
        match leaders.as_slice() {
            [single] if best > 0 => single.to_string(),
            _ => self.canonical_variant.clone(),
        }
    }

    /// Shadowed utterances paired with the stimulus they answered.
    pub fn annotation_pair(&self) -> AnnotationPair {
        AnnotationPair::new(
            self.in_phase(SHADOWING_PHASE)
                .filter_map(|u| {
                    u.stimulus_label
                        .as_ref()
                        .map(|s| (u.user_label.clone(), s.clone()))
                })
                .collect(),
        )
    }
}

/// Fraction of shadowed utterances whose predicted variant differs from the
/// participant's baseline variant.
pub fn convergence_degree(
    session: &SessionObservations,
    baseline_variant: &str,
) -> Result<f64, AnalysisError> {
    let mut total = 0usize;
    let mut changed = 0usize;
    for u in session.in_phase(SHADOWING_PHASE) {
        total += 1;
        if u.user_label != baseline_variant {
            changed += 1;
        }
    }
    if total == 0 {
        return Err(AnalysisError::NoData(session.session_id.clone()));
    }
    Ok(changed as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub session_id: String,
    pub baseline_variant: String,
    pub degree: f64,
    pub group: BehaviorGroup,
    pub shadowed: usize,
}

pub fn summarize_session(session: &SessionObservations) -> Result<ParticipantSummary, AnalysisError> {
    let baseline_variant = session.baseline_variant();
    let degree = convergence_degree(session, &baseline_variant)?;
    Ok(ParticipantSummary {
        session_id: session.session_id.clone(),
        group: classify_behavior(degree)?,
        degree,
        shadowed: session.in_phase(SHADOWING_PHASE).count(),
        baseline_variant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub sessions: usize,
    pub items: usize,
    pub similarity_percent: Option<f64>,
    pub kappa: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
    pub size_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub feature_id: String,
    /// Low, Mid, High, then All.
    pub rows: Vec<ReportRow>,
    pub participants: Vec<ParticipantSummary>,
    #[serde(default)]
    pub failures: Vec<String>,
}

impl ExperimentReport {
    pub fn row(&self, group: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    /// Delimited text: header, one row per group plus All, then one comment
    /// line per failed participant.
    pub fn write_delimited<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["group", "similarity_pct", "kappa", "stars", "size_pct"])?;
        let fmt_opt = |v: Option<f64>, digits: usize| match v {
            Some(x) => format!("{x:.digits$}"),
            None => "NA".to_string(),
        };
        for row in &self.rows {
            wtr.write_record([
                row.group.clone(),
                fmt_opt(row.similarity_percent, 1),
                fmt_opt(row.kappa, 3),
                row.stars.clone(),
                format!("{:.1}", row.size_percent),
            ])?;
        }
        let mut inner = wtr.into_inner().map_err(|e| e.into_error())?;
        for failure in &self.failures {
            writeln!(inner, "# failed: {failure}")?;
        }
        inner.flush()
    }

    pub fn to_delimited_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_delimited(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("report is utf-8")
    }
}

fn pooled_row(label: &str, pair: &AnnotationPair, sessions: usize, total: usize) -> ReportRow {
    let (similarity_percent, kappa, test) = if pair.is_empty() {
        (None, None, None)
    } else {
        (
            percent_agreement(pair).ok(),
            cohen_kappa(pair).ok(),
            kappa_z_test(pair).ok().flatten(),
        )
    };
    ReportRow {
        group: label.to_string(),
        sessions,
        items: pair.len(),
        similarity_percent,
        kappa,
        p_value: test.map(|t| t.p_value),
        stars: test.map(|t| t.stars().to_string()).unwrap_or_default(),
        size_percent: 100.0 * sessions as f64 / total as f64,
    }
}

/// Groups sessions by behavior and pools their annotations per group.
pub fn experiment_report(
    sessions: &[SessionObservations],
    feature_id: &str,
) -> Result<ExperimentReport, AnalysisError> {
    if sessions.is_empty() {
        return Err(AnalysisError::NoSessions);
    }
    let mut participants = Vec::with_capacity(sessions.len());
    let mut pooled: BTreeMap<BehaviorGroup, (AnnotationPair, usize)> = BTreeMap::new();
    let mut all = AnnotationPair::default();
    for session in sessions {
        let summary = summarize_session(session)?;
        let pair = session.annotation_pair();
        let slot = pooled.entry(summary.group).or_default();
        slot.0.extend(&pair);
        slot.1 += 1;
        all.extend(&pair);
        participants.push(summary);
    }
    let total = sessions.len();
    let mut rows: Vec<ReportRow> = BehaviorGroup::ALL
        .iter()
        .map(|g| {
            let (pair, count) = pooled.remove(g).unwrap_or_default();
            pooled_row(&g.to_string(), &pair, count, total)
        })
        .collect();
    rows.push(pooled_row("All", &all, total, total));
    Ok(ExperimentReport {
        feature_id: feature_id.to_string(),
        rows,
        participants,
        failures: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_examples_and_boundaries() {
        use BehaviorGroup::*;
        assert_eq!(classify_behavior(0.05), Ok(Low));
        assert_eq!(classify_behavior(0.50), Ok(Mid));
        assert_eq!(classify_behavior(0.95), Ok(High));
        assert_eq!(classify_behavior(0.10), Ok(Low));
        assert_eq!(classify_behavior(0.90), Ok(High));
        assert_eq!(classify_behavior(1.5), Err(AnalysisError::OutOfRange(1.5)));
        assert!(classify_behavior(f64::NAN).is_err());
    }

    #[test]
    fn agreement_examples() {
        let same = AnnotationPair::from_labels(&["A", "B"], &["A", "B"]);
        assert_eq!(percent_agreement(&same), Ok(100.0));
        let none = AnnotationPair::from_labels(&["A", "B"], &["B", "A"]);
        assert_eq!(percent_agreement(&none), Ok(0.0));
        let user: Vec<&str> = (0..25).map(|i| if i < 6 { "A" } else { "B" }).collect();
        let model: Vec<&str> = (0..25).map(|i| if i < 6 { "A" } else { "C" }).collect();
        assert_eq!(
            percent_agreement(&AnnotationPair::from_labels(&user, &model)),
            Ok(24.0)
        );
        assert_eq!(
            percent_agreement(&AnnotationPair::default()),
            Err(AnalysisError::Empty)
        );
    }

    #[test]
    fn kappa_examples() {
        let same = AnnotationPair::from_labels(&["A", "B", "A"], &["A", "B", "A"]);
        assert_eq!(cohen_kappa(&same), Ok(1.0));
        let zero = AnnotationPair::from_labels(&["A", "B", "A", "B"], &["A", "A", "B", "B"]);
        assert_eq!(cohen_kappa(&zero), Ok(0.0));
        let neg = AnnotationPair::from_labels(&["A", "A", "B", "B"], &["B", "B", "A", "A"]);
        assert_eq!(cohen_kappa(&neg), Ok(-1.0));
        assert_eq!(cohen_kappa(&AnnotationPair::default()), Err(AnalysisError::Empty));
    }

    #[test]
    fn kappa_degenerate_marginals() {
        let constant = AnnotationPair::from_labels(&["A", "A"], &["A", "A"]);
        assert_eq!(cohen_kappa(&constant), Ok(1.0));
        // one annotator constant: p_e < 1, kappa is 0
        let half = AnnotationPair::from_labels(&["A", "A"], &["A", "B"]);
        assert_eq!(cohen_kappa(&half), Ok(0.0));
    }

    #[test]
    fn z_test_signs_and_stars() {
        let user: Vec<&str> = (0..40).map(|i| if i % 2 == 0 { "A" } else { "B" }).collect();
        let strong = AnnotationPair::from_labels(&user, &user);
        let t = kappa_z_test(&strong).unwrap().unwrap();
        assert!(t.z > 0.0 && t.p_value < 0.001);
        assert_eq!(t.stars(), "***");
        // kappa = 0 gives p = 1
        let zero = AnnotationPair::from_labels(&["A", "B", "A", "B"], &["A", "A", "B", "B"]);
        let t = kappa_z_test(&zero).unwrap().unwrap();
        assert!((t.p_value - 1.0).abs() < 1e-12);
        assert_eq!(t.stars(), "");
        // constant annotators have no null variance
        let constant = AnnotationPair::from_labels(&["A", "A"], &["A", "A"]);
        assert_eq!(kappa_z_test(&constant).unwrap(), None);
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.005), "**");
    }

    #[test]
    fn z_test_known_value() {
        // 2x2 table [[20, 5], [10, 15]], n = 50
        let mut items = Vec::new();
        for (u, m, count) in [("A", "A", 20), ("A", "B", 5), ("B", "A", 10), ("B", "B", 15)] {
            for _ in 0..count {
                items.push((u.to_string(), m.to_string()));
            }
        }
        let pair = AnnotationPair::new(items);
        let t = kappa_z_test(&pair).unwrap().unwrap();
        // p_o = 0.7, p_e = 0.5*0.6 + 0.5*0.4 = 0.5, kappa = 0.4
        assert!((t.kappa - 0.4).abs() < 1e-12);
        // var0 = (0.5 + 0.25 - (0.5*0.6*1.1 + 0.5*0.4*0.9)) / (50 * 0.25) = 0.24 / 12.5
        let expected_z = 0.4 / (0.24f64 / 12.5).sqrt();
        assert!((t.z - expected_z).abs() < 1e-9);
    }

    fn obs(phase: &str, user: &str, stim: Option<&str>, turn: usize) -> UtteranceObservation {
        UtteranceObservation {
            turn_index: turn,
            phase: Some(phase.to_string()),
            user_label: user.to_string(),
            stimulus_label: stim.map(str::to_string),
        }
    }

    fn session(id: &str, baseline: &str, shadow: &[&str], stim: &str) -> SessionObservations {
        let mut utterances: Vec<_> = (0..3).map(|t| obs(BASELINE_PHASE, baseline, None, t)).collect();
        for (i, u) in shadow.iter().enumerate() {
            utterances.push(obs(SHADOWING_PHASE, u, Some(stim), 3 + i));
        }
        SessionObservations {
            session_id: id.into(),
            feature_id: "ae".into(),
            canonical_variant: "A".into(),
            utterances,
        }
    }

    #[test]
    fn degree_counts_changes_from_baseline() {
        let s = session("p", "A", &["A"; 10], "B");
        assert_eq!(convergence_degree(&s, "A"), Ok(0.0));
        let s = session("p", "A", &["B"; 10], "B");
        assert_eq!(convergence_degree(&s, "A"), Ok(1.0));
        let shadow: Vec<&str> = (0..12).map(|i| if i % 4 == 0 { "B" } else { "A" }).collect();
        let s = session("p", "A", &shadow, "B");
        assert_eq!(convergence_degree(&s, "A"), Ok(0.25));
        let empty = session("q", "A", &[], "B");
        assert_eq!(
            convergence_degree(&empty, "A"),
            Err(AnalysisError::NoData("q".into()))
        );
    }

    #[test]
    fn baseline_majority_and_tie() {
        let mut s = session("p", "B", &["B"], "A");
        assert_eq!(s.baseline_variant(), "B");
        s.utterances.push(obs(BASELINE_PHASE, "A", None, 99));
        s.utterances.push(obs(BASELINE_PHASE, "A", None, 100));
        s.utterances.push(obs(BASELINE_PHASE, "A", None, 101));
        // 3 vs 3: canonical
        assert_eq!(s.baseline_variant(), "A");
        s.canonical_variant = "B".into();
        assert_eq!(s.baseline_variant(), "B");
    }

    #[test]
    fn single_session_report() {
        let s = session("p", "A", &["A"; 10], "B");
        let report = experiment_report(&[s], "ae").unwrap();
        assert_eq!(report.row("Low").unwrap().size_percent, 100.0);
        assert_eq!(report.row("Mid").unwrap().size_percent, 0.0);
        assert_eq!(report.row("Mid").unwrap().kappa, None);
        assert_eq!(report.row("All").unwrap().sessions, 1);
        assert_eq!(experiment_report(&[], "ae"), Err(AnalysisError::NoSessions));
    }

    #[test]
    fn designed_cohort_sizes() {
        let mut sessions = Vec::new();
        let degrees = [(0usize, 2usize), (5, 5), (10, 3)];
        let mut id = 0;
        for (changed, count) in degrees {
            for _ in 0..count {
                let shadow: Vec<&str> = (0..10).map(|i| if i < changed { "B" } else { "A" }).collect();
                sessions.push(session(&format!("p{id}"), "A", &shadow, "B"));
                id += 1;
            }
        }
        let report = experiment_report(&sessions, "ae").unwrap();
        let sizes: Vec<f64> = report.rows.iter().map(|r| r.size_percent).collect();
        assert_eq!(sizes, vec![20.0, 50.0, 30.0, 100.0]);
        let text = report.to_delimited_string();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("group,similarity_pct,kappa,stars,size_pct"));
        assert!(lines.next().unwrap().starts_with("Low,0.0,"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn failures_are_listed_in_footer() {
        let mut report = experiment_report(&[session("p", "A", &["A"], "B")], "ae").unwrap();
        report.failures.push("p7: bad record".into());
        assert!(report
            .to_delimited_string()
            .ends_with("# failed: p7: bad record\n"));
    }
}
