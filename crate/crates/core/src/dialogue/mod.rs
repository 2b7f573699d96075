//! XML dialogue domains and the finite-state dialogue manager.
//!
//! A domain is a set of states, each with a prompt and an ordered list of
//! triggers. States may be grouped into phases, which experiment scripts
//! use to separate baseline, shadowing and post-test blocks.
//!
//! ```xml
//! <domain id="demo" initial="ask" fallback="Sorry, once more please?">
//!   <state id="ask">
//!     <prompt>War das <w feature="ae">Gerät</w> sehr teuer?</prompt>
//!     <trigger pattern="ja" target="done"/>
//!     <trigger pattern="*" target="ask"/>
//!   </state>
//!   <state id="done" terminal="true"><prompt>Danke!</prompt></state>
//! </domain>
//! ```

mod parse;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::ConvergenceModel;

pub const DEFAULT_FALLBACK_PROMPT: &str = "Sorry, could you say that again?";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax {
        line: u32,
        col: u32,
        message: String,
    },
    #[error("schema error in <{element}>: {reason}")]
    Schema { element: String, reason: String },
    #[error("reference to undeclared state {0:?}")]
    DanglingReference(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("unknown state {0:?}")]
    UnknownState(String),
    #[error("state {0:?} is terminal")]
    TerminalState(String),
    #[error("prompt annotates unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("feature {feature:?} has no variant {variant:?}")]
    UnknownVariant { feature: String, variant: String },
}

/// How an annotated word realizes its feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "variant")]
pub enum Realization {
    /// The convergence model's current value.
    Adaptive,
    /// The prototype of a fixed variant (stimulus).
    Variant(String),
    /// The prototype of the variant opposite the user's baseline variant.
    Contrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedWord {
    /// Index of the word in the whitespace-split prompt text.
    pub word_index: usize,
    pub word: String,
    pub feature_id: String,
    pub realization: Realization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    pub words: Vec<AnnotatedWord>,
}

impl PromptTemplate {
    pub fn plain(text: &str) -> Self {
        Self {
            text: text.split_whitespace().collect::<Vec<_>>().join(" "),
            words: Vec::new(),
        }
    }

    /// Feature ids in order of first annotation.
    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for w in &self.words {
            if !out.contains(&w.feature_id) {
                out.push(w.feature_id.clone());
            }
        }
        out
    }
}

/// Case-insensitive trigger pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pattern {
    /// Matches when the input contains the text.
    Substring(String),
    /// `*` matches any run of characters; anchored at both ends.
    Wildcard(String),
}

impl Pattern {
    pub fn parse(raw: &str) -> Self {
        let lowered = raw.trim().to_lowercase();
        if lowered.contains('*') {
            Pattern::Wildcard(lowered)
        } else {
            Pattern::Substring(lowered)
        }
    }

    pub fn matches(&self, input: &str) -> bool {
        let input = input.trim().to_lowercase();
        match self {
            Pattern::Substring(needle) => input.contains(needle.as_str()),
            Pattern::Wildcard(glob) => wildcard_match(glob, &input),
        }
    }
}

fn wildcard_match(glob: &str, input: &str) -> bool {
    let parts: Vec<&str> = glob.split('*').collect();
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !input.starts_with(first) {
        return false;
    }
    let mut rest = &input[first.len()..];
    for part in &parts[1..parts.len() - 1] {
        match rest.find(part) {
            Some(at) => rest = &rest[at + part.len()..],
            None => return false,
        }
    }
    rest.len() >= last.len() && rest.ends_with(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub pattern: Pattern,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueState {
    pub id: String,
    pub phase: Option<String>,
    pub prompt: PromptTemplate,
    pub triggers: Vec<Trigger>,
    pub on_timeout: Option<String>,
    pub is_terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueDomain {
    pub id: String,
    pub states: Vec<DialogueState>,
    pub initial_state: String,
    /// Phase ids in declaration order.
    pub phases: Vec<String>,
    pub fallback: PromptTemplate,
    index: HashMap<String, usize>,
}

/// Result of [`advance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<'a> {
    pub next_state: &'a str,
    pub template: &'a PromptTemplate,
    /// False when no trigger fired and the fallback prompt was chosen.
    pub matched: bool,
}

/// Parses a domain file. Unknown elements and attributes are errors.
pub fn parse_domain(source: &str) -> Result<DialogueDomain, DomainError> {
    parse::parse(source)
}

impl DialogueDomain {
    pub fn state(&self, id: &str) -> Result<&DialogueState, DialogueError> {
        self.index
            .get(id)
            .map(|&i| &self.states[i])
            .ok_or_else(|| DialogueError::UnknownState(id.to_string()))
    }

    pub fn initial(&self) -> &DialogueState {
        &self.states[self.index[&self.initial_state]]
    }

    pub fn phase_rank(&self, phase: &str) -> Option<usize> {
        self.phases.iter().position(|p| p == phase)
    }
}

/// Fires the first trigger, in declaration order, whose pattern matches
/// `user_text`. Without a match the state is kept and the domain's fallback
/// prompt is returned.
pub fn advance<'a>(
    domain: &'a DialogueDomain,
    current_state_id: &str,
    user_text: &str,
) -> Result<Transition<'a>, DialogueError> {
    let state = domain.state(current_state_id)?;
    if state.is_terminal {
        return Err(DialogueError::TerminalState(state.id.clone()));
    }
    for trigger in &state.triggers {
        if trigger.pattern.matches(user_text) {
            let next = domain.state(&trigger.target)?;
            return Ok(Transition {
                next_state: &next.id,
                template: &next.prompt,
                matched: true,
            });
        }
    }
    Ok(Transition {
        next_state: &state.id,
        template: &domain.fallback,
        matched: false,
    })
}

/// Follows the state's timeout edge, if it has one.
pub fn advance_on_timeout<'a>(
    domain: &'a DialogueDomain,
    current_state_id: &str,
) -> Result<Option<Transition<'a>>, DialogueError> {
    let state = domain.state(current_state_id)?;
    if state.is_terminal {
        return Err(DialogueError::TerminalState(state.id.clone()));
    }
    match &state.on_timeout {
        None => Ok(None),
        Some(target) => {
            let next = domain.state(target)?;
            Ok(Some(Transition {
                next_state: &next.id,
                template: &next.prompt,
                matched: true,
            }))
        }
    }
}

/// One realized feature-bearing word of a system utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Production {
    pub word_index: usize,
    pub word: String,
    pub feature_id: String,
    pub phone: String,
    pub values: Vec<f64>,
    /// Set when the word realizes a fixed variant instead of the model state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_variant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemUtterance {
    pub text: String,
    pub feature_targets: BTreeMap<String, Vec<f64>>,
    pub contains_features: Vec<String>,
    pub productions: Vec<Production>,
}

/// Fills a prompt's feature annotations from the convergence model.
///
/// `baselines` maps feature ids to the user's baseline variant and is only
/// consulted for `contrast` annotations; without an entry the contrast is
/// taken against the canonical variant.
pub fn render_response(
    template: &PromptTemplate,
    model: &ConvergenceModel,
    baselines: &BTreeMap<String, String>,
) -> Result<SystemUtterance, DialogueError> {
    let mut productions = Vec::with_capacity(template.words.len());
    let mut feature_targets = BTreeMap::new();
    for word in &template.words {
        let def = model
            .definition(&word.feature_id)
            .map_err(|_| DialogueError::UnknownFeature(word.feature_id.clone()))?;
        let pinned = match &word.realization {
            Realization::Adaptive => None,
            Realization::Variant(label) => Some(label.clone()),
            Realization::Contrast => {
                let reference = baselines
                    .get(&def.id)
                    .unwrap_or(&def.canonical_variant);
                def.variants
                    .iter()
                    .find(|v| &v.label != reference)
                    .map(|v| v.label.clone())
            }
        };
        let values = match &pinned {
            None => model
                .state(&def.id)
                .map_err(|_| DialogueError::UnknownFeature(def.id.clone()))?
                .current_value
                .clone(),
            Some(label) => def
                .variant(label)
                .ok_or_else(|| DialogueError::UnknownVariant {
                    feature: def.id.clone(),
                    variant: label.clone(),
                })?
                .prototype
                .clone(),
        };
        feature_targets.insert(def.id.clone(), values.clone());
        productions.push(Production {
            word_index: word.word_index,
            word: word.word.clone(),
            feature_id: def.id.clone(),
            phone: def.phone_for_variant(pinned.as_deref()).to_string(),
            values,
            pinned_variant: pinned,
        });
    }
    Ok(SystemUtterance {
        text: template.text.clone(),
        feature_targets,
        contains_features: template.features(),
        productions,
    })
}
