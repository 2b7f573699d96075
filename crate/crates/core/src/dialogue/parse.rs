use std::collections::HashMap;

use roxmltree::{Document, Node, NodeType};

use super::{
    AnnotatedWord, DialogueDomain, DialogueState, DomainError, Pattern, PromptTemplate,
    Realization, Trigger, DEFAULT_FALLBACK_PROMPT,
};

pub(super) fn parse(source: &str) -> Result<DialogueDomain, DomainError> {
    let doc = Document::parse(source).map_err(|e| {
        let pos = e.pos();
        DomainError::Syntax {
            line: pos.row,
            col: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "domain" {
        return Err(schema(
            root.tag_name().name(),
            "root element must be <domain>",
        ));
    }
    check_attributes(root, &["id", "initial", "fallback"])?;
    let id = required(root, "id")?.to_string();
    let initial_state = required(root, "initial")?.to_string();
    let fallback = root
        .attribute("fallback")
        .unwrap_or(DEFAULT_FALLBACK_PROMPT);

    let mut states = Vec::new();
    let mut phases = Vec::new();
    for child in element_children(root)? {
        match child.tag_name().name() {
            "state" => states.push(parse_state(child, None)?),
            "phase" => {
                check_attributes(child, &["id"])?;
                let phase_id = required(child, "id")?.to_string();
                if phases.contains(&phase_id) {
                    return Err(schema("phase", format!("duplicate phase id {phase_id:?}")));
                }
                for grandchild in element_children(child)? {
                    if grandchild.tag_name().name() != "state" {
                        return Err(unknown_element(grandchild));
                    }
                    states.push(parse_state(grandchild, Some(&phase_id))?);
                }
                phases.push(phase_id);
            }
            _ => return Err(unknown_element(child)),
        }
    }
    if states.is_empty() {
        return Err(schema("domain", "no states declared"));
    }

    let mut index = HashMap::new();
    for (i, state) in states.iter().enumerate() {
        if index.insert(state.id.clone(), i).is_some() {
            return Err(schema("state", format!("duplicate state id {:?}", state.id)));
        }
    }
    if !index.contains_key(&initial_state) {
        return Err(DomainError::DanglingReference(initial_state));
    }
    for state in &states {
        let targets = state
            .triggers
            .iter()
            .map(|t| &t.target)
            .chain(state.on_timeout.iter());
        for target in targets {
            if !index.contains_key(target) {
                return Err(DomainError::DanglingReference(target.clone()));
            }
        }
    }

    Ok(DialogueDomain {
        id,
        states,
        initial_state,
        phases,
        fallback: PromptTemplate::plain(fallback),
        index,
    })
}

fn parse_state(node: Node, phase: Option<&str>) -> Result<DialogueState, DomainError> {
    check_attributes(node, &["id", "terminal", "timeout"])?;
    let id = required(node, "id")?.to_string();
    if id.trim().is_empty() {
        return Err(schema("state", "empty state id"));
    }
    let is_terminal = match node.attribute("terminal") {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => {
            return Err(schema(
                "state",
                format!("terminal must be true or false, got {other:?}"),
            ))
        }
    };
    let on_timeout = node.attribute("timeout").map(str::to_string);
    let mut prompt = None;
    let mut triggers = Vec::new();
    for child in element_children(node)? {
        match child.tag_name().name() {
            "prompt" => {
                if prompt.is_some() {
                    return Err(schema("prompt", format!("state {id:?} has two prompts")));
                }
                prompt = Some(parse_prompt(child)?);
            }
            "trigger" => {
                check_attributes(child, &["pattern", "target"])?;
                let raw = required(child, "pattern")?;
                if raw.trim().is_empty() {
                    return Err(schema("trigger", format!("empty pattern in state {id:?}")));
                }
                if let Some(text) = child.children().find(|c| c.is_text()) {
                    if !text.text().unwrap_or("").trim().is_empty() {
                        return Err(schema("trigger", "unexpected text content"));
                    }
                }
                triggers.push(Trigger {
                    pattern: Pattern::parse(raw),
                    target: required(child, "target")?.to_string(),
                });
            }
            _ => return Err(unknown_element(child)),
        }
    }
    let prompt = prompt.ok_or_else(|| schema("state", format!("state {id:?} has no prompt")))?;
    if !is_terminal && triggers.is_empty() && on_timeout.is_none() {
        return Err(schema(
            "state",
            format!("non-terminal state {id:?} has no trigger or timeout"),
        ));
    }
    Ok(DialogueState {
        id,
        phase: phase.map(str::to_string),
        prompt,
        triggers,
        on_timeout,
        is_terminal,
    })
}

/// Builds a prompt from mixed text and `<w feature=".." [variant=".."]>`
/// children, normalizing whitespace.
fn parse_prompt(node: Node) -> Result<PromptTemplate, DomainError> {
    check_attributes(node, &[])?;
    let mut raw = String::new();
    // (byte offset of the annotated text in `raw`, feature, realization)
    let mut marks: Vec<(usize, String, Realization)> = Vec::new();
    for child in node.children() {
        match child.node_type() {
            NodeType::Text => raw.push_str(child.text().unwrap_or("")),
            NodeType::Comment | NodeType::PI => {}
            NodeType::Element => {
                if child.tag_name().name() != "w" {
                    return Err(unknown_element(child));
                }
                check_attributes(child, &["feature", "variant"])?;
                let feature = required(child, "feature")?.to_string();
                if feature.trim().is_empty() {
                    return Err(schema("w", "empty feature attribute"));
                }
                let realization = match child.attribute("variant") {
                    None => Realization::Adaptive,
                    Some("contrast") => Realization::Contrast,
                    Some(label) if !label.is_empty() => Realization::Variant(label.to_string()),
                    Some(_) => return Err(schema("w", "empty variant attribute")),
                };
                let mut inner = String::new();
                for c in child.children() {
                    match c.node_type() {
                        NodeType::Text => inner.push_str(c.text().unwrap_or("")),
                        NodeType::Element => return Err(unknown_element(c)),
                        _ => {}
                    }
                }
                if inner.trim().is_empty() {
                    return Err(schema("w", "annotated word is empty"));
                }
                if inner.trim().contains(char::is_whitespace) {
                    return Err(schema("w", "annotation must cover a single word"));
                }
                marks.push((raw.len(), feature, realization));
                raw.push_str(&inner);
            }
            NodeType::Root => {}
        }
    }

    let words: Vec<&str> = raw.split_whitespace().collect();
    let text = words.join(" ");
    let mut annotated = Vec::new();
    for (offset, feature_id, realization) in marks {
        // the annotation belongs to the word containing its first non-space byte
        let start = offset + raw[offset..].len() - raw[offset..].trim_start().len();
        let word_index = raw[..start].split_whitespace().count()
            - usize::from(start > 0 && !raw[..start].ends_with(char::is_whitespace));
        annotated.push(AnnotatedWord {
            word_index,
            word: words[word_index].to_string(),
            feature_id,
            realization,
        });
    }
    Ok(PromptTemplate {
        text,
        words: annotated,
    })
}

fn element_children<'a, 'i>(node: Node<'a, 'i>) -> Result<Vec<Node<'a, 'i>>, DomainError> {
    let mut out = Vec::new();
    for child in node.children() {
        match child.node_type() {
            NodeType::Element => out.push(child),
            NodeType::Text => {
                if !child.text().unwrap_or("").trim().is_empty() {
                    return Err(schema(
                        node.tag_name().name(),
                        "unexpected text content",
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn check_attributes(node: Node, allowed: &[&str]) -> Result<(), DomainError> {
    for attr in node.attributes() {
        if attr.namespace().is_some() || !allowed.contains(&attr.name()) {
            return Err(schema(
                node.tag_name().name(),
                format!("unknown attribute {:?}", attr.name()),
            ));
        }
    }
    Ok(())
}

fn required<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, DomainError> {
    node.attribute(name).ok_or_else(|| {
        schema(
            node.tag_name().name(),
            format!("missing attribute {name:?}"),
        )
    })
}

fn unknown_element(node: Node) -> DomainError {
    let pos = node.document().text_pos_at(node.range().start);
    schema(
        node.tag_name().name(),
        format!("unexpected element at {}:{}", pos.row, pos.col),
    )
}

fn schema(element: &str, reason: impl Into<String>) -> DomainError {
    DomainError::Schema {
        element: element.to_string(),
        reason: reason.into(),
    }
}
