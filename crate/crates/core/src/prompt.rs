//! Prompt templates and the output grammars that parse their replies.
//!
//! The three generation templates (`okr_expand`, `agent_gen`,
//! `criteria_gen`) are kept word for word; the rest are the plumbing prompts
//! the workflow needs. All of them live as text assets under `templates/`
//! with `{{slot}}` placeholders.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_CRITERION_WORDS: usize = 200;
pub const MAX_SCORE: u8 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("slot `{0}` must not be empty")]
    EmptySlot(&'static str),
    #[error("template {template} is missing slot `{slot}`")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("template {template} has no slot `{slot}`")]
    UnknownSlot { template: TemplateId, slot: String },
}

/// A reply that does not follow the requested output grammar.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("format error: {0}")]
pub struct FormatError(pub String);

impl FormatError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    OkrExpand,
    AgentGen,
    CriteriaGen,
    ObjectivePropose,
    ObjectiveConsolidate,
    SolutionExpand,
    SolutionReview,
    SolutionModify,
    SolutionScore,
    Cot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::OkrExpand,
        TemplateId::AgentGen,
        TemplateId::CriteriaGen,
        TemplateId::ObjectivePropose,
        TemplateId::ObjectiveConsolidate,
        TemplateId::SolutionExpand,
        TemplateId::SolutionReview,
        TemplateId::SolutionModify,
        TemplateId::SolutionScore,
        TemplateId::Cot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::OkrExpand => "okr_expand",
            TemplateId::AgentGen => "agent_gen",
            TemplateId::CriteriaGen => "criteria_gen",
            TemplateId::ObjectivePropose => "objective_propose",
            TemplateId::ObjectiveConsolidate => "objective_consolidate",
            TemplateId::SolutionExpand => "solution_expand",
            TemplateId::SolutionReview => "solution_review",
            TemplateId::SolutionModify => "solution_modify",
            TemplateId::SolutionScore => "solution_score",
            TemplateId::Cot => "cot",
        }
    }

    fn asset(self) -> &'static str {
        match self {
            TemplateId::OkrExpand => include_str!("../templates/okr_expand.txt"),
            TemplateId::AgentGen => include_str!("../templates/agent_gen.txt"),
            TemplateId::CriteriaGen => include_str!("../templates/criteria_gen.txt"),
            TemplateId::ObjectivePropose => include_str!("../templates/objective_propose.txt"),
            TemplateId::ObjectiveConsolidate => {
                include_str!("../templates/objective_consolidate.txt")
            }
            TemplateId::SolutionExpand => include_str!("../templates/solution_expand.txt"),
            TemplateId::SolutionReview => include_str!("../templates/solution_review.txt"),
            TemplateId::SolutionModify => include_str!("../templates/solution_modify.txt"),
            TemplateId::SolutionScore => include_str!("../templates/solution_score.txt"),
            TemplateId::Cot => include_str!("../templates/cot.txt"),
        }
    }

    pub fn template(self) -> &'static PromptTemplate {
        static TEMPLATES: OnceLock<HashMap<TemplateId, PromptTemplate>> = OnceLock::new();
        &TEMPLATES.get_or_init(|| {
            TemplateId::ALL
                .iter()
                .map(|id| (*id, PromptTemplate::parse(*id, id.asset())))
                .collect()
        })[&self]
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(&'static str),
    Slot(&'static str),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
    pub slots: Vec<&'static str>,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    fn parse(id: TemplateId, asset: &'static str) -> Self {
        let body = asset.strip_suffix('\n').unwrap_or(asset);
        let mut pieces = Vec::new();
        let mut slots = Vec::new();
        let mut rest = body;
        while let Some(start) = rest.find("{{") {
            let end = rest[start..]
                .find("}}")
                .map(|e| start + e)
                .unwrap_or_else(|| panic!("unterminated placeholder in template {id}"));
            if start > 0 {
                pieces.push(Piece::Text(&rest[..start]));
            }
            let name = &rest[start + 2..end];
            assert!(
                !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_'),
                "bad slot name `{name}` in template {id}"
            );
            if !slots.contains(&name) {
                slots.push(name);
            }
            pieces.push(Piece::Slot(name));
            rest = &rest[end + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest));
        }
        Self {
            id,
            body,
            slots,
            pieces,
        }
    }

    /// Single-pass substitution: slot values are never rescanned.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, RenderError> {
        for (name, _) in values {
            if !self.slots.contains(name) {
                return Err(RenderError::UnknownSlot {
                    template: self.id,
                    slot: (*name).to_owned(),
                });
            }
        }
        let lookup = |slot: &str| values.iter().find(|(n, _)| *n == slot).map(|(_, v)| *v);
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => match lookup(s) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(RenderError::MissingSlot {
                            template: self.id,
                            slot: (*s).to_owned(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Renders any template by id.
pub fn render(id: TemplateId, values: &[(&str, &str)]) -> Result<String, RenderError> {
    id.template().render(values)
}

/// Plumbing prompts take an arbitrary slot map.
pub fn render_plumbing(
    id: TemplateId,
    values: &HashMap<String, String>,
) -> Result<String, RenderError> {
    let pairs: Vec<(&str, &str)> = values
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    render(id, &pairs)
}

fn require(slot: &'static str, value: &str) -> Result<(), RenderError> {
    if value.trim().is_empty() {
        Err(RenderError::EmptySlot(slot))
    } else {
        Ok(())
    }
}

pub fn render_okr_expand(objective: &str, key_results: &[String]) -> Result<String, RenderError> {
    require("objective", objective)?;
    render(
        TemplateId::OkrExpand,
        &[("objective", objective), ("key_results", &key_results.join(","))],
    )
}

pub fn render_agent_gen(objective: &str, key_results: &[String]) -> Result<String, RenderError> {
    require("objective", objective)?;
    render(
        TemplateId::AgentGen,
        &[("objective", objective), ("key_results", &key_results.join(","))],
    )
}

pub fn render_criteria_gen(job_title: &str, objective: &str) -> Result<String, RenderError> {
    require("job_title", job_title)?;
    require("objective", objective)?;
    render(
        TemplateId::CriteriaGen,
        &[("job_title", job_title), ("objective", objective)],
    )
}

/// SHA-256 over every template id and body, in declaration order.
pub fn template_set_hash() -> String {
    let mut hasher = Sha256::new();
    for id in TemplateId::ALL {
        hasher.update(id.name().as_bytes());
        hasher.update([0u8]);
        hasher.update(id.template().body.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Ordered, deduplicated, trimmed items with no empties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParsedList {
    items: Vec<String>,
}

impl ParsedList {
    /// Normalizes and deduplicates; fails if nothing is left.
    pub fn from_items<I, S>(items: I) -> Result<Self, FormatError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for item in items {
            let item = normalize_item(item.as_ref());
            if !item.is_empty() && seen.insert(item.clone()) {
                out.push(item);
            }
        }
        if out.is_empty() {
            return Err(FormatError::new("no items found"));
        }
        Ok(Self { items: out })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn into_items(self) -> Vec<String> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, len: usize) {
        self.items.truncate(len);
    }

    pub fn join_commas(&self) -> String {
        self.items.join(", ")
    }

    pub fn join_arrows(&self) -> String {
        self.items.join(" -> ")
    }
}

const QUOTE_PAIRS: [(char, char); 5] = [
    ('"', '"'),
    ('\'', '\''),
    ('`', '`'),
    ('\u{201c}', '\u{201d}'),
    ('\u{2018}', '\u{2019}'),
];

fn strip_quote_pair(s: &str) -> Option<&str> {
    let first = s.chars().next()?;
    let last = s.chars().next_back()?;
    if s.chars().count() < 2 {
        return None;
    }
    QUOTE_PAIRS
        .iter()
        .find(|(open, close)| *open == first && *close == last)
        .map(|_| &s[first.len_utf8()..s.len() - last.len_utf8()])
}

/// Trims whitespace, trailing periods and surrounding quotes until stable.
fn normalize_item(raw: &str) -> String {
    let mut cur = raw;
    loop {
        let next = cur.trim().trim_end_matches('.').trim_end();
        let next = strip_quote_pair(next).unwrap_or(next);
        if next == cur {
            return next.to_owned();
        }
        cur = next;
    }
}

/// Splits on commas: `"a, b, c."` becomes `[a, b, c]`.
pub fn parse_comma_list(raw: &str) -> Result<ParsedList, FormatError> {
    ParsedList::from_items(raw.split(','))
        .map_err(|_| FormatError::new("expected a comma-separated list with at least one item"))
}

/// Splits on `->`: `"writer -> director"` becomes `[writer, director]`.
pub fn parse_arrow_chain(raw: &str) -> Result<ParsedList, FormatError> {
    ParsedList::from_items(raw.split("->"))
        .map_err(|_| FormatError::new("expected job titles connected with '->'"))
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | ';' | '!' | '?')
}

/// Accepts one sentence of at most 200 words ending in `.`, `;`, `!` or `?`.
pub fn parse_criterion(raw: &str) -> Result<String, FormatError> {
    let text = normalize_quotes_only(raw);
    if text.is_empty() {
        return Err(FormatError::new("empty criterion"));
    }
    if text.contains('\n') {
        return Err(FormatError::new("criterion must be a single line"));
    }
    let words = text.split_whitespace().count();
    if words > MAX_CRITERION_WORDS {
        return Err(FormatError::new(format!(
            "criterion has {words} words, limit is {MAX_CRITERION_WORDS}"
        )));
    }
    if !text.chars().next_back().is_some_and(is_terminal) {
        return Err(FormatError::new("criterion must end with a terminal mark"));
    }
    // A terminal mark followed by whitespace and an upper-case letter starts
    // a new sentence.
    let chars: Vec<char> = text.chars().collect();
    for i in 0..chars.len() {
        if !is_terminal(chars[i]) {
            continue;
        }
        let mut j = i + 1;
        if j >= chars.len() || !chars[j].is_whitespace() {
            continue;
        }
        while j < chars.len() && chars[j].is_whitespace() {
            j += 1;
        }
        if j < chars.len() && chars[j].is_uppercase() {
            return Err(FormatError::new("criterion must be a single sentence"));
        }
    }
    Ok(text)
}

fn normalize_quotes_only(raw: &str) -> String {
    let mut cur = raw.trim();
    while let Some(inner) = strip_quote_pair(cur) {
        cur = inner.trim();
    }
    cur.to_owned()
}

/// One integer 0–10 per criterion, comma-separated.
pub fn parse_scores(raw: &str, expected: usize) -> Result<Vec<u8>, FormatError> {
    let mut scores = Vec::new();
    for part in raw.trim().trim_end_matches('.').split(',') {
        let part = part.trim();
        let score: u8 = part
            .parse()
            .map_err(|_| FormatError::new(format!("`{part}` is not an integer score")))?;
        if score > MAX_SCORE {
            return Err(FormatError::new(format!("score {score} exceeds {MAX_SCORE}")));
        }
        scores.push(score);
    }
    if scores.len() != expected {
        return Err(FormatError::new(format!(
            "expected {expected} scores, got {}",
            scores.len()
        )));
    }
    Ok(scores)
}

/// Parses `key: value` lines. A line starts a new entry only when the text
/// before its first colon is one of `known_keys`; any other line continues
/// the previous value.
pub fn parse_key_values(
    raw: &str,
    known_keys: &HashSet<String>,
) -> Result<Vec<(String, String)>, FormatError> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for line in raw.lines() {
        let key = line
            .split_once(':')
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(k, _)| known_keys.contains(*k));
        match (key, entries.last_mut()) {
            (Some((k, v)), _) => {
                if entries.iter().any(|(existing, _)| existing == k) {
                    return Err(FormatError::new(format!("key `{k}` written twice")));
                }
                entries.push((k.to_owned(), v.to_owned()));
            }
            (None, Some((_, value))) => {
                value.push('\n');
                value.push_str(line.trim_end());
            }
            (None, None) => {
                if !line.trim().is_empty() {
                    return Err(FormatError::new(format!(
                        "unexpected text before the first `key: value` line: `{}`",
                        line.trim()
                    )));
                }
            }
        }
    }
    for (key, value) in &mut entries {
        let trimmed = value.trim().to_owned();
        if trimmed.is_empty() {
            return Err(FormatError::new(format!("key `{key}` has an empty value")));
        }
        *value = trimmed;
    }
    if entries.is_empty() {
        return Err(FormatError::new("expected at least one `key: value` line"));
    }
    Ok(entries)
}

/// Review feedback is free text; only emptiness is rejected.
pub fn parse_feedback(raw: &str) -> Result<String, FormatError> {
    let text = raw.trim();
    if text.is_empty() {
        Err(FormatError::new("empty feedback"))
    } else {
        Ok(text.to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn okr_expand_contains_instruction_and_slots() {
        let text = render_okr_expand(
            "storyboard",
            &["shot composition".into(), "scene setup".into()],
        )
        .unwrap();
        assert!(text.contains("shot composition"));
        assert!(text.contains("scene setup"));
        assert!(text.contains("List keywords and separate each word with a comma"));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn okr_expand_with_no_key_results() {
        let text = render_okr_expand("storyboard", &[]).unwrap();
        assert!(text.contains("includes ''."));
    }

    #[test]
    fn empty_objective_is_rejected() {
        assert_eq!(
            render_okr_expand("  ", &[]),
            Err(RenderError::EmptySlot("objective"))
        );
        assert_eq!(
            render_criteria_gen("director", ""),
            Err(RenderError::EmptySlot("objective"))
        );
    }

    #[test]
    fn agent_gen_mentions_arrow() {
        let text = render_agent_gen("storyboard", &["dialogue".into()]).unwrap();
        assert!(text.contains("Connect the 'JobTitle' with '->', without unnecessary words"));
    }

    #[test]
    fn criteria_gen_keeps_word_limit_and_slots() {
        let text = render_criteria_gen("director", "storyboard").unwrap();
        assert!(text.contains("should not exceed 200 words"));
        assert!(text.contains("'director Expert'"));
        assert!(text.contains("An excellent 'storyboard' should have the characteristic of"));
    }

    #[test]
    fn missing_and_unknown_slots() {
        assert!(matches!(
            render(TemplateId::SolutionScore, &[("task", "t")]),
            Err(RenderError::MissingSlot { .. })
        ));
        assert!(matches!(
            render(TemplateId::Cot, &[("input", "x"), ("extra", "y")]),
            Err(RenderError::UnknownSlot { .. })
        ));
    }

    #[test]
    fn slot_values_are_not_rescanned() {
        let text = render(TemplateId::Cot, &[("input", "{{input}}")]).unwrap();
        assert!(text.ends_with("Task: {{input}}"));
    }

    #[test]
    fn template_hash_is_stable() {
        assert_eq!(template_set_hash(), template_set_hash());
        assert_eq!(template_set_hash().len(), 64);
    }

    #[test]
    fn comma_list_examples() {
        let list = parse_comma_list("shot composition, scene setup, actor performance, dialogue")
            .unwrap();
        assert_eq!(
            list.items(),
            ["shot composition", "scene setup", "actor performance", "dialogue"]
        );
        assert_eq!(parse_comma_list("a,").unwrap().items(), ["a"]);
        assert!(parse_comma_list(" , ,").is_err());
        assert_eq!(
            parse_comma_list("'x', \"y\", x, z.").unwrap().items(),
            ["x", "y", "z"]
        );
    }

    #[test]
    fn arrow_chain_examples() {
        let trip = parse_arrow_chain(
            "Travel Planner->Accommodation and Transportation Booking Officer->Emergency Management Commissioner",
        )
        .unwrap();
        assert_eq!(
            trip.items(),
            [
                "Travel Planner",
                "Accommodation and Transportation Booking Officer",
                "Emergency Management Commissioner"
            ]
        );
        let crew =
            parse_arrow_chain("script writer -> director -> camera operator -> actor -> musician")
                .unwrap();
        assert_eq!(crew.len(), 5);
        assert_eq!(parse_arrow_chain("solo").unwrap().items(), ["solo"]);
        assert!(parse_arrow_chain("->  ->").is_err());
    }

    #[test]
    fn criterion_examples() {
        let ok = "An excellent storyboard should have the characteristic of precise shot descriptions in the aspect of cinematography;";
        assert_eq!(parse_criterion(ok).unwrap(), ok);
        assert_eq!(parse_criterion(&format!("\"{ok}\"")).unwrap(), ok);
        assert!(parse_criterion("An excellent plan is clear. It is also cheap.").is_err());
        assert!(parse_criterion("no terminal mark").is_err());

        let long = format!("An excellent story should have {} in the aspect of length.", "word ".repeat(245));
        assert!(long.split_whitespace().count() > 200);
        assert!(parse_criterion(&long).is_err());
        let ellipsis = "An excellent story should have the characteristic of... in the aspect of pacing;";
        assert!(parse_criterion(ellipsis).is_ok());
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_scores("8, 6, 7", 3).unwrap(), vec![8, 6, 7]);
        assert_eq!(parse_scores("10", 1).unwrap(), vec![10]);
        assert!(parse_scores("8, 6", 3).is_err());
        assert!(parse_scores("11", 1).is_err());
        assert!(parse_scores("eight", 1).is_err());
    }

    #[test]
    fn key_value_parsing() {
        let keys: HashSet<String> = ["n1", "n2"].iter().map(|s| s.to_string()).collect();
        let parsed = parse_key_values("n1: first\nstill first\n\nn2: Day 2: beach", &keys).unwrap();
        assert_eq!(
            parsed,
            vec![
                ("n1".to_string(), "first\nstill first".to_string()),
                ("n2".to_string(), "Day 2: beach".to_string())
            ]
        );
        assert!(parse_key_values("Here you go:\nn1: x", &keys).is_err());
        assert!(parse_key_values("n1: x\nn1: y", &keys).is_err());
        assert!(parse_key_values("n1:", &keys).is_err());
        assert!(parse_key_values("", &keys).is_err());
    }

    proptest! {
        #[test]
        fn comma_parse_is_idempotent_on_rejoin(raw in "[a-c ,.'\"]{0,24}") {
            if let Ok(first) = parse_comma_list(&raw) {
                let again = parse_comma_list(&first.join_commas()).unwrap();
                prop_assert_eq!(&again, &first);
                prop_assert!(first.items().iter().all(|i| !i.is_empty() && !i.contains(',')));
            }
        }

        #[test]
        fn arrow_parse_is_idempotent_on_rejoin(raw in "[a-c ->.'\"]{0,24}") {
            if let Ok(first) = parse_arrow_chain(&raw) {
                let again = parse_arrow_chain(&first.join_arrows()).unwrap();
                prop_assert_eq!(&again, &first);
                prop_assert!(first.items().iter().all(|i| !i.is_empty() && !i.contains("->")));
            }
        }

        #[test]
        fn comma_parse_preserves_order(words in proptest::collection::vec("[a-z]{1,6}", 1..8)) {
            let list = parse_comma_list(&words.join(", ")).unwrap();
            let mut expected: Vec<String> = Vec::new();
            for w in words {
                if !expected.contains(&w) {
                    expected.push(w);
                }
            }
            prop_assert_eq!(list.items(), &expected[..]);
        }
    }
}
