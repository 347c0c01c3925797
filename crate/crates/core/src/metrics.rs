//! Offline scoring of generated text: trivia coverage and document shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::okr::{NodeKind, OkrTree, SolutionDocument};

/// A fact the text is expected to mention, under any of its spellings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub answer: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl Target {
    pub fn new(answer: impl Into<String>) -> Self {
        Self {
            answer: answer.into(),
            aliases: Vec::new(),
        }
    }

    pub fn with_aliases<I, S>(mut self, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.aliases.extend(aliases.into_iter().map(Into::into));
        self
    }

    fn spellings(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.answer.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total: usize,
    /// Answers of the targets found, in target order.
    pub matched: Vec<String>,
    pub missing: Vec<String>,
    /// `matched / total`.
    pub coverage: f64,
}

fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether `needle` occurs in `haystack` with no letter or digit directly
/// on either side.
fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    haystack.match_indices(needle).any(|(i, m)| {
        !is_word(haystack[..i].chars().next_back()) && !is_word(haystack[i + m.len()..].chars().next())
    })
}

/// Fraction of targets mentioned in `text`. Matching is case-insensitive,
/// collapses whitespace runs, and only counts whole words, so the alias
/// `Ed` matches "Ed's" but not "need".
pub fn trivia_coverage(text: &str, targets: &[Target]) -> Result<CoverageReport> {
    if targets.is_empty() {
        return Err(Error::Validation("no targets to score against".into()));
    }
    let haystack = normalize(text);
    let (mut matched, mut missing) = (Vec::new(), Vec::new());
    for target in targets {
        let hit = target.spellings().any(|s| {
            let needle = normalize(s);
            !needle.is_empty() && contains_phrase(&haystack, &needle)
        });
        if hit {
            matched.push(target.answer.clone());
        } else {
            missing.push(target.answer.clone());
        }
    }
    Ok(CoverageReport {
        total: targets.len(),
        coverage: matched.len() as f64 / targets.len() as f64,
        matched,
        missing,
    })
}

/// Accepts a JSON array whose items are either plain answers or
/// `{"answer": .., "aliases": [..]}` objects.
pub fn parse_targets(raw: &str) -> Result<Vec<Target>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Item {
        Plain(String),
        Full(Target),
    }
    let items: Vec<Item> = serde_json::from_str(raw)
        .map_err(|e| Error::Validation(format!("targets file: {e}")))?;
    Ok(items
        .into_iter()
        .map(|i| match i {
            Item::Plain(s) => Target::new(s),
            Item::Full(t) => t,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub node_count: usize,
    pub depth: usize,
    pub leaf_count: usize,
    /// Nodes with a non-blank entry.
    pub filled: usize,
    /// `filled / node_count`.
    pub fill_ratio: f64,
    /// Mean characters per filled entry.
    pub mean_entry_chars: f64,
}

pub fn structure_stats(tree: &OkrTree, doc: &SolutionDocument) -> StructureStats {
    let nodes = tree.preorder();
    let lengths: Vec<usize> = nodes
        .iter()
        .filter_map(|n| doc.get_node(&n.id))
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.chars().count())
        .collect();
    let filled = lengths.len();
    StructureStats {
        node_count: nodes.len(),
        depth: tree.depth(),
        leaf_count: nodes.iter().filter(|n| n.children.is_empty()).count(),
        filled,
        fill_ratio: filled as f64 / nodes.len() as f64,
        mean_entry_chars: if filled == 0 {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / filled as f64
        },
    }
}

/// Treats plain text as a one-level document, one node per paragraph
/// (paragraphs are separated by blank lines).
pub fn flat_document(title: &str, text: &str) -> Result<(OkrTree, SolutionDocument)> {
    let mut paragraph: Vec<&str> = Vec::new();
    let mut paragraphs: Vec<String> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !paragraph.is_empty() {
                paragraphs.push(paragraph.join("\n"));
                paragraph.clear();
            }
        } else {
            paragraph.push(line.trim_end());
        }
    }
    flat_from_values(title, paragraphs)
}

/// One leaf under an empty root per value, in order.
pub fn flat_from_values<I, S>(title: &str, values: I) -> Result<(OkrTree, SolutionDocument)>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut tree = OkrTree::new(title);
    let root = tree.root_id().clone();
    let mut doc = SolutionDocument::new();
    for (i, value) in values.into_iter().enumerate() {
        let id = tree.add_child(&root, NodeKind::KeyResult, format!("entry {}", i + 1))?;
        doc.insert(tree.path(&id)?, value);
    }
    Ok((tree, doc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_is_case_and_space_insensitive() {
        let targets = vec![
            Target::new("Pearl Harbor"),
            Target::new("car rental").with_aliases(["rental car"]),
            Target::new("snorkeling"),
        ];
        let report = trivia_coverage("Visit pearl   HARBOR and pick up a Rental Car.", &targets).unwrap();
        assert_eq!(report.matched, ["Pearl Harbor", "car rental"]);
        assert_eq!(report.missing, ["snorkeling"]);
        assert!((report.coverage - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aliases_match_whole_words_only() {
        let targets = vec![Target::new("Ed Stark").with_aliases(["Ed"])];
        assert_eq!(trivia_coverage("they needed help", &targets).unwrap().coverage, 0.0);
        assert_eq!(trivia_coverage("Ed's wand", &targets).unwrap().coverage, 1.0);
        assert_eq!(trivia_coverage("(ed)", &targets).unwrap().coverage, 1.0);
    }

    #[test]
    fn empty_targets_rejected() {
        assert!(trivia_coverage("x", &[]).is_err());
    }

    #[test]
    fn targets_accept_both_shapes() {
        let t = parse_targets(r#"["Hyrule", {"answer": "Silence", "aliases": ["Slience"]}]"#).unwrap();
        assert_eq!(t[0], Target::new("Hyrule"));
        assert_eq!(t[1].aliases, ["Slience"]);
    }

    #[test]
    fn paragraphs_become_entries() {
        let (tree, doc) = flat_document("story", "one\nline\n\n\ntwo\n \nthree").unwrap();
        let stats = structure_stats(&tree, &doc);
        assert_eq!(stats.node_count, 4);
        assert_eq!(stats.leaf_count, 3);
        assert_eq!(stats.filled, 3);
        assert_eq!(stats.depth, 1);
        assert_eq!(doc.plain_text(&tree).unwrap(), "one\nline\n\ntwo\n\nthree");
    }
}
