//! OKR tree, agents, evaluation criteria and the key-value solution document.
//!
//! Everything here is a plain value type. The engines own mutation; the
//! functions in this module only inspect or reorder.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TREE_SCHEMA_VERSION: u32 = 1;
pub const DOCUMENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("node {0} does not exist")]
    MissingNode(NodeId),
    #[error("agent {0} is not part of the ordered agent list")]
    UnknownAgent(AgentId),
    #[error("criterion {criterion} is owned by unknown agent {owner}")]
    UnknownOwner { criterion: CriterionId, owner: AgentId },
    #[error("document path {0} does not exist in the tree")]
    DanglingPath(NodePath),
    #[error("hierarchy depth must be at least 1")]
    InvalidHierarchy,
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("malformed document: {0}")]
    MalformedDocument(String),
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Identifier of a node in an [`OkrTree`].
    NodeId
);
string_id!(AgentId);
string_id!(CriterionId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Objective,
    KeyResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkrNode {
    pub id: NodeId,
    pub level: usize,
    pub kind: NodeKind,
    pub title: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Route from the root to a node, inclusive at both ends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodePath(Vec<NodeId>);

impl NodePath {
    pub fn new(ids: Vec<NodeId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }

    /// The node this path addresses.
    pub fn target(&self) -> Option<&NodeId> {
        self.0.last()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.0.contains(id)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(NodeId::as_str).collect();
        f.write_str(&parts.join("/"))
    }
}

/// Number of generation levels below the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Hierarchy(usize);

impl Hierarchy {
    pub fn new(depth: usize) -> Result<Self, StructureError> {
        if depth == 0 {
            return Err(StructureError::InvalidHierarchy);
        }
        Ok(Self(depth))
    }

    pub fn depth(self) -> usize {
        self.0
    }
}

impl Default for Hierarchy {
    fn default() -> Self {
        Self(2)
    }
}

impl TryFrom<usize> for Hierarchy {
    type Error = StructureError;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Hierarchy> for usize {
    fn from(h: Hierarchy) -> usize {
        h.0
    }
}

/// A levelled tree rooted at the user input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeWire", into = "TreeWire")]
pub struct OkrTree {
    root: NodeId,
    nodes: HashMap<NodeId, OkrNode>,
}

impl OkrTree {
    pub fn new(root_title: impl Into<String>) -> Self {
        let root = NodeId::new("n0");
        let node = OkrNode {
            id: root.clone(),
            level: 0,
            kind: NodeKind::Root,
            title: root_title.into(),
            parent: None,
            children: Vec::new(),
        };
        let mut nodes = HashMap::new();
        nodes.insert(root.clone(), node);
        Self { root, nodes }
    }

    pub fn root(&self) -> &OkrNode {
        &self.nodes[&self.root]
    }

    pub fn root_id(&self) -> &NodeId {
        &self.root
    }

    pub fn node(&self, id: &NodeId) -> Option<&OkrNode> {
        self.nodes.get(id)
    }

    pub fn get(&self, id: &NodeId) -> Result<&OkrNode, StructureError> {
        self.nodes
            .get(id)
            .ok_or_else(|| StructureError::MissingNode(id.clone()))
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Maximum level present.
    pub fn depth(&self) -> usize {
        self.nodes.values().map(|n| n.level).max().unwrap_or(0)
    }

    /// Appends a child at the end of `parent`'s children and returns its id.
    pub fn add_child(
        &mut self,
        parent: &NodeId,
        kind: NodeKind,
        title: impl Into<String>,
    ) -> Result<NodeId, StructureError> {
        let level = self.get(parent)?.level + 1;
        if kind == NodeKind::Root {
            return Err(StructureError::Malformed(
                "only the root may have kind root".into(),
            ));
        }
        let mut n = self.nodes.len();
        let id = loop {
            let candidate = NodeId::new(format!("n{n}"));
            if !self.nodes.contains_key(&candidate) {
                break candidate;
            }
            n += 1;
        };
        self.nodes.insert(
            id.clone(),
            OkrNode {
                id: id.clone(),
                level,
                kind,
                title: title.into(),
                parent: Some(parent.clone()),
                children: Vec::new(),
            },
        );
        self.nodes
            .get_mut(parent)
            .expect("parent checked above")
            .children
            .push(id.clone());
        Ok(id)
    }

    /// Depth-first pre-order, children in insertion order.
    pub fn preorder(&self) -> Vec<&OkrNode> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![&self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        out
    }

    /// Pre-order position of every node.
    pub fn preorder_index(&self) -> HashMap<NodeId, usize> {
        self.preorder()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect()
    }

    pub fn level_nodes(&self, level: usize) -> Vec<&OkrNode> {
        self.preorder()
            .into_iter()
            .filter(|n| n.level == level)
            .collect()
    }

    pub fn path(&self, id: &NodeId) -> Result<NodePath, StructureError> {
        let mut ids = vec![id.clone()];
        let mut cur = self.get(id)?;
        while let Some(parent) = &cur.parent {
            ids.push(parent.clone());
            cur = self.get(parent)?;
        }
        ids.reverse();
        Ok(NodePath(ids))
    }

    /// Titles from the root down to `id`, for human-readable keys.
    pub fn title_path(&self, id: &NodeId) -> Result<Vec<&str>, StructureError> {
        self.path(id)?
            .0
            .iter()
            .map(|i| self.get(i).map(|n| n.title.as_str()))
            .collect()
    }

    pub fn is_in_subtree(&self, id: &NodeId, ancestor: &NodeId) -> bool {
        let mut cur = self.nodes.get(id);
        while let Some(node) = cur {
            if &node.id == ancestor {
                return true;
            }
            cur = node.parent.as_ref().and_then(|p| self.nodes.get(p));
        }
        false
    }

    /// `id` and all of its descendants, pre-order.
    pub fn subtree(&self, id: &NodeId) -> Result<Vec<&OkrNode>, StructureError> {
        self.get(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let node = &self.nodes[cur];
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        Ok(out)
    }

    /// Checks levels, parent/child consistency, acyclicity and reachability.
    pub fn validate(&self) -> Result<(), StructureError> {
        let bad = |m: String| Err(StructureError::Malformed(m));
        let root = match self.nodes.get(&self.root) {
            Some(r) => r,
            None => return bad(format!("root {} missing", self.root)),
        };
        if root.level != 0 || root.parent.is_some() || root.kind != NodeKind::Root {
            return bad("root must have level 0, no parent and kind root".into());
        }
        for node in self.nodes.values() {
            if node.id != self.root {
                if node.kind == NodeKind::Root {
                    return bad(format!("non-root node {} has kind root", node.id));
                }
                let Some(parent_id) = &node.parent else {
                    return bad(format!("node {} has no parent", node.id));
                };
                let Some(parent) = self.nodes.get(parent_id) else {
                    return bad(format!("node {} has missing parent {parent_id}", node.id));
                };
                if node.level != parent.level + 1 {
                    return bad(format!("node {} level {} under level {}", node.id, node.level, parent.level));
                }
                if parent.children.iter().filter(|c| **c == node.id).count() != 1 {
                    return bad(format!("parent {parent_id} does not list {} exactly once", node.id));
                }
            }
            for child in &node.children {
                match self.nodes.get(child) {
                    Some(c) if c.parent.as_ref() == Some(&node.id) => {}
                    _ => return bad(format!("child {child} of {} is inconsistent", node.id)),
                }
            }
        }
        // Reachability: the walk visits each node at most once since every
        // node has a single parent that lists it once.
        let mut seen = HashSet::new();
        let mut stack = vec![&self.root];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                return bad(format!("cycle through {id}"));
            }
            stack.extend(self.nodes[id].children.iter());
        }
        if seen.len() != self.nodes.len() {
            return bad(format!(
                "{} of {} nodes unreachable from root",
                self.nodes.len() - seen.len(),
                self.nodes.len()
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization is infallible")
    }

    pub fn from_json(raw: &str) -> Result<Self, StructureError> {
        serde_json::from_str(raw).map_err(|e| StructureError::Malformed(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct TreeWire {
    schema_version: u32,
    root: NodeId,
    depth: usize,
    nodes: Vec<OkrNode>,
}

impl From<OkrTree> for TreeWire {
    fn from(tree: OkrTree) -> Self {
        let nodes = tree.preorder().into_iter().cloned().collect();
        TreeWire {
            schema_version: TREE_SCHEMA_VERSION,
            depth: tree.depth(),
            root: tree.root,
            nodes,
        }
    }
}

impl TryFrom<TreeWire> for OkrTree {
    type Error = StructureError;

    fn try_from(wire: TreeWire) -> Result<Self, Self::Error> {
        if wire.schema_version != TREE_SCHEMA_VERSION {
            return Err(StructureError::Malformed(format!(
                "unsupported tree schema_version {}",
                wire.schema_version
            )));
        }
        let mut nodes = HashMap::with_capacity(wire.nodes.len());
        for node in wire.nodes {
            let id = node.id.clone();
            if nodes.insert(id.clone(), node).is_some() {
                return Err(StructureError::Malformed(format!("duplicate node id {id}")));
            }
        }
        let tree = OkrTree {
            root: wire.root,
            nodes,
        };
        tree.validate()?;
        if tree.depth() != wire.depth {
            return Err(StructureError::Malformed(format!(
                "declared depth {} but nodes reach {}",
                wire.depth,
                tree.depth()
            )));
        }
        Ok(tree)
    }
}

/// A persona generated for exactly one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub job_title: String,
    pub assigned_node: NodeId,
    pub order_index: usize,
    /// Agents whose criteria this agent inherits: every agent before it.
    pub upstream: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationCriterion {
    pub id: CriterionId,
    pub owner: AgentId,
    pub text: String,
}

/// Sorts agents by (level of their node, pre-order position) and rewrites
/// `order_index` and `upstream` to match. Agents sharing a node keep their
/// relative input order.
pub fn preorder_agents(
    tree: &OkrTree,
    agents: &[AgentSpec],
) -> Result<Vec<AgentSpec>, StructureError> {
    let position = tree.preorder_index();
    let mut keyed = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter().enumerate() {
        let node = tree.get(&agent.assigned_node)?;
        keyed.push(((node.level, position[&node.id], i), agent));
    }
    keyed.sort_by_key(|(key, _)| *key);

    let mut out: Vec<AgentSpec> = Vec::with_capacity(keyed.len());
    for (order_index, (_, agent)) in keyed.into_iter().enumerate() {
        let mut agent = agent.clone();
        agent.order_index = order_index;
        agent.upstream = out.iter().map(|a| a.id.clone()).collect();
        out.push(agent);
    }
    Ok(out)
}

/// Criteria owned by every agent up to and including `upto`, grouped by
/// agent order and then by their position in `criteria`.
pub fn accumulate_criteria(
    ordered_agents: &[AgentSpec],
    criteria: &[EvaluationCriterion],
    upto: &AgentId,
) -> Result<Vec<EvaluationCriterion>, StructureError> {
    let order: HashMap<&AgentId, usize> = ordered_agents
        .iter()
        .map(|a| (&a.id, a.order_index))
        .collect();
    let limit = *order
        .get(upto)
        .ok_or_else(|| StructureError::UnknownAgent(upto.clone()))?;

    let mut selected = Vec::new();
    for (pos, criterion) in criteria.iter().enumerate() {
        let owner_index =
            *order
                .get(&criterion.owner)
                .ok_or_else(|| StructureError::UnknownOwner {
                    criterion: criterion.id.clone(),
                    owner: criterion.owner.clone(),
                })?;
        if owner_index <= limit {
            selected.push((owner_index, pos, criterion));
        }
    }
    selected.sort_by_key(|(owner, pos, _)| (*owner, *pos));
    Ok(selected.into_iter().map(|(_, _, c)| c.clone()).collect())
}

/// The evolving answer: one text value per OKR node, keyed by node path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocumentWire", into = "DocumentWire")]
pub struct SolutionDocument {
    entries: BTreeMap<NodePath, String>,
    version: u64,
}

impl SolutionDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn get(&self, path: &NodePath) -> Option<&str> {
        self.entries.get(path).map(String::as_str)
    }

    /// Looks up the entry whose path ends at `id`.
    pub fn get_node(&self, id: &NodeId) -> Option<&str> {
        self.entries
            .iter()
            .find(|(path, _)| path.target() == Some(id))
            .map(|(_, v)| v.as_str())
    }

    pub fn insert(&mut self, path: NodePath, value: impl Into<String>) -> Option<String> {
        self.entries.insert(path, value.into())
    }

    pub fn remove(&mut self, path: &NodePath) -> Option<String> {
        self.entries.remove(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&NodePath, &str)> {
        self.entries.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Checks that every key is a real root-to-node path in `tree`.
    pub fn validate(&self, tree: &OkrTree) -> Result<(), StructureError> {
        for path in self.entries.keys() {
            let valid = match path.target() {
                Some(id) => tree.contains(id) && tree.path(id)? == *path,
                None => false,
            };
            if !valid {
                return Err(StructureError::DanglingPath(path.clone()));
            }
        }
        Ok(())
    }

    /// Entries in tree pre-order.
    pub fn ordered_entries<'a>(
        &'a self,
        tree: &'a OkrTree,
    ) -> Result<Vec<(&'a NodePath, &'a str)>, StructureError> {
        self.validate(tree)?;
        let position = tree.preorder_index();
        let mut entries: Vec<_> = self.entries().collect();
        entries.sort_by_key(|(path, _)| position[path.target().expect("validated")]);
        Ok(entries)
    }

    /// Values in pre-order joined by blank lines.
    pub fn plain_text(&self, tree: &OkrTree) -> Result<String, StructureError> {
        Ok(self
            .ordered_entries(tree)?
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join("\n\n"))
    }
}

#[derive(Serialize, Deserialize)]
struct DocumentEntry {
    path: NodePath,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct DocumentWire {
    schema_version: u32,
    version: u64,
    entries: Vec<DocumentEntry>,
}

impl From<SolutionDocument> for DocumentWire {
    fn from(doc: SolutionDocument) -> Self {
        DocumentWire {
            schema_version: DOCUMENT_SCHEMA_VERSION,
            version: doc.version,
            entries: doc
                .entries
                .into_iter()
                .map(|(path, value)| DocumentEntry { path, value })
                .collect(),
        }
    }
}

impl TryFrom<DocumentWire> for SolutionDocument {
    type Error = StructureError;

    fn try_from(wire: DocumentWire) -> Result<Self, Self::Error> {
        if wire.schema_version != DOCUMENT_SCHEMA_VERSION {
            return Err(StructureError::MalformedDocument(format!(
                "unsupported document schema_version {}",
                wire.schema_version
            )));
        }
        let mut entries = BTreeMap::new();
        for entry in wire.entries {
            if entry.path.ids().is_empty() {
                return Err(StructureError::MalformedDocument("empty node path".into()));
            }
            if entries.insert(entry.path.clone(), entry.value).is_some() {
                return Err(StructureError::MalformedDocument(format!(
                    "duplicate path {}",
                    entry.path
                )));
            }
        }
        Ok(SolutionDocument {
            entries,
            version: wire.version,
        })
    }
}

/// Canonical UTF-8 JSON for a document: entries in tree pre-order, fixed
/// field order, pretty-printed with a trailing newline.
pub fn canonical_serialize(
    doc: &SolutionDocument,
    tree: &OkrTree,
) -> Result<Vec<u8>, StructureError> {
    let wire = DocumentWire {
        schema_version: DOCUMENT_SCHEMA_VERSION,
        version: doc.version,
        entries: doc
            .ordered_entries(tree)?
            .into_iter()
            .map(|(path, value)| DocumentEntry {
                path: path.clone(),
                value: value.to_owned(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&wire).expect("document serialization is infallible");
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn parse_document(bytes: &[u8]) -> Result<SolutionDocument, StructureError> {
    serde_json::from_slice(bytes).map_err(|e| StructureError::MalformedDocument(e.to_string()))
}
