//! Randomized scripted backends and independent checks shared by the
//! acceptance harness and the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use okr_agent::genokr::{gen_okr, GenConfig, OkrPlan};
use okr_agent::llm::{fingerprint, ChatRequest, Role, ScriptedBackend};
use okr_agent::okr::{canonical_serialize, NodeId, NodeKind, OkrTree, SolutionDocument};
use okr_agent::trace::{EventPayload, RunTrace};
use okr_agent::{run_workflow, AbortPolicy, Hierarchy, Session, StepRecord, WorkflowConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

const WORDS: &[&str] = &[
    "harbor", "lantern", "orchard", "signal", "meadow", "engine", "compass", "ledger", "canvas",
    "summit", "relay", "garden", "archive", "beacon", "circuit", "delta", "ember", "forge",
];
const JOBS: &[&str] = &[
    "planner", "designer", "editor", "analyst", "producer", "engineer", "curator", "writer",
];

fn first_user(request: &ChatRequest) -> &str {
    request
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=2);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn list(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| phrase(rng)).collect::<Vec<_>>().join(", ")
}

/// Answers every pipeline step with well-formed random content derived
/// from `(seed, request fingerprint)`. With `intrude`, first-attempt
/// expansions sometimes also write the root entry.
pub fn random_backend(seed: u64, intrude: bool) -> ScriptedBackend {
    ScriptedBackend::from_fn(move |req| {
        let fp = fingerprint(req);
        let mix = u64::from_str_radix(&fp.as_str()[..16], 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix);
        let tag = req.tag.as_str();
        let prompt = first_user(req);
        let reply = if tag.starts_with("genokr.propose") || tag.starts_with("genokr.expand") {
            list(&mut rng, 3)
        } else if tag == "genokr.consolidate" {
            let mut pool: Vec<&str> = prompt
                .lines()
                .filter_map(|l| l.strip_prefix("Candidate "))
                .filter_map(|l| l.split_once(": ").map(|(_, items)| items))
                .flat_map(|items| items.split(", "))
                .collect();
            pool.shuffle(&mut rng);
            let n = rng.gen_range(1..=pool.len());
            pool[..n].join(", ")
        } else if tag.starts_with("genokr.agents") {
            let n = rng.gen_range(1..=4);
            (0..n)
                .map(|_| *JOBS.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" -> ")
        } else if tag.starts_with("genokr.criteria") {
            format!(
                "An excellent '{}' should have the characteristic of {} in the aspect of {};",
                phrase(&mut rng),
                phrase(&mut rng),
                phrase(&mut rng)
            )
        } else if tag.starts_with("workflow.expand") || tag.starts_with("workflow.modify") {
            let allowed: Vec<&str> = prompt
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("Allowed keys: "))
                .unwrap()
                .split(", ")
                .collect();
            let mut keys = allowed.clone();
            keys.shuffle(&mut rng);
            keys.truncate(rng.gen_range(1..=allowed.len()));
            let mut lines: Vec<String> = keys
                .iter()
                .map(|k| format!("{k}: {} {}", phrase(&mut rng), rng.gen::<u16>()))
                .collect();
            if rng.gen_bool(0.3) {
                lines.push(format!("and then {}", phrase(&mut rng)));
            }
            if intrude && req.messages.len() == 1 && tag.starts_with("workflow.expand") && rng.gen_bool(0.2) {
                lines.push("n0: overwritten".into());
            }
            lines.join("\n")
        } else if tag.starts_with("workflow.review") {
            format!("Improve the {} part.", phrase(&mut rng))
        } else if tag.starts_with("workflow.score") {
            let n = criterion_count(prompt);
            (0..n)
                .map(|_| rng.gen_range(0..=3).to_string())
                .collect::<Vec<_>>()
                .join(", ")
        } else {
            return None;
        };
        Some(reply)
    })
}

/// The `N` in "each of the N criteria".
pub fn criterion_count(prompt: &str) -> usize {
    let rest = prompt.split("each of the ").nth(1).expect("score prompt");
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

pub fn random_gen_config(rng: &mut ChaCha8Rng) -> GenConfig {
    GenConfig {
        hierarchy: Hierarchy::new(rng.gen_range(1..=3)).unwrap(),
        candidate_samples: rng.gen_range(1..=3),
        max_children_per_node: rng.gen_range(1..=3),
    }
}

pub fn random_workflow_config(rng: &mut ChaCha8Rng) -> WorkflowConfig {
    WorkflowConfig {
        refine_rounds: rng.gen_range(0..=3),
        keep_best: rng.gen_bool(0.7),
        abort: AbortPolicy::FailFast,
    }
}

pub struct RecordedRun {
    pub gen: GenConfig,
    pub workflow: WorkflowConfig,
    pub plan: OkrPlan,
    pub document: SolutionDocument,
    pub steps: Vec<StepRecord>,
    pub trace: RunTrace,
}

pub fn record_run(seed: u64, intrude: bool) -> Result<RecordedRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = random_gen_config(&mut rng);
    let workflow = random_workflow_config(&mut rng);
    let mut session = Session::ephemeral(random_backend(seed, intrude));
    let plan = gen_okr("random task", &gen, &mut session).map_err(|e| e.to_string())?;
    let outcome = run_workflow(&plan, workflow, &mut session).map_err(|e| e.to_string())?;
    Ok(RecordedRun {
        gen,
        workflow,
        plan,
        document: outcome.document,
        steps: outcome.steps,
        trace: session.recorder().to_trace(),
    })
}

/// Pre-order positions by direct recursion over `children`.
pub fn preorder_positions(tree: &OkrTree) -> HashMap<NodeId, usize> {
    fn walk(tree: &OkrTree, id: &NodeId, out: &mut HashMap<NodeId, usize>) {
        let n = out.len();
        out.insert(id.clone(), n);
        for child in &tree.node(id).unwrap().children {
            walk(tree, child, out);
        }
    }
    let mut out = HashMap::new();
    walk(tree, tree.root_id(), &mut out);
    out
}

/// Structural checks on a generated tree, done without the tree's own
/// validator.
pub fn check_tree(tree: &OkrTree, depth: usize) -> Result<(), String> {
    let positions = preorder_positions(tree);
    if positions.len() != tree.len() {
        return Err(format!("{} reachable of {} nodes", positions.len(), tree.len()));
    }
    let root = tree.root();
    if root.level != 0 || root.parent.is_some() || root.kind != NodeKind::Root {
        return Err("bad root".into());
    }
    for id in positions.keys() {
        let node = tree.node(id).unwrap();
        for child in &node.children {
            let c = tree.node(child).ok_or(format!("missing child {child}"))?;
            if c.parent.as_ref() != Some(id) || c.level != node.level + 1 {
                return Err(format!("bad link {id} -> {child}"));
            }
        }
        if node.level > 0 {
            if node.children.is_empty() != (node.level == depth) {
                return Err(format!("{id} at level {} has wrong child count", node.level));
            }
            let expected = if node.level == depth { NodeKind::KeyResult } else { NodeKind::Objective };
            if node.kind != expected {
                return Err(format!("{id} has kind {:?}", node.kind));
            }
        }
    }
    let max_level = positions.keys().map(|id| tree.node(id).unwrap().level).max().unwrap();
    if max_level != depth {
        return Err(format!("depth {max_level}, configured {depth}"));
    }
    Ok(())
}

/// Requests a generation run should take when no reply needed a retry.
pub fn expected_gen_exchanges(tree: &OkrTree, gen: &GenConfig) -> usize {
    let k = gen.candidate_samples;
    let mut per_level: HashMap<usize, usize> = HashMap::new();
    for id in preorder_positions(tree).keys() {
        *per_level.entry(tree.node(id).unwrap().level).or_default() += 1;
    }
    let depth = gen.hierarchy.depth();
    let mut total = k + usize::from(k > 1) + 1 + per_level[&1];
    for level in 2..=depth {
        let parents = per_level[&(level - 1)];
        total += parents + parents + per_level[&level];
    }
    total
}

fn scores_of(raw: &str) -> f64 {
    let v: Vec<f64> = raw.split(',').map(|s| s.trim().parse::<f64>().unwrap()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn numbered_criteria(prompt: &str) -> Vec<String> {
    prompt
        .split("Evaluation criteria, in order:\n")
        .nth(1)
        .unwrap()
        .lines()
        .map_while(|l| {
            let (n, text) = l.split_once(". ")?;
            n.parse::<usize>().ok().map(|_| text.to_owned())
        })
        .collect()
}

/// Order, monotonicity, locality and selection checks over a recorded
/// workflow, using only the trace and the plan.
pub fn check_workflow(run: &RecordedRun) -> Result<(), String> {
    let tree = &run.plan.tree;
    let pos = preorder_positions(tree);
    let node_of: HashMap<String, NodeId> = run
        .plan
        .agents
        .iter()
        .map(|a| (a.id.to_string(), a.assigned_node.clone()))
        .collect();

    // Visiting order.
    let visited: Vec<String> = run.steps.iter().map(|s| s.agent.to_string()).collect();
    if visited.len() != run.plan.agents.len() {
        return Err("not every agent ran".into());
    }
    for pair in visited.windows(2) {
        let (a, b) = (&node_of[&pair[0]], &node_of[&pair[1]]);
        let key = |n: &NodeId| (tree.node(n).unwrap().level, pos[n]);
        if key(a) > key(b) {
            return Err(format!("{} visited before {}", pair[0], pair[1]));
        }
    }

    let exchanges: Vec<_> = run.trace.exchanges().collect();
    let for_agent = |prefix: &str, agent: &str| -> Vec<&okr_agent::trace::ExchangeRecord> {
        exchanges
            .iter()
            .copied()
            .filter(|x| x.tag == format!("{prefix}/{agent}"))
            .collect()
    };

    // Working criteria grow as a prefix, one agent's worth at a time.
    let mut previous: Vec<String> = Vec::new();
    for (i, agent) in visited.iter().enumerate() {
        for review in for_agent("workflow.review", agent) {
            let listed = numbered_criteria(review.request.prompt());
            if listed.len() != i + 1 || listed[..previous.len()] != previous[..] {
                return Err(format!("criteria for {agent} are not an extension of the previous set"));
            }
            previous = listed;
        }
        for score in for_agent("workflow.score", agent) {
            if criterion_count(score.request.prompt()) != i + 1 {
                return Err(format!("{agent} scored with the wrong criterion count"));
            }
        }
    }

    // Locality and selection.
    let mut versions: HashMap<u64, SolutionDocument> = HashMap::new();
    let mut committed = SolutionDocument::new();
    let mut step_iter = run.steps.iter();
    let mut agent_versions: Vec<u64> = Vec::new();
    for event in &run.trace.events {
        match &event.payload {
            EventPayload::DocSnapshot(snap) => {
                let agent = snap.agent.as_ref().unwrap().to_string();
                let own = &node_of[&agent];
                let doc = &snap.document;
                for node in pos.keys() {
                    if tree.is_in_subtree(node, own) {
                        continue;
                    }
                    if doc.get_node(node) != committed.get_node(node) {
                        return Err(format!("{agent} changed {node} outside its subtree"));
                    }
                }
                agent_versions.push(doc.version());
                versions.insert(doc.version(), doc.clone());
            }
            EventPayload::StepRecord(record) => {
                let expected = step_iter.next().ok_or("extra step record")?;
                if expected != record {
                    return Err("step record differs from the returned one".into());
                }
                let agent = record.agent.to_string();
                let means: Vec<f64> = for_agent("workflow.score", &agent)
                    .iter()
                    .map(|x| scores_of(&x.response.content))
                    .collect();
                let candidates: Vec<u64> = if run.workflow.refine_rounds == 0 {
                    vec![]
                } else if run.workflow.keep_best {
                    agent_versions.clone()
                } else {
                    agent_versions[1..].to_vec()
                };
                if candidates.len() != means.len() || record.iterations.len() != means.len() {
                    return Err(format!("{agent}: iteration count mismatch"));
                }
                for (it, (&v, &m)) in record.iterations.iter().zip(candidates.iter().zip(&means)) {
                    if it.version != v || (it.score - m).abs() > 1e-12 {
                        return Err(format!("{agent}: iteration {v} recorded wrongly"));
                    }
                }
                let chosen = if means.is_empty() {
                    agent_versions[0]
                } else if run.workflow.keep_best {
                    let best = (0..means.len())
                        .find(|&i| (0..means.len()).all(|j| means[i] >= means[j]))
                        .unwrap();
                    candidates[best]
                } else {
                    *candidates.last().unwrap()
                };
                if record.chosen != chosen {
                    return Err(format!("{agent}: chose {} but oracle says {chosen}", record.chosen));
                }
                committed = versions[&chosen].clone();
                agent_versions.clear();
            }
            _ => {}
        }
    }
    if canonical_serialize(&committed, tree).unwrap() != canonical_serialize(&run.document, tree).unwrap() {
        return Err("final document is not the last chosen version".into());
    }
    Ok(())
}
