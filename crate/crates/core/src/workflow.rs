//! Agents take turns on a shared document: each expands its own subtree,
//! then repeatedly reviews, revises and scores it against the criteria
//! accumulated so far, keeping the best-scoring version.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genokr::OkrPlan;
use crate::llm::ChatMessage;
use crate::okr::{
    accumulate_criteria, preorder_agents, AgentId, AgentSpec, EvaluationCriterion, OkrTree,
    SolutionDocument,
};
use crate::prompt::{self, parse_feedback, parse_key_values, parse_scores, TemplateId};
use crate::session::{Session, Temperature};
use crate::trace::{DocSnapshot, EventPayload};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortPolicy {
    /// Stop the run at the first failing agent.
    #[default]
    FailFast,
    /// Record the failure and continue with the document unchanged.
    SkipAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkflowConfig {
    /// Review/modify/score rounds per agent.
    pub refine_rounds: usize,
    /// Keep the highest-scoring version rather than the last one.
    pub keep_best: bool,
    pub abort: AbortPolicy,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            refine_rounds: 2,
            keep_best: true,
            abort: AbortPolicy::FailFast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub version: u64,
    /// Mean criterion score, 0–10.
    pub score: f64,
}

/// What one agent did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub agent: AgentId,
    /// Version produced by the expansion.
    pub expanded: u64,
    /// One entry per refinement round.
    pub feedback: Vec<String>,
    /// Scored versions in order; the expansion comes first when kept.
    pub iterations: Vec<Iteration>,
    pub chosen: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowOutcome {
    pub document: SolutionDocument,
    pub steps: Vec<StepRecord>,
}

/// Index of the highest score; the earliest wins ties.
pub fn select_best(iterations: &[Iteration]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, it) in iterations.iter().enumerate() {
        if best.is_none_or(|b| it.score > iterations[b].score) {
            best = Some(i);
        }
    }
    best
}

pub fn mean_score(scores: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|&s| f64::from(s)).sum::<f64>() / scores.len() as f64
}

/// Document as `id: value` lines in tree order.
pub fn render_document(tree: &OkrTree, doc: &SolutionDocument) -> String {
    let lines: Vec<String> = tree
        .preorder()
        .into_iter()
        .filter_map(|n| doc.get_node(&n.id).map(|v| format!("{}: {v}", n.id)))
        .collect();
    if lines.is_empty() {
        "(empty)".to_owned()
    } else {
        lines.join("\n")
    }
}

/// Indented outline of the plan, one `id: title` line per node.
pub fn render_outline(tree: &OkrTree) -> String {
    tree.preorder()
        .into_iter()
        .map(|n| format!("{}- {}: {}", "  ".repeat(n.level), n.id, n.title))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_criteria(criteria: &[EvaluationCriterion]) -> String {
    criteria
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs agents over one document, handing out versions from a single
/// counter.
pub struct Workflow<'a> {
    tree: &'a OkrTree,
    config: WorkflowConfig,
    last_version: u64,
}

impl<'a> Workflow<'a> {
    pub fn new(tree: &'a OkrTree, config: WorkflowConfig) -> Self {
        Self {
            tree,
            config,
            last_version: 0,
        }
    }

    fn next_version(&mut self) -> u64 {
        self.last_version += 1;
        self.last_version
    }

    fn allowed_keys(&self, agent: &AgentSpec) -> Result<Vec<String>> {
        Ok(self
            .tree
            .subtree(&agent.assigned_node)?
            .into_iter()
            .map(|n| n.id.to_string())
            .collect())
    }

    fn task(&self) -> &str {
        &self.tree.root().title
    }

    /// Sends a document-writing request and applies the reply. Writes
    /// outside the agent's subtree get one retry with a reminder, then fail.
    fn write_step(
        &mut self,
        agent: &AgentSpec,
        doc: &SolutionDocument,
        request: crate::llm::ChatRequest,
        session: &mut Session,
    ) -> Result<SolutionDocument> {
        let known: HashSet<String> = self.tree.preorder().iter().map(|n| n.id.to_string()).collect();
        let allowed: HashSet<String> = self.allowed_keys(agent)?.into_iter().collect();
        let mut current = request.clone();
        for attempt in 0..2 {
            let update = session.complete_checked(current.clone(), |raw| parse_key_values(raw, &known))?;
            let foreign: Vec<String> = update
                .iter()
                .filter(|(k, _)| !allowed.contains(k))
                .map(|(k, _)| k.clone())
                .collect();
            if foreign.is_empty() {
                let mut next = doc.clone();
                for (key, value) in update {
                    let path = self.tree.path(&crate::okr::NodeId::new(key))?;
                    next.insert(path, value);
                }
                next.set_version(self.next_version());
                next.validate(self.tree)?;
                session.record(EventPayload::DocSnapshot(DocSnapshot {
                    agent: Some(agent.id.clone()),
                    document: next.clone(),
                }))?;
                return Ok(next);
            }
            if attempt == 0 {
                session.warn(format!(
                    "{} wrote outside its subtree ({}); retrying",
                    agent.id,
                    foreign.join(", ")
                ))?;
                current = request.clone();
                current.messages.push(ChatMessage::user(format!(
                    "You may only write these keys: {}. Do not write {}. Reply again in the required format.",
                    self.allowed_keys(agent)?.join(", "),
                    foreign.join(", ")
                )));
            } else {
                let err = Error::LocalityViolation {
                    agent: agent.id.clone(),
                    keys: foreign,
                };
                session.record_error(err.to_string())?;
                return Err(err);
            }
        }
        unreachable!("loop returns on its second pass")
    }

    pub fn expand_solution(
        &mut self,
        agent: &AgentSpec,
        doc: &SolutionDocument,
        session: &mut Session,
    ) -> Result<SolutionDocument> {
        let node = self.tree.get(&agent.assigned_node)?;
        let text = prompt::render(
            TemplateId::SolutionExpand,
            &[
                ("job_title", &agent.job_title),
                ("task", self.task()),
                ("assignment", &format!("{}: {}", node.id, node.title)),
                ("outline", &render_outline(self.tree)),
                ("document", &render_document(self.tree, doc)),
                ("allowed_keys", &self.allowed_keys(agent)?.join(", ")),
            ],
        )?;
        let request = session.request(
            format!("workflow.expand/{}", agent.id),
            vec![ChatMessage::user(text)],
            Temperature::Creative,
        );
        self.write_step(agent, doc, request, session)
    }

    pub fn review_solution(
        &self,
        agent: &AgentSpec,
        doc: &SolutionDocument,
        criteria: &[EvaluationCriterion],
        session: &mut Session,
    ) -> Result<String> {
        if criteria.is_empty() {
            return Err(Error::Validation("review needs at least one criterion".into()));
        }
        let text = prompt::render(
            TemplateId::SolutionReview,
            &[
                ("job_title", &agent.job_title),
                ("task", self.task()),
                ("document", &render_document(self.tree, doc)),
                ("criteria", &render_criteria(criteria)),
            ],
        )?;
        let request = session.request(
            format!("workflow.review/{}", agent.id),
            vec![ChatMessage::user(text)],
            Temperature::Creative,
        );
        session.complete_checked(request, parse_feedback)
    }

    pub fn modify_solution(
        &mut self,
        agent: &AgentSpec,
        doc: &SolutionDocument,
        feedback: &str,
        session: &mut Session,
    ) -> Result<SolutionDocument> {
        if feedback.trim().is_empty() {
            return Err(Error::Validation("modification needs feedback".into()));
        }
        let node = self.tree.get(&agent.assigned_node)?;
        let text = prompt::render(
            TemplateId::SolutionModify,
            &[
                ("job_title", &agent.job_title),
                ("task", self.task()),
                ("assignment", &format!("{}: {}", node.id, node.title)),
                ("document", &render_document(self.tree, doc)),
                ("feedback", feedback.trim()),
                ("allowed_keys", &self.allowed_keys(agent)?.join(", ")),
            ],
        )?;
        let request = session.request(
            format!("workflow.modify/{}", agent.id),
            vec![ChatMessage::user(text)],
            Temperature::Creative,
        );
        self.write_step(agent, doc, request, session)
    }

    /// Mean of the per-criterion scores.
    pub fn score_solution(
        &self,
        agent: &AgentSpec,
        doc: &SolutionDocument,
        criteria: &[EvaluationCriterion],
        session: &mut Session,
    ) -> Result<f64> {
        if criteria.is_empty() {
            return Err(Error::Validation("scoring needs at least one criterion".into()));
        }
        let count = criteria.len().to_string();
        let text = prompt::render(
            TemplateId::SolutionScore,
            &[
                ("task", self.task()),
                ("document", &render_document(self.tree, doc)),
                ("criteria", &render_criteria(criteria)),
                ("criterion_count", &count),
            ],
        )?;
        let request = session.request(
            format!("workflow.score/{}", agent.id),
            vec![ChatMessage::user(text)],
            Temperature::Judge,
        );
        let scores = session.complete_checked(request, |raw| parse_scores(raw, criteria.len()))?;
        Ok(mean_score(&scores))
    }

    fn step(
        &mut self,
        agent: &AgentSpec,
        ordered: &[AgentSpec],
        criteria: &[EvaluationCriterion],
        doc: &SolutionDocument,
        session: &mut Session,
    ) -> Result<(SolutionDocument, StepRecord)> {
        let working = accumulate_criteria(ordered, criteria, &agent.id)?;
        let expanded = self.expand_solution(agent, doc, session)?;
        let mut record = StepRecord {
            agent: agent.id.clone(),
            expanded: expanded.version(),
            feedback: Vec::new(),
            iterations: Vec::new(),
            chosen: expanded.version(),
        };
        if self.config.refine_rounds == 0 || working.is_empty() {
            return Ok((expanded, record));
        }

        let mut versions = Vec::with_capacity(self.config.refine_rounds + 1);
        if self.config.keep_best {
            let score = self.score_solution(agent, &expanded, &working, session)?;
            record.iterations.push(Iteration {
                version: expanded.version(),
                score,
            });
            versions.push(expanded.clone());
        }
        let mut latest = expanded;
        for _ in 0..self.config.refine_rounds {
            let feedback = self.review_solution(agent, &latest, &working, session)?;
            let modified = self.modify_solution(agent, &latest, &feedback, session)?;
            let score = self.score_solution(agent, &modified, &working, session)?;
            record.feedback.push(feedback);
            record.iterations.push(Iteration {
                version: modified.version(),
                score,
            });
            versions.push(modified.clone());
            latest = modified;
        }
        let chosen = if self.config.keep_best {
            let best = select_best(&record.iterations).expect("at least one iteration");
            versions.swap_remove(best)
        } else {
            latest
        };
        record.chosen = chosen.version();
        Ok((chosen, record))
    }

    /// Runs every agent in pre-order of their nodes.
    pub fn run(
        &mut self,
        agents: &[AgentSpec],
        criteria: &[EvaluationCriterion],
        session: &mut Session,
    ) -> Result<WorkflowOutcome> {
        let ordered = preorder_agents(self.tree, agents)?;
        // Fail on dangling owners before spending any requests.
        if let Some(last) = ordered.last() {
            accumulate_criteria(&ordered, criteria, &last.id)?;
        }
        let mut document = SolutionDocument::new();
        let mut steps = Vec::with_capacity(ordered.len());
        for agent in &ordered {
            match self.step(agent, &ordered, criteria, &document, session) {
                Ok((chosen, record)) => {
                    document = chosen;
                    session.record(EventPayload::StepRecord(record.clone()))?;
                    steps.push(record);
                }
                Err(e) => {
                    session.record_error(format!("agent {} failed: {e}", agent.id))?;
                    if self.config.abort == AbortPolicy::FailFast {
                        return Err(e);
                    }
                }
            }
        }
        Ok(WorkflowOutcome { document, steps })
    }
}

pub fn run_workflow(
    plan: &OkrPlan,
    config: WorkflowConfig,
    session: &mut Session,
) -> Result<WorkflowOutcome> {
    Workflow::new(&plan.tree, config).run(&plan.agents, &plan.criteria, session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use crate::okr::{CriterionId, NodeId, NodeKind};

    fn plan() -> OkrPlan {
        let mut tree = OkrTree::new("trip");
        let root = tree.root_id().clone();
        let a = tree.add_child(&root, NodeKind::KeyResult, "itinerary").unwrap();
        let b = tree.add_child(&root, NodeKind::KeyResult, "budget").unwrap();
        let agents = vec![
            AgentSpec {
                id: AgentId::new("a0"),
                job_title: "planner".into(),
                assigned_node: a,
                order_index: 0,
                upstream: vec![],
            },
            AgentSpec {
                id: AgentId::new("a1"),
                job_title: "accountant".into(),
                assigned_node: b,
                order_index: 1,
                upstream: vec![AgentId::new("a0")],
            },
        ];
        let criteria = vec![
            EvaluationCriterion {
                id: CriterionId::new("c0"),
                owner: AgentId::new("a0"),
                text: "Covers the sights.".into(),
            },
            EvaluationCriterion {
                id: CriterionId::new("c1"),
                owner: AgentId::new("a1"),
                text: "Stays on budget.".into(),
            },
        ];
        OkrPlan { tree, agents, criteria }
    }

    #[test]
    fn best_is_earliest_maximum() {
        let its = |s: &[f64]| {
            s.iter()
                .enumerate()
                .map(|(i, &score)| Iteration { version: i as u64, score })
                .collect::<Vec<_>>()
        };
        assert_eq!(select_best(&its(&[3.0, 7.0, 7.0])), Some(1));
        assert_eq!(select_best(&its(&[9.0, 2.0])), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn single_round_keeps_better_version() {
        let plan = plan();
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence([
            "n1: Day 1 beach",
            "9",
            "Add a volcano.",
            "n1: Day 1 beach, day 2 volcano",
            "6",
            "n2: 2000 USD",
            "5, 5",
            "Add a contingency.",
            "n2: 2000 USD plus 200 USD contingency",
            "8, 9",
        ]));
        let config = WorkflowConfig {
            refine_rounds: 1,
            ..WorkflowConfig::default()
        };
        let out = run_workflow(&plan, config, &mut s).unwrap();
        assert_eq!(out.steps[0].chosen, 1);
        assert_eq!(out.steps[1].chosen, 4);
        assert_eq!(out.document.get_node(&NodeId::new("n1")), Some("Day 1 beach"));
        assert_eq!(
            out.document.get_node(&NodeId::new("n2")),
            Some("2000 USD plus 200 USD contingency")
        );
        assert_eq!(out.steps[1].iterations[1].score, 8.5);
        assert_eq!(s.recorder().exchange_count(), 10);
    }

    #[test]
    fn zero_rounds_is_expansion_only() {
        let plan = plan();
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["n1: x", "n2: y"]));
        let config = WorkflowConfig {
            refine_rounds: 0,
            ..WorkflowConfig::default()
        };
        let out = run_workflow(&plan, config, &mut s).unwrap();
        assert_eq!(out.document.len(), 2);
        assert!(out.steps.iter().all(|st| st.iterations.is_empty()));
    }

    #[test]
    fn foreign_write_retried_once_then_fails() {
        let plan = plan();
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["n2: mine now", "n2: still"]));
        let err = run_workflow(&plan, WorkflowConfig::default(), &mut s).unwrap_err();
        assert!(matches!(err, Error::LocalityViolation { .. }));
    }

    #[test]
    fn foreign_write_recovers_on_retry() {
        let plan = plan();
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["n2: mine now", "n1: ok", "n2: fine"]));
        let config = WorkflowConfig {
            refine_rounds: 0,
            ..WorkflowConfig::default()
        };
        let out = run_workflow(&plan, config, &mut s).unwrap();
        assert_eq!(out.document.get_node(&NodeId::new("n1")), Some("ok"));
        assert_eq!(out.steps[0].expanded, 1);
    }

    #[test]
    fn skip_policy_keeps_document_and_continues() {
        let plan = plan();
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["n2: a", "n2: b", "n2: c"]));
        let config = WorkflowConfig {
            refine_rounds: 0,
            abort: AbortPolicy::SkipAgent,
            ..WorkflowConfig::default()
        };
        let out = run_workflow(&plan, config, &mut s).unwrap();
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.steps[0].agent, AgentId::new("a1"));
    }

    #[test]
    fn document_rendering_follows_tree_order() {
        let plan = plan();
        let mut doc = SolutionDocument::new();
        doc.insert(plan.tree.path(&NodeId::new("n2")).unwrap(), "b");
        doc.insert(plan.tree.path(&NodeId::new("n1")).unwrap(), "a");
        assert_eq!(render_document(&plan.tree, &doc), "n1: a\nn2: b");
        assert_eq!(render_document(&plan.tree, &SolutionDocument::new()), "(empty)");
    }
}
