//! Hierarchical OKR generation: the tree, one agent per node, and one
//! evaluation criterion per agent, built level by level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::ChatMessage;
use crate::okr::{AgentId, AgentSpec, CriterionId, EvaluationCriterion, Hierarchy, NodeId, NodeKind, OkrTree};
use crate::prompt::{
    self, parse_arrow_chain, parse_comma_list, parse_criterion, FormatError, ParsedList, TemplateId,
};
use crate::session::{Session, Temperature};
use crate::trace::{EventPayload, PlanSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub hierarchy: Hierarchy,
    /// Candidate objective lists sampled for level 1.
    pub candidate_samples: usize,
    pub max_children_per_node: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            hierarchy: Hierarchy::default(),
            candidate_samples: 3,
            max_children_per_node: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_samples == 0 {
            return Err(Error::Validation("candidate_samples must be at least 1".into()));
        }
        if self.max_children_per_node == 0 {
            return Err(Error::Validation(
                "max_children_per_node must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of generation: the tree, its agents in execution order and
/// their criteria in creation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkrPlan {
    pub tree: OkrTree,
    pub agents: Vec<AgentSpec>,
    pub criteria: Vec<EvaluationCriterion>,
}

impl OkrPlan {
    pub fn agent(&self, id: &AgentId) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| &a.id == id)
    }

    pub fn criteria_of<'a>(&'a self, id: &'a AgentId) -> impl Iterator<Item = &'a EvaluationCriterion> {
        self.criteria.iter().filter(move |c| &c.owner == id)
    }
}

/// Samples `k` candidate first-level objective lists. Sample `i` uses
/// seed `seed + i` when a seed is configured.
pub fn propose_objectives(input: &str, k: usize, session: &mut Session) -> Result<Vec<ParsedList>> {
    let system = prompt::render(TemplateId::ObjectivePropose, &[("input", input)])?;
    let user = prompt::render_okr_expand(input, &[])?;
    let base_seed = session.defaults().seed;
    let mut candidates = Vec::with_capacity(k);
    for i in 0..k {
        let request = session
            .request(
                format!("genokr.propose#{i}"),
                vec![ChatMessage::system(system.clone()), ChatMessage::user(user.clone())],
                Temperature::Creative,
            )
            .with_seed(base_seed.map(|s| s.wrapping_add(i as u64)));
        candidates.push(session.complete_checked(request, parse_comma_list)?);
    }
    Ok(candidates)
}

/// Merges candidate lists into one. Every returned item appears in some
/// candidate. A single candidate is used as is.
pub fn consolidate_objectives(
    input: &str,
    candidates: &[ParsedList],
    max_items: usize,
    session: &mut Session,
) -> Result<ParsedList> {
    let mut merged = match candidates {
        [] => return Err(Error::Validation("no candidate objective lists".into())),
        [only] => only.clone(),
        _ => {
            let listing = candidates
                .iter()
                .enumerate()
                .map(|(i, c)| format!("Candidate {}: {}", i + 1, c.join_commas()))
                .collect::<Vec<_>>()
                .join("\n");
            let max = max_items.to_string();
            let text = prompt::render(
                TemplateId::ObjectiveConsolidate,
                &[("input", input), ("candidates", &listing), ("max_items", &max)],
            )?;
            let request = session.request(
                "genokr.consolidate",
                vec![ChatMessage::user(text)],
                Temperature::Judge,
            );
            let pool: Vec<&str> = candidates
                .iter()
                .flat_map(|c| c.items().iter().map(String::as_str))
                .collect();
            session.complete_checked(request, |raw| restrict_to(parse_comma_list(raw)?, &pool))?
        }
    };
    merged.truncate(max_items);
    Ok(merged)
}

/// Maps items onto candidate spellings, case-insensitively; anything not
/// among the candidates is a format error.
fn restrict_to(list: ParsedList, pool: &[&str]) -> Result<ParsedList, FormatError> {
    let mut out = Vec::with_capacity(list.len());
    for item in list.items() {
        let lower = item.to_lowercase();
        match pool.iter().find(|p| p.to_lowercase() == lower) {
            Some(p) => out.push(*p),
            None => {
                return Err(FormatError::new(format!(
                    "`{item}` is not one of the candidate objectives"
                )))
            }
        }
    }
    ParsedList::from_items(out)
}

fn child_kind(level: usize, depth: usize) -> NodeKind {
    if level < depth {
        NodeKind::Objective
    } else {
        NodeKind::KeyResult
    }
}

/// Asks for the sub-items of `node` and attaches them as children.
pub fn expand_node(
    tree: &mut OkrTree,
    node: &NodeId,
    config: &GenConfig,
    session: &mut Session,
) -> Result<Vec<NodeId>> {
    let depth = config.hierarchy.depth();
    let target = tree.get(node)?.clone();
    if target.level >= depth {
        return Err(Error::Validation(format!(
            "node {node} is already at the deepest level {depth}"
        )));
    }
    let text = match &target.parent {
        None => prompt::render_okr_expand(&target.title, &[])?,
        Some(parent) => {
            let parent = tree.get(parent)?;
            prompt::render_okr_expand(&parent.title, std::slice::from_ref(&target.title))?
        }
    };
    let request = session.request(
        format!("genokr.expand/{node}"),
        vec![ChatMessage::user(text)],
        Temperature::Creative,
    );
    let mut items = session.complete_checked(request, parse_comma_list)?;
    items.truncate(config.max_children_per_node);
    let kind = child_kind(target.level + 1, depth);
    items
        .items()
        .iter()
        .map(|title| tree.add_child(node, kind, title.clone()).map_err(Error::from))
        .collect()
}

/// One job-title chain per group of siblings in `nodes`; the i-th title is
/// bound to the i-th sibling. Mismatched counts are recycled or truncated
/// with a warning.
pub fn assign_agents(
    tree: &OkrTree,
    nodes: &[NodeId],
    first_agent: usize,
    session: &mut Session,
) -> Result<Vec<AgentSpec>> {
    let mut groups: Vec<(Option<NodeId>, Vec<NodeId>)> = Vec::new();
    for id in nodes {
        let parent = tree.get(id)?.parent.clone();
        match groups.iter_mut().find(|(p, _)| *p == parent) {
            Some((_, members)) => members.push(id.clone()),
            None => groups.push((parent, vec![id.clone()])),
        }
    }

    let mut agents = Vec::with_capacity(nodes.len());
    for (parent, members) in groups {
        let titles: Vec<String> = members
            .iter()
            .map(|m| tree.get(m).map(|n| n.title.clone()))
            .collect::<Result<_, _>>()?;
        let (objective, group_key) = match &parent {
            Some(p) => (tree.get(p)?.title.clone(), p.to_string()),
            None => (tree.root().title.clone(), "root".to_owned()),
        };
        let text = prompt::render_agent_gen(&objective, &titles)?;
        let request = session.request(
            format!("genokr.agents/{group_key}"),
            vec![ChatMessage::user(text)],
            Temperature::Creative,
        );
        let jobs = session.complete_checked(request, parse_arrow_chain)?;
        if jobs.len() != members.len() {
            let how = if jobs.len() < members.len() { "recycling" } else { "truncating" };
            session.warn(format!(
                "agent chain for {group_key} has {} titles for {} nodes; {how}",
                jobs.len(),
                members.len()
            ))?;
        }
        for (i, member) in members.into_iter().enumerate() {
            let index = first_agent + agents.len();
            agents.push(AgentSpec {
                id: AgentId::new(format!("a{index}")),
                job_title: jobs.items()[i % jobs.len()].clone(),
                assigned_node: member,
                order_index: index,
                upstream: Vec::new(),
            });
        }
    }
    Ok(agents)
}

/// One criterion sentence per agent, written in the voice of its job title
/// about its node.
pub fn generate_criteria(
    tree: &OkrTree,
    agents: &[AgentSpec],
    first_criterion: usize,
    session: &mut Session,
) -> Result<Vec<EvaluationCriterion>> {
    let mut out = Vec::with_capacity(agents.len());
    for agent in agents {
        let node = tree.get(&agent.assigned_node)?;
        let text = prompt::render_criteria_gen(&agent.job_title, &node.title)?;
        let request = session.request(
            format!("genokr.criteria/{}", agent.id),
            vec![ChatMessage::user(text)],
            Temperature::Creative,
        );
        let sentence = session.complete_checked(request, parse_criterion)?;
        out.push(EvaluationCriterion {
            id: CriterionId::new(format!("c{}", first_criterion + out.len())),
            owner: agent.id.clone(),
            text: sentence,
        });
    }
    Ok(out)
}

/// Builds the full plan. A snapshot is recorded after every level; on
/// failure the partial plan is snapshotted before the error is returned.
pub fn gen_okr(input: &str, config: &GenConfig, session: &mut Session) -> Result<OkrPlan> {
    config.validate()?;
    let input = input.trim();
    if input.is_empty() {
        return Err(Error::Validation("task description is empty".into()));
    }
    let mut plan = OkrPlan {
        tree: OkrTree::new(input),
        agents: Vec::new(),
        criteria: Vec::new(),
    };
    let mut level = 0;
    let result = build_levels(input, config, session, &mut plan, &mut level);
    if let Err(e) = result {
        session.record(EventPayload::TreeSnapshot(PlanSnapshot {
            level,
            tree: plan.tree.clone(),
            agents: plan.agents.clone(),
            criteria: plan.criteria.clone(),
        }))?;
        session.record_error(format!("generation stopped at level {level}: {e}"))?;
        return Err(e);
    }
    plan.agents = crate::okr::preorder_agents(&plan.tree, &plan.agents)?;
    Ok(plan)
}

fn build_levels(
    input: &str,
    config: &GenConfig,
    session: &mut Session,
    plan: &mut OkrPlan,
    level: &mut usize,
) -> Result<()> {
    let depth = config.hierarchy.depth();
    for l in 1..=depth {
        *level = l;
        let created: Vec<NodeId> = if l == 1 {
            let candidates = propose_objectives(input, config.candidate_samples, session)?;
            let chosen =
                consolidate_objectives(input, &candidates, config.max_children_per_node, session)?;
            let root = plan.tree.root_id().clone();
            let kind = child_kind(1, depth);
            chosen
                .items()
                .iter()
                .map(|t| plan.tree.add_child(&root, kind, t.clone()))
                .collect::<Result<_, _>>()?
        } else {
            let parents: Vec<NodeId> = plan
                .tree
                .level_nodes(l - 1)
                .into_iter()
                .map(|n| n.id.clone())
                .collect();
            let mut created = Vec::new();
            for parent in &parents {
                created.extend(expand_node(&mut plan.tree, parent, config, session)?);
            }
            created
        };
        let agents = assign_agents(&plan.tree, &created, plan.agents.len(), session)?;
        plan.agents.extend(agents.iter().cloned());
        let criteria = generate_criteria(&plan.tree, &agents, plan.criteria.len(), session)?;
        plan.criteria.extend(criteria);
        session.record(EventPayload::TreeSnapshot(PlanSnapshot {
            level: l,
            tree: plan.tree.clone(),
            agents: plan.agents.clone(),
            criteria: plan.criteria.clone(),
        }))?;
    }
    debug_assert!(plan.tree.validate().is_ok());
    Ok(())
}
