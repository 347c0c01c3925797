//! Objective-and-key-result planning for LLM agents: a task is decomposed
//! into a tree of objectives, each node gets a persona and an evaluation
//! criterion, and the personas then write, review and score one shared
//! document in tree order.

pub mod baseline;
pub mod error;
pub mod genokr;
pub mod llm;
pub mod metrics;
pub mod okr;
pub mod prompt;
pub mod session;
pub mod trace;
pub mod workflow;

pub use error::{Error, Result};
pub use genokr::{gen_okr, GenConfig, OkrPlan};
pub use okr::{
    AgentId, AgentSpec, CriterionId, EvaluationCriterion, Hierarchy, NodeId, NodeKind, NodePath,
    OkrNode, OkrTree, SolutionDocument,
};
pub use session::{RequestDefaults, Session};
pub use workflow::{run_workflow, AbortPolicy, StepRecord, WorkflowConfig, WorkflowOutcome};
