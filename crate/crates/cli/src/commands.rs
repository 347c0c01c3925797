use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use okr_agent::baseline::{run_cot, run_standard};
use okr_agent::genokr::{gen_okr, OkrPlan};
use okr_agent::llm::{ChatBackend, HttpBackend, HttpConfig, ResponseCache, Script, ScriptedBackend};
use okr_agent::metrics::{
    flat_document, flat_from_values, parse_targets, structure_stats, trivia_coverage,
    CoverageReport, StructureStats, Target,
};
use okr_agent::okr::{canonical_serialize, parse_document};
use okr_agent::trace::{self, ReplayBackend, TraceMeta, TraceRecorder, TraceStore};
use okr_agent::{run_workflow, Session, StepRecord, WorkflowOutcome};
use serde::Serialize;

use crate::config::{BackendKind, CliConfig, EngineSettings};
use crate::UsageError;

/// Everything a `decompose` or `run` produced.
#[derive(Debug)]
pub struct RunOutput {
    pub plan: OkrPlan,
    pub outcome: Option<WorkflowOutcome>,
    pub trace_path: PathBuf,
    pub exchanges: usize,
}

/// Builds the backend and a session recording into a fresh trace under
/// `<out>/traces`. Replays adopt the engine settings stored in the trace.
fn open_session(config: &CliConfig, command: &str) -> anyhow::Result<(Session, EngineSettings)> {
    let mut engine = config.engine();
    let backend: Arc<dyn ChatBackend> = match config.backend {
        BackendKind::Live => {
            if std::env::var_os(&config.api_key_env).is_none() {
                log::warn!("{} is not set; sending requests without an API key", config.api_key_env);
            }
            let http = HttpConfig {
                policy: engine.retry,
                ..HttpConfig::new(config.base_url.clone()).with_key_from_env(&config.api_key_env)
            };
            Arc::new(HttpBackend::new(http)?)
        }
        BackendKind::Scripted => {
            let path = config.script.as_deref().expect("validated");
            let script = Script::load(path).map_err(|e| UsageError(e.to_string()))?;
            Arc::new(ScriptedBackend::new(script))
        }
        BackendKind::Replay => {
            let path = config.trace.as_deref().expect("validated");
            let loaded = trace::load(path).map_err(|e| UsageError(e.to_string()))?;
            for w in &loaded.warnings {
                log::warn!("{}: {w}", path.display());
            }
            if let Some(recorded) = loaded
                .trace
                .meta
                .as_ref()
                .and_then(|m| m.config.get("engine"))
            {
                engine = serde_json::from_value(recorded.clone())
                    .with_context(|| format!("engine settings in {}", path.display()))?;
            }
            Arc::new(ReplayBackend::new(&loaded.trace))
        }
    };

    let meta = TraceMeta::new(serde_json::json!({
        "command": command,
        "backend": config.backend,
        "engine": engine,
    }));
    let writer = TraceStore::new(config.traces_dir()).create(&meta)?;
    let mut session = Session::new(backend, TraceRecorder::with_writer(meta, writer))
        .with_policy(engine.retry)
        .with_defaults(engine.request.clone());
    if config.backend == BackendKind::Live && config.cache {
        session = session.with_cache(ResponseCache::on_disk(config.cache_dir()));
    }
    Ok((session, engine))
}

fn write_output(config: &CliConfig, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&config.out)
        .with_context(|| format!("creating {}", config.out.display()))?;
    let path = config.out.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Indented tree with the agents bound to each node, then the criteria.
pub fn render_plan(plan: &OkrPlan) -> String {
    let mut out = String::new();
    for node in plan.tree.preorder() {
        let agents: Vec<String> = plan
            .agents
            .iter()
            .filter(|a| a.assigned_node == node.id)
            .map(|a| format!("{} ({})", a.job_title, a.id))
            .collect();
        out.push_str(&format!("{}{} {}", "  ".repeat(node.level), node.id, node.title));
        if !agents.is_empty() {
            out.push_str(&format!("  <- {}", agents.join(", ")));
        }
        out.push('\n');
    }
    if !plan.criteria.is_empty() {
        out.push_str("\nCriteria\n");
        for c in &plan.criteria {
            out.push_str(&format!("{} {}: {}\n", c.id, c.owner, c.text));
        }
    }
    out
}

fn finish_trace(session: &Session) -> PathBuf {
    let path = session
        .recorder()
        .path()
        .expect("command sessions write to disk")
        .to_owned();
    eprintln!("trace: {}", path.display());
    path
}

fn save_plan(config: &CliConfig, plan: &OkrPlan) -> anyhow::Result<()> {
    write_output(config, "plan.json", &to_pretty(plan))?;
    write_output(config, "tree.json", plan.tree.to_json().as_bytes())?;
    write_output(config, "outline.txt", render_plan(plan).as_bytes())?;
    Ok(())
}

pub fn cmd_decompose(
    input: &str,
    config: &CliConfig,
    stdout: &mut dyn Write,
) -> anyhow::Result<RunOutput> {
    let (mut session, engine) = open_session(config, "decompose")?;
    let result = gen_okr(input, &engine.gen, &mut session);
    let trace_path = finish_trace(&session);
    let plan = result?;
    save_plan(config, &plan)?;
    stdout.write_all(render_plan(&plan).as_bytes())?;
    Ok(RunOutput {
        plan,
        outcome: None,
        exchanges: session.recorder().exchange_count(),
        trace_path,
    })
}

#[derive(Debug, Serialize)]
struct RunStats<'a> {
    exchanges: usize,
    agents: usize,
    criteria: usize,
    structure: StructureStats,
    steps: &'a [StepRecord],
}

pub fn cmd_run(input: &str, config: &CliConfig, stdout: &mut dyn Write) -> anyhow::Result<RunOutput> {
    let (mut session, engine) = open_session(config, "run")?;
    let result = gen_okr(input, &engine.gen, &mut session)
        .and_then(|plan| run_workflow(&plan, engine.workflow, &mut session).map(|o| (plan, o)));
    let trace_path = finish_trace(&session);
    let (plan, outcome) = result?;

    save_plan(config, &plan)?;
    let document = &outcome.document;
    write_output(config, "document.json", &canonical_serialize(document, &plan.tree)?)?;
    let text = document.plain_text(&plan.tree)?;
    write_output(config, "document.txt", format!("{text}\n").as_bytes())?;
    let exchanges = session.recorder().exchange_count();
    let stats = RunStats {
        exchanges,
        agents: plan.agents.len(),
        criteria: plan.criteria.len(),
        structure: structure_stats(&plan.tree, document),
        steps: &outcome.steps,
    };
    write_output(config, "stats.json", &to_pretty(&stats))?;
    writeln!(stdout, "{text}")?;
    Ok(RunOutput {
        plan,
        outcome: Some(outcome),
        exchanges,
        trace_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreOutput {
    #[serde(flatten)]
    pub coverage: CoverageReport,
    pub structure: StructureStats,
}

fn load_targets(path: &Path) -> Result<Vec<Target>, UsageError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("targets {}: {e}", path.display())))?;
    let targets = parse_targets(&raw).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    if targets.is_empty() {
        return Err(UsageError(format!("{}: no targets", path.display())));
    }
    Ok(targets)
}

/// Scores a canonical document file or, failing that, plain text split
/// into paragraphs.
pub fn score_file(document: &Path, targets: &[Target]) -> anyhow::Result<ScoreOutput> {
    let bytes = fs::read(document)
        .map_err(|e| UsageError(format!("document {}: {e}", document.display())))?;
    let (tree, doc) = match parse_document(&bytes) {
        Ok(doc) => flat_from_values("document", doc.entries().map(|(_, v)| v.to_owned()))?,
        Err(_) => flat_document("document", &String::from_utf8_lossy(&bytes))?,
    };
    let text = doc.plain_text(&tree)?;
    Ok(ScoreOutput {
        coverage: trivia_coverage(&text, targets)?,
        structure: structure_stats(&tree, &doc),
    })
}

pub fn cmd_score(
    document: &Path,
    targets: &Path,
    stdout: &mut dyn Write,
) -> anyhow::Result<ScoreOutput> {
    let targets = load_targets(targets)?;
    let report = score_file(document, &targets)?;
    stdout.write_all(&to_pretty(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub pipeline: String,
    pub coverage: Option<f64>,
    pub matched: Vec<String>,
    pub exchanges: usize,
    /// Filled entries (paragraphs for the single-prompt pipelines).
    pub entries: usize,
    pub error: Option<String>,
}

pub fn render_compare_table(rows: &[CompareRow], total: usize) -> String {
    let mut out = format!(
        "{:<10}{:>10}{:>10}{:>11}{:>9}  {}\n",
        "pipeline", "coverage", "matched", "exchanges", "entries", "error"
    );
    for row in rows {
        let coverage = row
            .coverage
            .map_or_else(|| "-".to_owned(), |c| format!("{c:.3}"));
        let matched = format!("{}/{total}", row.matched.len());
        out.push_str(&format!(
            "{:<10}{:>10}{:>10}{:>11}{:>9}  {}\n",
            row.pipeline,
            coverage,
            matched,
            row.exchanges,
            row.entries,
            row.error.as_deref().unwrap_or("-")
        ));
    }
    out
}

/// Runs the standard prompt, the step-by-step prompt and the full pipeline
/// on one backend and one trace. A failing pipeline still gets a row.
pub fn cmd_compare(
    input: &str,
    targets: &Path,
    config: &CliConfig,
    stdout: &mut dyn Write,
) -> anyhow::Result<Vec<CompareRow>> {
    let targets = load_targets(targets)?;
    let (mut session, engine) = open_session(config, "compare")?;
    let mut rows = Vec::with_capacity(3);

    type Pipeline<'a> = Box<dyn FnOnce(&mut Session) -> okr_agent::Result<(String, StructureStats)> + 'a>;
    let single = |text: String| -> okr_agent::Result<(String, StructureStats)> {
        let (tree, doc) = flat_document("answer", &text)?;
        Ok((text, structure_stats(&tree, &doc)))
    };
    let pipelines: Vec<(&str, Pipeline)> = vec![
        ("standard", Box::new(|s: &mut Session| single(run_standard(input, s)?))),
        ("cot", Box::new(|s: &mut Session| single(run_cot(input, s)?))),
        (
            "okr",
            Box::new(|s: &mut Session| {
                let plan = gen_okr(input, &engine.gen, s)?;
                let outcome = run_workflow(&plan, engine.workflow, s)?;
                let text = outcome.document.plain_text(&plan.tree)?;
                Ok((text, structure_stats(&plan.tree, &outcome.document)))
            }),
        ),
    ];
    for (name, pipeline) in pipelines {
        let before = session.recorder().exchange_count();
        let result = pipeline(&mut session);
        let exchanges = session.recorder().exchange_count() - before;
        let row = match result {
            Ok((text, stats)) => {
                let report = trivia_coverage(&text, &targets)?;
                CompareRow {
                    pipeline: name.to_owned(),
                    coverage: Some(report.coverage),
                    matched: report.matched,
                    exchanges,
                    entries: stats.filled,
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("{name} failed: {e}");
                CompareRow {
                    pipeline: name.to_owned(),
                    coverage: None,
                    matched: Vec::new(),
                    exchanges,
                    entries: 0,
                    error: Some(format!("{}: {e}", e.class())),
                }
            }
        };
        rows.push(row);
    }
    finish_trace(&session);

    let table = render_compare_table(&rows, targets.len());
    write_output(config, "compare.json", &to_pretty(&rows))?;
    write_output(config, "compare.txt", table.as_bytes())?;
    stdout.write_all(table.as_bytes())?;
    Ok(rows)
}
