//! Command-line front end: configuration, backend wiring and the
//! `decompose`, `run`, `score` and `compare` commands.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_compare, cmd_decompose, cmd_run, cmd_score, CompareRow, RunOutput};
pub use config::{BackendKind, CliConfig, EngineSettings};

/// Bad flags, config or input files; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_ENGINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "okr-agent", version, about = "Plan a task as an OKR tree and solve it with a team of agents")]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct GlobalOpts {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Environment variable to read the API key from.
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
    /// Levels in the OKR tree.
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    /// Candidate objective lists sampled for the first level.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub max_children: Option<usize>,
    #[arg(long, global = true)]
    pub refine_rounds: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Recorded trace to serve responses from (replay backend).
    #[arg(long, global = true)]
    pub trace: Option<PathBuf>,
    /// Script file for the scripted backend.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub targets: Option<PathBuf>,
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// Keep going when an agent fails instead of stopping the run.
    #[arg(long, global = true)]
    pub skip_failed_agents: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Task description.
    pub text: Option<String>,
    /// Read the task description from a file.
    #[arg(long, short = 'f', conflicts_with = "text")]
    pub input_file: Option<PathBuf>,
}

impl InputArgs {
    pub fn read(&self) -> Result<String, UsageError> {
        let text = match (&self.text, &self.input_file) {
            (Some(t), _) => t.clone(),
            (None, Some(path)) => std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("input {}: {e}", path.display())))?,
            (None, None) => {
                return Err(UsageError(
                    "no task given: pass it as an argument or with --input-file".into(),
                ))
            }
        };
        if text.trim().is_empty() {
            return Err(UsageError("the task description is empty".into()));
        }
        Ok(text.trim().to_owned())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the OKR tree, agents and criteria.
    Decompose(InputArgs),
    /// Decompose, then run the agent workflow to a final document.
    Run(InputArgs),
    /// Trivia coverage of a document or text file.
    Score {
        document: PathBuf,
    },
    /// Standard prompt, step-by-step prompt and full pipeline side by side.
    Compare(InputArgs),
}

impl GlobalOpts {
    /// Config file (or defaults) with flags applied on top.
    pub fn resolve(&self) -> Result<CliConfig, UsageError> {
        let mut config = match &self.config {
            Some(path) => CliConfig::load(path)?,
            None => CliConfig::default(),
        };
        if let Some(v) = self.backend {
            config.backend = v;
        }
        if let Some(v) = &self.base_url {
            config.base_url = v.clone();
        }
        if let Some(v) = &self.model {
            config.request.model = v.clone();
        }
        if let Some(v) = &self.api_key_env {
            config.api_key_env = v.clone();
        }
        if let Some(v) = self.depth {
            config.gen.hierarchy =
                okr_agent::Hierarchy::new(v).map_err(|e| UsageError(format!("--depth: {e}")))?;
        }
        if let Some(v) = self.samples {
            config.gen.candidate_samples = v;
        }
        if let Some(v) = self.max_children {
            config.gen.max_children_per_node = v;
        }
        if let Some(v) = self.refine_rounds {
            config.workflow.refine_rounds = v;
        }
        if let Some(v) = self.seed {
            config.request.seed = Some(v);
        }
        if let Some(v) = &self.trace {
            config.trace = Some(v.clone());
        }
        if let Some(v) = &self.script {
            config.script = Some(v.clone());
        }
        if let Some(v) = &self.out {
            config.out = v.clone();
        }
        if let Some(v) = &self.targets {
            config.targets = Some(v.clone());
        }
        if self.no_cache {
            config.cache = false;
        }
        if self.skip_failed_agents {
            config.workflow.abort = okr_agent::AbortPolicy::SkipAgent;
        }
        Ok(config)
    }
}

/// Runs one parsed command, writing its report to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let config = cli.opts.resolve()?;
    match &cli.command {
        Command::Decompose(input) => {
            let text = input.read()?;
            config.validate()?;
            cmd_decompose(&text, &config, stdout)?;
        }
        Command::Run(input) => {
            let text = input.read()?;
            config.validate()?;
            cmd_run(&text, &config, stdout)?;
        }
        Command::Score { document } => {
            let targets = config
                .targets
                .as_deref()
                .ok_or_else(|| UsageError("score needs --targets".into()))?;
            cmd_score(document, targets, stdout)?;
        }
        Command::Compare(input) => {
            let text = input.read()?;
            config.validate()?;
            let targets = config
                .targets
                .clone()
                .ok_or_else(|| UsageError("compare needs --targets".into()))?;
            cmd_compare(&text, &targets, &config, stdout)?;
        }
    }
    Ok(())
}

/// 2 for usage and configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_ENGINE
    }
}

/// One-line message naming the error class where there is one.
pub fn describe(err: &anyhow::Error) -> String {
    match err.downcast_ref::<okr_agent::Error>() {
        Some(e) => format!("error [{}]: {err:#}", e.class()),
        None if err.downcast_ref::<UsageError>().is_some() => format!("usage: {err:#}"),
        None => format!("error: {err:#}"),
    }
}
