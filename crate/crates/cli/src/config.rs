use std::path::{Path, PathBuf};

use clap::ValueEnum;
use okr_agent::llm::RetryPolicy;
use okr_agent::{GenConfig, RequestDefaults, WorkflowConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible HTTP endpoint.
    #[default]
    Live,
    /// Canned responses from a script file.
    Scripted,
    /// Responses from a recorded trace.
    Replay,
}

/// Settings that decide which requests a run sends. They are stored in
/// every trace so a replay can reproduce them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub request: RequestDefaults,
    pub retry: RetryPolicy,
    pub gen: GenConfig,
    pub workflow: WorkflowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub backend: BackendKind,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub script: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub out: PathBuf,
    /// On-disk response cache for the live backend.
    pub cache: bool,
    pub request: RequestDefaults,
    pub retry: RetryPolicy,
    pub gen: GenConfig,
    pub workflow: WorkflowConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Live,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            script: None,
            trace: None,
            targets: None,
            out: PathBuf::from("out"),
            cache: true,
            request: RequestDefaults::default(),
            retry: RetryPolicy::default(),
            gen: GenConfig::default(),
            workflow: WorkflowConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }

    pub fn engine(&self) -> EngineSettings {
        EngineSettings {
            request: self.request.clone(),
            retry: self.retry,
            gen: self.gen,
            workflow: self.workflow,
        }
    }

    pub fn set_engine(&mut self, engine: EngineSettings) {
        self.request = engine.request;
        self.retry = engine.retry;
        self.gen = engine.gen;
        self.workflow = engine.workflow;
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        match self.backend {
            BackendKind::Live if self.base_url.trim().is_empty() => {
                Err(UsageError("the live backend needs a base URL".into()))
            }
            BackendKind::Scripted if self.script.is_none() => {
                Err(UsageError("the scripted backend needs --script".into()))
            }
            BackendKind::Replay if self.trace.is_none() => {
                Err(UsageError("the replay backend needs --trace".into()))
            }
            _ => Ok(()),
        }?;
        if self.request.model.trim().is_empty() {
            return Err(UsageError("model name is empty".into()));
        }
        self.gen
            .validate()
            .map_err(|e| UsageError(e.to_string()))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.out.join("traces")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }
}
