//! Append-only run traces.
//!
//! A trace is a JSON-lines file `<store>/<run_id>.jsonl` with one
//! [`TraceEvent`] per line, plus a `<run_id>.meta.json` sidecar holding the
//! [`TraceMeta`]. Every line is written with a single `write_all` and
//! flushed before `append` returns, so a crash can at worst leave one
//! unterminated line at the tail, which [`load`] drops.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{fingerprint, BackendError, ChatBackend, ChatRequest, ChatResponse, Fingerprint};
use crate::okr::{AgentId, AgentSpec, EvaluationCriterion, OkrTree, SolutionDocument};
use crate::prompt::template_set_hash;
use crate::workflow::StepRecord;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt trace at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("run {0} already exists in the store")]
    DuplicateRun(String),
}

impl TraceError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        TraceError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema_version: u32,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    /// Snapshot of the effective configuration.
    pub config: serde_json::Value,
    pub template_hash: String,
}

impl TraceMeta {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            run_id: uuid::Uuid::new_v4().to_string(),
            created_at: Utc::now(),
            config,
            template_hash: template_set_hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub tag: String,
    pub fingerprint: Fingerprint,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Tree plus the agents and criteria generated so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSnapshot {
    pub level: usize,
    pub tree: OkrTree,
    pub agents: Vec<AgentSpec>,
    pub criteria: Vec<EvaluationCriterion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSnapshot {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
    pub document: SolutionDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    Exchange(ExchangeRecord),
    TreeSnapshot(PlanSnapshot),
    DocSnapshot(DocSnapshot),
    StepRecord(StepRecord),
    Warning { message: String },
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub meta: Option<TraceMeta>,
    pub events: Vec<TraceEvent>,
}

impl RunTrace {
    pub fn exchanges(&self) -> impl Iterator<Item = &ExchangeRecord> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::Exchange(x) => Some(x),
            _ => None,
        })
    }

    pub fn step_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::StepRecord(s) => Some(s),
            _ => None,
        })
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::Warning { message } => Some(message.as_str()),
            _ => None,
        })
    }

    /// Writes the event file and, when present, the meta sidecar.
    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let mut bytes = Vec::new();
        for event in &self.events {
            serde_json::to_writer(&mut bytes, event).expect("event serializes");
            bytes.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| TraceError::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| TraceError::io(path, e))?;
        if let Some(meta) = &self.meta {
            let meta_path = meta_path_for(path);
            let json = serde_json::to_vec_pretty(meta).expect("meta serializes");
            fs::write(&meta_path, json).map_err(|e| TraceError::io(&meta_path, e))?;
        }
        Ok(())
    }
}

fn meta_path_for(events_path: &Path) -> PathBuf {
    let stem = events_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    events_path.with_file_name(format!("{stem}.meta.json"))
}

/// Line-flushed appender for one trace file.
#[derive(Debug)]
pub struct TraceWriter {
    path: PathBuf,
    file: File,
}

impl TraceWriter {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TraceError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TraceError::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &TraceEvent) -> Result<(), TraceError> {
        let mut line = serde_json::to_vec(event).expect("event serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| TraceError::io(&self.path, e))
    }
}

/// A directory of traces laid out as `<dir>/<run_id>.jsonl`.
#[derive(Debug, Clone)]
pub struct TraceStore {
    dir: PathBuf,
}

impl TraceStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, run_id: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.jsonl"))
    }

    /// Creates the event file (which must not exist yet) and the meta sidecar.
    pub fn create(&self, meta: &TraceMeta) -> Result<TraceWriter, TraceError> {
        fs::create_dir_all(&self.dir).map_err(|e| TraceError::io(&self.dir, e))?;
        let path = self.path_for(&meta.run_id);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => TraceError::DuplicateRun(meta.run_id.clone()),
                _ => TraceError::io(&path, e),
            })?;
        let meta_path = meta_path_for(&path);
        fs::write(&meta_path, serde_json::to_vec_pretty(meta).expect("meta serializes"))
            .map_err(|e| TraceError::io(&meta_path, e))?;
        Ok(TraceWriter { path, file })
    }
}

/// Accumulates events in memory and mirrors them to an optional file.
#[derive(Debug)]
pub struct TraceRecorder {
    meta: TraceMeta,
    events: Vec<TraceEvent>,
    writer: Option<TraceWriter>,
}

impl TraceRecorder {
    pub fn in_memory(meta: TraceMeta) -> Self {
        Self {
            meta,
            events: Vec::new(),
            writer: None,
        }
    }

    pub fn with_writer(meta: TraceMeta, writer: TraceWriter) -> Self {
        Self {
            meta,
            events: Vec::new(),
            writer: Some(writer),
        }
    }

    /// Assigns the next sequence number and persists the event.
    pub fn append(&mut self, payload: EventPayload) -> Result<u64, TraceError> {
        let event = TraceEvent {
            seq: self.events.len() as u64,
            payload,
        };
        if let Some(writer) = &mut self.writer {
            writer.append(&event)?;
        }
        self.events.push(event);
        Ok(self.events.len() as u64 - 1)
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn path(&self) -> Option<&Path> {
        self.writer.as_ref().map(TraceWriter::path)
    }

    pub fn exchange_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.payload, EventPayload::Exchange(_)))
            .count()
    }

    pub fn to_trace(&self) -> RunTrace {
        RunTrace {
            meta: Some(self.meta.clone()),
            events: self.events.clone(),
        }
    }
}

#[derive(Debug)]
pub struct LoadedTrace {
    pub trace: RunTrace,
    /// Recoverable problems, such as a dropped partial tail line.
    pub warnings: Vec<String>,
}

/// Loads every complete line; an unterminated tail is dropped with a
/// warning. A complete line that does not parse, or a sequence gap, is
/// corruption.
pub fn load(path: &Path) -> Result<LoadedTrace, TraceError> {
    let bytes = fs::read(path).map_err(|e| TraceError::io(path, e))?;
    let mut warnings = Vec::new();
    let events = parse_events(&bytes, &mut warnings)?;

    let meta_path = meta_path_for(path);
    let meta = match fs::read(&meta_path) {
        Ok(raw) => Some(serde_json::from_slice(&raw).map_err(|e| TraceError::Corrupt {
            line: 0,
            message: format!("{}: {e}", meta_path.display()),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(TraceError::io(&meta_path, e)),
    };
    Ok(LoadedTrace {
        trace: RunTrace { meta, events },
        warnings,
    })
}

pub fn parse_events(bytes: &[u8], warnings: &mut Vec<String>) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    let mut rest = bytes;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            warnings.push(format!(
                "dropped partial line {line_no} ({} bytes) at end of trace",
                rest.len()
            ));
            break;
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        let event: TraceEvent = serde_json::from_slice(line).map_err(|e| TraceError::Corrupt {
            line: line_no,
            message: e.to_string(),
        })?;
        if event.seq != events.len() as u64 {
            return Err(TraceError::Corrupt {
                line: line_no,
                message: format!("expected seq {}, found {}", events.len(), event.seq),
            });
        }
        events.push(event);
    }
    Ok(events)
}

/// Serves the exchanges of a recorded trace in order, checking that each
/// incoming request has the recorded fingerprint.
pub struct ReplayBackend {
    exchanges: Vec<(Fingerprint, ChatResponse)>,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(trace: &RunTrace) -> Self {
        Self {
            exchanges: trace
                .exchanges()
                .map(|x| (x.fingerprint.clone(), x.response.clone()))
                .collect(),
            cursor: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.len() - *self.cursor.lock().expect("cursor lock")
    }
}

pub fn as_replay_backend(trace: &RunTrace) -> ReplayBackend {
    ReplayBackend::new(trace)
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let index = *cursor;
        let Some((expected, response)) = self.exchanges.get(index) else {
            return Err(BackendError::ReplayExhausted { index });
        };
        let actual = fingerprint(request);
        if &actual != expected {
            return Err(BackendError::ReplayDivergence {
                index,
                expected: expected.clone(),
                actual,
                tag: request.tag.clone(),
            });
        }
        *cursor += 1;
        let mut response = response.clone();
        response.cache_hit = false;
        Ok(response)
    }
}
