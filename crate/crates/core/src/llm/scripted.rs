use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fingerprint, BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Computes a response from the request, or `None` for a miss.
pub type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptItem {
    Content(String),
    Tagged {
        /// Required prefix of the request tag.
        #[serde(default)]
        tag: Option<String>,
        content: String,
    },
}

impl ScriptItem {
    fn content(&self) -> &str {
        match self {
            ScriptItem::Content(c) | ScriptItem::Tagged { content: c, .. } => c,
        }
    }

    fn accepts(&self, tag: &str) -> bool {
        match self {
            ScriptItem::Tagged { tag: Some(t), .. } => tag.starts_with(t.as_str()),
            _ => true,
        }
    }
}

/// Script file contents.
///
/// A JSON array is a response sequence. A JSON object with `by_fingerprint`
/// and/or `sequence` keys uses both modes; any other object is a plain
/// fingerprint → content map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub by_fingerprint: HashMap<String, String>,
    #[serde(default)]
    pub sequence: Vec<ScriptItem>,
}

impl Script {
    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_str(raw)?;
        match value {
            serde_json::Value::Array(_) => Ok(Script {
                by_fingerprint: HashMap::new(),
                sequence: serde_json::from_value(value)?,
            }),
            serde_json::Value::Object(ref map)
                if map.contains_key("by_fingerprint") || map.contains_key("sequence") =>
            {
                serde_json::from_value(value)
            }
            _ => Ok(Script {
                by_fingerprint: serde_json::from_value(value)?,
                sequence: Vec::new(),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))
    }
}

/// Deterministic backend for tests and fixtures.
///
/// Lookup order: fingerprint map, then the next sequence item, then the
/// responder function.
#[derive(Default)]
pub struct ScriptedBackend {
    by_fingerprint: HashMap<String, String>,
    sequence: Vec<ScriptItem>,
    cursor: Mutex<usize>,
    responder: Option<Responder>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            by_fingerprint: script.by_fingerprint,
            sequence: script.sequence,
            ..Self::default()
        }
    }

    pub fn from_sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(Script {
            by_fingerprint: HashMap::new(),
            sequence: responses
                .into_iter()
                .map(|s| ScriptItem::Content(s.into()))
                .collect(),
        })
    }

    pub fn from_fn<F>(responder: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        Self {
            responder: Some(Box::new(responder)),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, request: &ChatRequest, content: impl Into<String>) {
        self.by_fingerprint
            .insert(fingerprint(request).as_str().to_owned(), content.into());
    }

    /// Sequence items not yet served.
    pub fn remaining(&self) -> usize {
        self.sequence.len() - *self.cursor.lock().expect("cursor lock")
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let fp = fingerprint(request);
        if let Some(content) = self.by_fingerprint.get(fp.as_str()) {
            return Ok(ChatResponse::synthetic(request, content.clone()));
        }
        {
            let mut cursor = self.cursor.lock().expect("cursor lock");
            if let Some(item) = self.sequence.get(*cursor) {
                if !item.accepts(&request.tag) {
                    return Err(BackendError::ScriptMiss {
                        fingerprint: fp,
                        tag: format!("{} (script item {} expects another step)", request.tag, *cursor),
                    });
                }
                *cursor += 1;
                return Ok(ChatResponse::synthetic(request, item.content().to_owned()));
            }
        }
        if let Some(content) = self.responder.as_ref().and_then(|f| f(request)) {
            return Ok(ChatResponse::synthetic(request, content));
        }
        Err(BackendError::ScriptMiss {
            fingerprint: fp,
            tag: request.tag.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::user(text)]).with_tag("t")
    }

    #[test]
    fn fingerprint_mode() {
        let mut backend = ScriptedBackend::default();
        backend.insert(&req("q"), "a, b, c");
        let r = backend.complete(&req("q")).unwrap();
        assert_eq!(r.content, "a, b, c");
        assert!(!r.cache_hit);
        assert!(matches!(
            backend.complete(&req("other")),
            Err(BackendError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn sequence_mode_and_exhaustion() {
        let backend = ScriptedBackend::from_sequence(["one", "two"]);
        assert_eq!(backend.complete(&req("x")).unwrap().content, "one");
        assert_eq!(backend.complete(&req("x")).unwrap().content, "two");
        assert_eq!(backend.remaining(), 0);
        assert!(backend.complete(&req("x")).is_err());
    }

    #[test]
    fn script_file_shapes() {
        let seq = Script::from_json(r#"["a", {"tag": "genokr", "content": "b"}]"#).unwrap();
        assert_eq!(seq.sequence.len(), 2);
        let map = Script::from_json(r#"{"abc": "x"}"#).unwrap();
        assert_eq!(map.by_fingerprint["abc"], "x");
        let both = Script::from_json(r#"{"by_fingerprint": {"k": "v"}, "sequence": ["s"]}"#).unwrap();
        assert_eq!(both.sequence, vec![ScriptItem::Content("s".into())]);
    }

    #[test]
    fn tagged_item_rejects_wrong_step() {
        let backend = ScriptedBackend::new(Script::from_json(r#"[{"tag": "workflow", "content": "x"}]"#).unwrap());
        assert!(matches!(backend.complete(&req("q")), Err(BackendError::ScriptMiss { .. })));
    }
}
