//! A run's connection to the model: backend, optional cache, retry policy,
//! request defaults and the trace every exchange is recorded into.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{
    fingerprint, ChatBackend, ChatMessage, ChatRequest, ChatResponse, ResponseCache, RetryPolicy,
};
use crate::prompt::FormatError;
use crate::trace::{EventPayload, ExchangeRecord, TraceMeta, TraceRecorder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestDefaults {
    pub model: String,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
    /// Proposal, expansion, review and modification steps.
    pub creative_temperature: f64,
    /// Consolidation and scoring steps.
    pub judge_temperature: f64,
}

impl Default for RequestDefaults {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            seed: None,
            max_tokens: None,
            creative_temperature: 0.7,
            judge_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Temperature {
    Creative,
    Judge,
}

pub struct Session {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    policy: RetryPolicy,
    defaults: RequestDefaults,
    recorder: TraceRecorder,
}

impl Session {
    pub fn new(backend: Arc<dyn ChatBackend>, recorder: TraceRecorder) -> Self {
        Self {
            backend,
            cache: None,
            policy: RetryPolicy::default(),
            defaults: RequestDefaults::default(),
            recorder,
        }
    }

    /// In-memory trace with a throwaway meta block; handy for tests.
    pub fn ephemeral(backend: impl ChatBackend + 'static) -> Self {
        Self::new(
            Arc::new(backend),
            TraceRecorder::in_memory(TraceMeta::new(serde_json::Value::Null)),
        )
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_defaults(mut self, defaults: RequestDefaults) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn defaults(&self) -> &RequestDefaults {
        &self.defaults
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn recorder(&self) -> &TraceRecorder {
        &self.recorder
    }

    pub fn into_recorder(self) -> TraceRecorder {
        self.recorder
    }

    pub fn request(
        &self,
        tag: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: Temperature,
    ) -> ChatRequest {
        let temperature = match temperature {
            Temperature::Creative => self.defaults.creative_temperature,
            Temperature::Judge => self.defaults.judge_temperature,
        };
        ChatRequest {
            model: self.defaults.model.clone(),
            messages,
            temperature,
            seed: self.defaults.seed,
            max_tokens: self.defaults.max_tokens,
            tag: tag.into(),
        }
    }

    pub fn record(&mut self, payload: EventPayload) -> Result<()> {
        self.recorder.append(payload)?;
        Ok(())
    }

    pub fn warn(&mut self, message: impl Into<String>) -> Result<()> {
        let message = message.into();
        log::warn!("{message}");
        self.record(EventPayload::Warning { message })
    }

    pub fn record_error(&mut self, message: impl Into<String>) -> Result<()> {
        self.record(EventPayload::Error {
            message: message.into(),
        })
    }

    /// One exchange, served from the cache when allowed. Every exchange,
    /// cached or not, lands in the trace.
    pub fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        let fp = fingerprint(request);
        let cacheable = self.cache.is_some() && ResponseCache::is_cacheable(request);

        let cached = match (&self.cache, cacheable) {
            (Some(cache), true) => cache.get(&fp)?,
            _ => None,
        };
        let response = match cached {
            Some(mut hit) => {
                hit.cache_hit = true;
                hit.latency_ms = 0;
                hit
            }
            None => match self.backend.complete(request) {
                Ok(response) => {
                    if let (Some(cache), true) = (&self.cache, cacheable) {
                        cache.put(&fp, &response)?;
                    }
                    response
                }
                Err(e) => {
                    self.record_error(format!("{}: {e}", request.tag))?;
                    return Err(e.into());
                }
            },
        };
        self.record(EventPayload::Exchange(ExchangeRecord {
            tag: request.tag.clone(),
            fingerprint: fp,
            request: request.clone(),
            response: response.clone(),
        }))?;
        Ok(response)
    }

    /// Completes and parses. On a format error the original request is
    /// re-sent with one extra user message restating the error, up to
    /// `max_format_retries` times.
    pub fn complete_checked<T, F>(&mut self, request: ChatRequest, mut parse: F) -> Result<T>
    where
        F: FnMut(&str) -> Result<T, FormatError>,
    {
        let total = self.policy.max_format_retries + 1;
        let mut attempts = Vec::new();
        let mut current = request.clone();
        let mut last_error = FormatError::new("no attempt made");
        for attempt in 1..=total {
            let response = self.complete(&current)?;
            match parse(&response.content) {
                Ok(value) => return Ok(value),
                Err(e) => {
                    self.warn(format!("{} attempt {attempt}/{total}: {e}", request.tag))?;
                    attempts.push(response.content);
                    current = request.clone();
                    current.messages.push(ChatMessage::user(format_reminder(
                        &e,
                        attempt + 1,
                        total,
                    )));
                    last_error = e;
                }
            }
        }
        let err = Error::FormatExhausted {
            tag: request.tag.clone(),
            attempts,
            last_error,
        };
        self.record_error(err.to_string())?;
        Err(err)
    }
}

fn format_reminder(error: &FormatError, attempt: u32, total: u32) -> String {
    format!(
        "Your previous reply could not be used ({}). Reply again following the required output format exactly, with no extra words. (attempt {attempt} of {total})",
        error.0
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{BackendError, ScriptedBackend};
    use crate::prompt::parse_comma_list;
    use crate::trace::EventPayload;

    fn list_request(session: &Session) -> ChatRequest {
        session.request("test.list", vec![ChatMessage::user("list")], Temperature::Judge)
    }

    #[test]
    fn well_formed_first_reply_is_one_exchange() {
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["a, b"]));
        let req = list_request(&s);
        let list = s.complete_checked(req, parse_comma_list).unwrap();
        assert_eq!(list.items(), ["a", "b"]);
        assert_eq!(s.recorder().exchange_count(), 1);
    }

    #[test]
    fn malformed_then_valid_is_two_exchanges() {
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence([" , ", "x, y"]));
        let req = list_request(&s);
        let list = s.complete_checked(req, parse_comma_list).unwrap();
        assert_eq!(list.items(), ["x", "y"]);
        assert_eq!(s.recorder().exchange_count(), 2);
        let retry = s
            .recorder()
            .to_trace()
            .exchanges()
            .nth(1)
            .unwrap()
            .request
            .clone();
        assert_eq!(retry.messages.len(), 2);
        assert!(retry.messages[1].content.contains("could not be used"));
    }

    #[test]
    fn exhaustion_carries_every_attempt() {
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence([",", " ,", "..,"]));
        let req = list_request(&s);
        match s.complete_checked(req, parse_comma_list) {
            Err(Error::FormatExhausted { attempts, tag, .. }) => {
                assert_eq!(attempts, vec![",", " ,", "..,"]);
                assert_eq!(tag, "test.list");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.recorder().exchange_count(), 3);
        assert!(s
            .recorder()
            .events()
            .iter()
            .any(|e| matches!(e.payload, EventPayload::Error { .. })));
    }

    #[test]
    fn cache_hit_on_second_identical_request() {
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["once"]))
            .with_cache(ResponseCache::in_memory());
        let req = list_request(&s);
        let first = s.complete(&req).unwrap();
        let second = s.complete(&req).unwrap();
        assert!(!first.cache_hit);
        assert!(second.cache_hit);
        assert_eq!(first.content, second.content);
        assert_eq!(s.recorder().exchange_count(), 2);
    }

    #[test]
    fn unseeded_sampling_bypasses_cache() {
        let mut s = Session::ephemeral(ScriptedBackend::from_sequence(["one", "two"]))
            .with_cache(ResponseCache::in_memory());
        let req = s.request("t", vec![ChatMessage::user("q")], Temperature::Creative);
        assert_eq!(s.complete(&req).unwrap().content, "one");
        let again = s.complete(&req).unwrap();
        assert_eq!(again.content, "two");
        assert!(!again.cache_hit);
    }

    #[test]
    fn backend_errors_are_recorded() {
        let mut s = Session::ephemeral(ScriptedBackend::default());
        let req = list_request(&s);
        assert!(matches!(
            s.complete(&req),
            Err(Error::Backend(BackendError::ScriptMiss { .. }))
        ));
        assert_eq!(s.recorder().events().len(), 1);
    }
}
