use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{BackendError, ChatRequest, ChatResponse, Fingerprint};

/// Response cache keyed by request fingerprint.
///
/// With a directory, entries are stored as `<dir>/<fp[..2]>/<fp>.json`;
/// otherwise they only live in memory.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<Fingerprint, ChatResponse>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Sampled requests without a seed are never cached.
    pub fn is_cacheable(request: &ChatRequest) -> bool {
        request.temperature == 0.0 || request.seed.is_some()
    }

    fn file_for(&self, fp: &Fingerprint) -> Option<PathBuf> {
        let s = fp.as_str();
        self.dir
            .as_ref()
            .map(|d| d.join(&s[..2.min(s.len())]).join(format!("{s}.json")))
    }

    pub fn get(&self, fp: &Fingerprint) -> Result<Option<ChatResponse>, BackendError> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(fp) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.file_for(fp) else {
            return Ok(None);
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let response: ChatResponse = serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
                self.memory
                    .lock()
                    .expect("cache lock")
                    .insert(fp.clone(), response.clone());
                Ok(Some(response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    pub fn put(&self, fp: &Fingerprint, response: &ChatResponse) -> Result<(), BackendError> {
        let mut stored = response.clone();
        stored.cache_hit = false;
        if let Some(path) = self.file_for(fp) {
            let io = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
            fs::create_dir_all(path.parent().expect("cache file has a parent")).map_err(io)?;
            // Write-then-rename so readers never see a partial entry.
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&stored).expect("response serializes")).map_err(io)?;
            fs::rename(&tmp, &path).map_err(io)?;
        }
        self.memory
            .lock()
            .expect("cache lock")
            .insert(fp.clone(), stored);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{fingerprint, ChatMessage};

    #[test]
    fn disk_cache_survives_new_instance() {
        let dir = tempfile::tempdir().unwrap();
        let request = ChatRequest::new("m", vec![ChatMessage::user("q")]);
        let fp = fingerprint(&request);
        let response = ChatResponse::synthetic(&request, "answer");

        ResponseCache::on_disk(dir.path()).put(&fp, &response).unwrap();
        let fresh = ResponseCache::on_disk(dir.path());
        assert_eq!(fresh.get(&fp).unwrap().unwrap().content, "answer");
    }

    #[test]
    fn unseeded_sampling_is_not_cacheable() {
        let request = ChatRequest::new("m", vec![ChatMessage::user("q")]).with_temperature(0.7);
        assert!(!ResponseCache::is_cacheable(&request));
        assert!(ResponseCache::is_cacheable(&request.clone().with_seed(Some(3))));
        assert!(ResponseCache::is_cacheable(&request.with_temperature(0.0)));
    }
}
