use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, LlmBackend, LlmError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub tag: String,
    pub index: u64,
    pub request_digest: String,
    pub response_text: String,
}

fn io_err(e: std::io::Error) -> LlmError {
    LlmError::Io(e.to_string())
}

/// Wraps a backend and appends every successful call to a JSONL cache.
pub struct RecordingBackend<B> {
    inner: B,
    file: Mutex<File>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        Ok(Self {
            inner,
            file: Mutex::new(file),
        })
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let resp = self.inner.complete(request)?;
        let record = CacheRecord {
            tag: request.call_tag.clone(),
            index: request.call_index,
            request_digest: request.digest(),
            response_text: resp.text.clone(),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut f = self.file.lock().expect("cache lock poisoned");
        f.write_all(line.as_bytes()).map_err(io_err)?;
        f.flush().map_err(io_err)?;
        Ok(resp)
    }

    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
}

/// Answers from a recorded cache; the first record for a key wins.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    records: HashMap<(String, u64, String), String>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let f = File::open(path).map_err(io_err)?;
        let mut records = HashMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CacheRecord = serde_json::from_str(&line)
                .map_err(|e| LlmError::Io(format!("cache line {}: {e}", n + 1)))?;
            records
                .entry((r.tag, r.index, r.request_digest))
                .or_insert(r.response_text);
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = (request.call_tag.clone(), request.call_index, request.digest());
        let text = self.records.get(&key).ok_or_else(|| LlmError::ReplayMiss {
            tag: request.call_tag.clone(),
            index: request.call_index,
        })?;
        Ok(ChatResponse {
            text: text.clone(),
            backend_id: self.backend_id(),
            latency_ms: 0,
            attempts: 1,
        })
    }

    fn backend_id(&self) -> String {
        "replay".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;

    #[test]
    fn replay_returns_recorded_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let inner = ScriptedBackend::new(1).with_rule("t", |_| Ok("résumé \"quoted\"\n{json}".into()));
        let rec = RecordingBackend::new(inner, &path).unwrap();
        let req = ChatRequest::new("t", 4, "hello").unwrap();
        let original = rec.complete(&req).unwrap().text;
        drop(rec);
        let replay = ReplayBackend::open(&path).unwrap();
        assert_eq!(replay.complete(&req).unwrap().text, original);
        assert!(matches!(
            replay.complete(&req.reindexed(5)),
            Err(LlmError::ReplayMiss { .. })
        ));
    }
}
