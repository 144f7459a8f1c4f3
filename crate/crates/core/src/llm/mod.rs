//! LLM backends: OpenAI-compatible HTTP, scripted (deterministic), and
//! record/replay, behind one blocking trait.

mod http;
mod json;
mod replay;
mod scripted;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::digest_hex;

pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use json::{extract_json, JsonShape};
pub use replay::{CacheRecord, RecordingBackend, ReplayBackend};
pub use scripted::{ScriptContext, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused the request with status {status}: {body}")]
    BackendRefused { status: u16, body: String },
    #[error("scripted backend has no rule for tag `{0}`")]
    ScriptMiss(String),
    #[error("replay cache has no record for tag `{tag}` index {index}")]
    ReplayMiss { tag: String, index: u64 },
    #[error("malformed model output: {0}")]
    MalformedOutput(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache i/o: {0}")]
    Io(String),
}

/// An error from one request of a [`complete_many`] batch.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("request {index} failed: {source}")]
pub struct IndexedError {
    pub index: usize,
    pub source: LlmError,
}

fn default_temperature() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: Option<String>,
    pub user_text: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Phase label used for routing and replay.
    pub call_tag: String,
    pub call_index: u64,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, index: u64, user_text: impl Into<String>) -> Result<Self, LlmError> {
        let user_text = user_text.into();
        if user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user_text is empty".into()));
        }
        Ok(Self {
            system_text: None,
            user_text,
            temperature: default_temperature(),
            max_tokens: None,
            call_tag: tag.into(),
            call_index: index,
        })
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, m: Option<u32>) -> Self {
        self.max_tokens = m;
        self
    }

    pub fn with_system(mut self, s: impl Into<String>) -> Self {
        self.system_text = Some(s.into());
        self
    }

    /// Same request with a different call index (used for re-asks).
    pub fn reindexed(&self, index: u64) -> Self {
        Self {
            call_index: index,
            ..self.clone()
        }
    }

    /// Digest of the request content (texts and sampling settings, not the tag).
    pub fn digest(&self) -> String {
        let v = serde_json::json!({
            "system": self.system_text,
            "user": self.user_text,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        digest_hex(v.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    fn backend_id(&self) -> String;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
}

/// Runs requests with at most `max_in_flight` concurrent calls. Responses are
/// index-aligned; on failure the lowest failing index is reported.
pub fn complete_many<B: LlmBackend + ?Sized>(
    backend: &B,
    requests: &[ChatRequest],
    max_in_flight: usize,
) -> Result<Vec<ChatResponse>, IndexedError> {
    assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
    let workers = max_in_flight.min(requests.len());
    let results: Vec<Result<ChatResponse, LlmError>> = if workers <= 1 {
        requests.iter().map(|r| backend.complete(r)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<ChatResponse, LlmError>>> = vec![None; requests.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= requests.len() {
                                break;
                            }
                            done.push((i, backend.complete(&requests[i])));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("llm worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    let mut out = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(resp) => out.push(resp),
            Err(source) => return Err(IndexedError { index, source }),
        }
    }
    Ok(out)
}

/// Where a call sits in a run; determines its replay index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallSite {
    pub tag: &'static str,
    pub round: usize,
    pub slot: usize,
    pub step: usize,
}

impl CallSite {
    pub fn new(tag: &'static str, round: usize, slot: usize, step: usize) -> Self {
        Self { tag, round, slot, step }
    }

    /// Packs `(round, slot, step, attempt)` into one index. Slots stay below
    /// 100, steps below 1000 and attempts below 10.
    pub fn index(&self, attempt: u32) -> u64 {
        debug_assert!(self.slot < 100 && self.step < 1000 && attempt < 10);
        (((self.round as u64 * 100 + self.slot as u64) * 1000 + self.step as u64) * 10) + attempt as u64
    }

    pub fn request(&self, user_text: String, temperature: f64, max_tokens: Option<u32>) -> Result<ChatRequest, LlmError> {
        Ok(ChatRequest::new(self.tag, self.index(0), user_text)?
            .with_temperature(temperature)
            .with_max_tokens(max_tokens))
    }
}

/// Outcome of parsing one response inside [`ask`].
pub enum Parsed<T, E> {
    Done(T),
    /// Re-issue the request (same text, next attempt index).
    Retry(E),
    Fail(E),
}

/// Issues `request` and parses the response, re-issuing on `Retry` up to
/// `max_attempts` calls in total. The last retryable error is returned when
/// attempts run out; backend errors are returned immediately.
pub fn ask<T, E, F>(backend: &dyn LlmBackend, request: &ChatRequest, site: &CallSite, max_attempts: u32, mut parse: F) -> Result<T, E>
where
    E: From<LlmError>,
    F: FnMut(&str, u32) -> Parsed<T, E>,
{
    let mut last = None;
    for attempt in 0..max_attempts.max(1) {
        let req = request.reindexed(site.index(attempt));
        let resp = backend.complete(&req).map_err(E::from)?;
        match parse(&resp.text, attempt) {
            Parsed::Done(v) => return Ok(v),
            Parsed::Fail(e) => return Err(e),
            Parsed::Retry(e) => {
                log::debug!("{} attempt {attempt} rejected, re-asking", site.tag);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt ran"))
}

/// Cleans a free-text completion: strips one surrounding code fence and
/// outer whitespace. Returns `None` for empty output.
pub fn clean_text_output(text: &str) -> Option<String> {
    let mut t = text.trim();
    if t.starts_with("```") {
        if let Some(nl) = t.find('\n') {
            t = &t[nl + 1..];
        }
        t = t.trim_end().strip_suffix("```").unwrap_or(t);
    }
    let t = t.trim();
    (!t.is_empty()).then(|| t.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted() -> ScriptedBackend {
        ScriptedBackend::new(7)
            .with_rule("echo", |ctx| Ok(format!("{}#{}", ctx.request.user_text, ctx.request.call_index)))
            .with_rule("fail_on_one", |ctx| {
                if ctx.request.call_index == 1 {
                    Err(LlmError::MalformedOutput("boom".into()))
                } else {
                    Ok("ok".into())
                }
            })
    }

    #[test]
    fn call_index_packs_fields() {
        let site = CallSite::new("extract_features", 3, 5, 2);
        assert_eq!(site.index(1), 3_050_021);
        assert_ne!(site.index(0), CallSite::new("x", 3, 5, 3).index(0));
    }

    #[test]
    fn clean_text_strips_fences() {
        assert_eq!(clean_text_output("```text\nYou are helpful.\n```").unwrap(), "You are helpful.");
        assert_eq!(clean_text_output("  plain  ").unwrap(), "plain");
        assert!(clean_text_output(" \n ").is_none());
    }

    #[test]
    fn ask_retries_then_gives_up() {
        let b = ScriptedBackend::new(0).with_rule("t", |ctx| Ok(format!("{}", ctx.request.call_index % 10)));
        let site = CallSite::new("t", 1, 0, 0);
        let req = site.request("x".into(), 0.7, None).unwrap();
        let got: Result<u32, LlmError> = ask(&b, &req, &site, 3, |text, _| {
            let a: u32 = text.parse().unwrap();
            if a == 2 { Parsed::Done(a) } else { Parsed::Retry(LlmError::MalformedOutput(text.into())) }
        });
        assert_eq!(got.unwrap(), 2);
        let failed: Result<u32, LlmError> = ask(&b, &req, &site, 2, |text, _| Parsed::Retry(LlmError::MalformedOutput(text.into())));
        assert_eq!(failed.unwrap_err(), LlmError::MalformedOutput("1".into()));
    }

    #[test]
    fn request_rejects_empty_user_text() {
        assert!(ChatRequest::new("t", 0, "   ").is_err());
    }

    #[test]
    fn complete_many_is_aligned() {
        let b = scripted();
        let reqs: Vec<_> = (0..5).map(|i| ChatRequest::new("echo", i, format!("r{i}")).unwrap()).collect();
        let out = complete_many(&b, &reqs, 5).unwrap();
        let texts: Vec<_> = out.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, vec!["r0#0", "r1#1", "r2#2", "r3#3", "r4#4"]);
    }

    #[test]
    fn complete_many_reports_failing_index() {
        let b = scripted();
        let reqs: Vec<_> = (0..3).map(|i| ChatRequest::new("fail_on_one", i, "x").unwrap()).collect();
        let err = complete_many(&b, &reqs, 3).unwrap_err();
        assert_eq!(err.index, 1);
    }

    #[test]
    fn complete_many_independent_of_concurrency() {
        let b = ScriptedBackend::new(3).with_rule("rand", |ctx| {
            use rand::Rng;
            Ok(format!("{}", ctx.rng.random::<u32>()))
        });
        let reqs: Vec<_> = (0..12).map(|i| ChatRequest::new("rand", i, "x").unwrap()).collect();
        let a = complete_many(&b, &reqs, 1).unwrap();
        let c = complete_many(&b, &reqs, 8).unwrap();
        assert_eq!(
            a.iter().map(|r| &r.text).collect::<Vec<_>>(),
            c.iter().map(|r| &r.text).collect::<Vec<_>>()
        );
    }
}
