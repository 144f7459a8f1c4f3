use std::collections::HashMap;
use std::sync::Arc;

use super::{ChatRequest, ChatResponse, LlmBackend, LlmError};
use crate::streams::{derive_stream_with, StreamRng};

/// Inputs handed to a scripted rule. `rng` is derived from
/// `(seed, tag, index, request digest)`, so a rule that only reads these is a
/// pure function of them.
pub struct ScriptContext<'a> {
    pub request: &'a ChatRequest,
    pub seed: u64,
    pub rng: StreamRng,
}

type Rule = Arc<dyn Fn(&mut ScriptContext<'_>) -> Result<String, LlmError> + Send + Sync>;

/// Deterministic backend answering from per-tag rules.
#[derive(Clone)]
pub struct ScriptedBackend {
    seed: u64,
    rules: HashMap<String, Rule>,
    fallback: Option<Rule>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut tags: Vec<_> = self.rules.keys().collect();
        tags.sort();
        f.debug_struct("ScriptedBackend").field("seed", &self.seed).field("tags", &tags).finish()
    }
}

impl ScriptedBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rules: HashMap::new(),
            fallback: None,
        }
    }

    pub fn with_rule<F>(mut self, tag: &str, rule: F) -> Self
    where
        F: Fn(&mut ScriptContext<'_>) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        self.rules.insert(tag.to_string(), Arc::new(rule));
        self
    }

    /// Rule used for tags without a dedicated rule.
    pub fn with_fallback<F>(mut self, rule: F) -> Self
    where
        F: Fn(&mut ScriptContext<'_>) -> Result<String, LlmError> + Send + Sync + 'static,
    {
        self.fallback = Some(Arc::new(rule));
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let rule = self
            .rules
            .get(&request.call_tag)
            .or(self.fallback.as_ref())
            .ok_or_else(|| LlmError::ScriptMiss(request.call_tag.clone()))?;
        let mut ctx = ScriptContext {
            request,
            seed: self.seed,
            rng: derive_stream_with(
                self.seed,
                &request.call_tag,
                0,
                request.call_index,
                request.digest().as_bytes(),
            ),
        };
        let text = rule(&mut ctx)?;
        Ok(ChatResponse {
            text,
            backend_id: self.backend_id(),
            latency_ms: 0,
            attempts: 1,
        })
    }

    fn backend_id(&self) -> String {
        format!("scripted:{}", self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_text() {
        let b = ScriptedBackend::new(7).with_rule("define_features", |ctx| Ok(format!("{}", ctx.rng.random::<u64>())));
        let r = ChatRequest::new("define_features", 0, "prompt").unwrap();
        let a = b.complete(&r).unwrap().text;
        for _ in 0..3 {
            assert_eq!(b.complete(&r).unwrap().text, a);
        }
        let other = b.complete(&r.reindexed(1)).unwrap().text;
        assert_ne!(a, other);
    }

    #[test]
    fn unknown_tag_is_a_miss() {
        let b = ScriptedBackend::new(1);
        let r = ChatRequest::new("nope", 0, "x").unwrap();
        assert_eq!(b.complete(&r), Err(LlmError::ScriptMiss("nope".into())));
    }
}
