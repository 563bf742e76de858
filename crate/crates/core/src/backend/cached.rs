//! Backend wrapper that memoizes judgments, generations and answer scores in
//! a [`ResponseCache`], so any backend (mock or remote) can be replayed.

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::{Generation, GenerationRequest, GeneratorBackend, Judgment, RelevanceBackend, ResponseCache};
use crate::data::ScoredContext;
use crate::error::BackendError;

#[derive(Debug, Clone)]
pub struct Cached<B> {
    inner: B,
    cache: Arc<ResponseCache>,
}

impl<B> Cached<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn lookup<T, F>(&self, identity: &str, prompt: &str, params: serde_json::Value, compute: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let key = super::cache::cache_key(identity, prompt, &params);
        if let Some(body) = self.cache.get(&key) {
            match serde_json::from_str(&body) {
                Ok(v) => return Ok(v),
                Err(e) => log::warn!("ignoring undecodable cache entry {key}: {e}"),
            }
        }
        let value = compute()?;
        let body = serde_json::to_string(&value).map_err(|e| BackendError::Protocol(e.to_string()))?;
        if let Err(e) = self.cache.put(&key, identity, &body) {
            log::warn!("cache write failed for {key}: {e}");
        }
        Ok(value)
    }
}

fn context_params(ctx: &ScoredContext) -> serde_json::Value {
    json!({ "id": ctx.id, "title": ctx.title, "text": ctx.text })
}

impl<B: RelevanceBackend> RelevanceBackend for Cached<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn judge(&self, question: &str, context: &ScoredContext) -> Result<Judgment, BackendError> {
        let params = json!({ "op": "judge", "context": context_params(context) });
        self.lookup(&self.inner.identity(), question, params, || self.inner.judge(question, context))
    }
}

fn request_params(op: &str, request: &GenerationRequest) -> serde_json::Value {
    json!({
        "op": op,
        "question": request.question,
        "contexts": request.contexts.iter().map(context_params).collect::<Vec<_>>(),
    })
}

impl<B: GeneratorBackend> GeneratorBackend for Cached<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError> {
        let params = request_params("generate", request);
        self.lookup(&self.inner.identity(), &request.prompt, params, || self.inner.generate(request))
    }

    fn supports_scoring(&self) -> bool {
        self.inner.supports_scoring()
    }

    fn score(&self, request: &GenerationRequest, answer: &str) -> Result<f64, BackendError> {
        let mut params = request_params("score", request);
        params["answer"] = json!(answer);
        self.lookup(&self.inner.identity(), &request.prompt, params, || self.inner.score(request, answer))
    }
}
