//! Client for OpenAI-compatible chat/completions endpoints.
//!
//! Relevance is probed through the top log-probabilities of the first
//! generated token of an instructed one-word "true"/"false" reply. Raw
//! response bodies are cached, so replaying a run offline reproduces it
//! byte for byte.

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::cache::{cache_key, ResponseCache};
use super::prompt::{PromptTemplate, DEFAULT_RELEVANCE_TEMPLATE};
use super::{
    Generation, GenerationRequest, GeneratorBackend, Judgment, JudgmentFlags, RelevanceBackend,
    MISSING_TOKEN_FLOOR,
};
use crate::data::ScoredContext;
use crate::error::BackendError;
use crate::scoring::RelevanceJudgment;

pub const API_KEY_ENV: &str = "RERAG_API_KEY";
pub const API_BASE_ENV: &str = "RERAG_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub relevance_template: PromptTemplate,
    /// Whether the endpoint implements legacy `/completions` with
    /// `echo` + `logprobs`, needed to score arbitrary answers.
    pub supports_scoring: bool,
}

impl HttpConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            base_url: DEFAULT_API_BASE.into(),
            api_key: None,
            model: model.into(),
            temperature: 0.0,
            max_tokens: 32,
            top_logprobs: 5,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            relevance_template: PromptTemplate::new(DEFAULT_RELEVANCE_TEMPLATE),
            supports_scoring: false,
        }
    }

    /// Reads the API key and base URL from the environment.
    pub fn from_env(model: impl Into<String>) -> Self {
        let mut cfg = Self::new(model);
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            cfg.base_url = base;
        }
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        cfg
    }

    fn identity(&self) -> String {
        format!("openai-compatible:{}|{}", self.base_url.trim_end_matches('/'), self.model)
    }
}

/// Shared transport: retries, backoff and caching of raw bodies.
#[derive(Debug, Clone)]
pub struct HttpClient {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    cache: Option<Arc<ResponseCache>>,
}

impl HttpClient {
    pub fn new(cfg: HttpConfig, cache: Option<Arc<ResponseCache>>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { cfg, client, cache })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// POSTs `body` to `path`, consulting the cache first. `prompt` and the
    /// remaining request fields make up the cache key.
    fn post(&self, path: &str, prompt: &str, body: &Value) -> Result<String, BackendError> {
        let identity = self.cfg.identity();
        let key = cache_key(&identity, prompt, &json!({ "path": path, "body": body }));
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let text = self.post_uncached(path, body)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&key, &identity, &text) {
                log::warn!("cache write failed: {e}");
            }
        }
        Ok(text)
    }

    fn post_uncached(&self, path: &str, body: &Value) -> Result<String, BackendError> {
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let base = self.cfg.backoff_base.as_secs_f64() * 2f64.powi(attempt as i32 - 1);
                let jitter = rand::rng().random_range(0.5..1.5);
                std::thread::sleep(Duration::from_secs_f64(base * jitter));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.cfg.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Protocol(e.to_string()))?;
                    if status.is_success() {
                        return Ok(text);
                    }
                    last = format!("HTTP {status}: {}", truncate(&text, 200));
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(BackendError::Protocol(last));
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("attempt {} of {attempts} to {url} failed: {last}", attempt + 1);
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn parse_json(body: &str) -> Result<Value, BackendError> {
    serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("invalid JSON: {e}")))
}

/// Reads `(p_true, p_false)` from the first position's top candidates.
///
/// Matching is case-insensitive on the trimmed token; probabilities of
/// several spellings ("true", " True") are summed. A candidate that is only a
/// prefix of the word counts, but sets `partial_token`.
pub fn judgment_from_top_logprobs(candidates: &[(String, f64)]) -> Judgment {
    let mut flags = JudgmentFlags::default();
    let mut p_true = 0.0;
    let mut p_false = 0.0;
    let mut seen_true = false;
    let mut seen_false = false;
    for (token, logprob) in candidates {
        let t = token.trim().to_lowercase();
        if t.is_empty() {
            continue;
        }
        let p = logprob.exp();
        if t == "true" {
            p_true += p;
            seen_true = true;
        } else if t == "false" {
            p_false += p;
            seen_false = true;
        } else if "true".starts_with(&t) {
            p_true += p;
            seen_true = true;
            flags.partial_token = true;
        } else if "false".starts_with(&t) {
            p_false += p;
            seen_false = true;
            flags.partial_token = true;
        }
    }
    if !seen_true {
        p_true = MISSING_TOKEN_FLOOR;
        flags.missing_true = true;
    }
    if !seen_false {
        p_false = MISSING_TOKEN_FLOOR;
        flags.missing_false = true;
    }
    Judgment {
        judgment: RelevanceJudgment::new(p_true.clamp(0.0, 1.0), p_false.clamp(0.0, 1.0)),
        flags,
    }
}

/// Extracts the first position's `top_logprobs` from a chat-completions body.
pub fn parse_first_token_candidates(body: &str) -> Result<Vec<(String, f64)>, BackendError> {
    let v = parse_json(body)?;
    let first = v
        .pointer("/choices/0/logprobs/content/0")
        .ok_or_else(|| BackendError::Capability {
            backend: "chat-completions endpoint".into(),
            capability: "token log-probabilities".into(),
        })?;
    let top = first
        .get("top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing top_logprobs".into()))?;
    top.iter()
        .map(|c| {
            let token = c.get("token").and_then(Value::as_str);
            let lp = c.get("logprob").and_then(Value::as_f64);
            match (token, lp) {
                (Some(t), Some(lp)) => Ok((t.to_string(), lp)),
                _ => Err(BackendError::Protocol("malformed top_logprobs entry".into())),
            }
        })
        .collect()
}

/// Answer text and `exp(sum of token log-probabilities)` when present.
pub fn parse_generation(body: &str) -> Result<Generation, BackendError> {
    let v = parse_json(body)?;
    let text = match v.pointer("/choices/0/message/content") {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Null) => String::new(),
        _ => return Err(BackendError::Protocol("missing choices[0].message.content".into())),
    };
    let seq_prob = v
        .pointer("/choices/0/logprobs/content")
        .and_then(Value::as_array)
        .and_then(|toks| {
            toks.iter()
                .map(|t| t.get("logprob").and_then(Value::as_f64))
                .sum::<Option<f64>>()
        })
        .map(f64::exp);
    Ok(Generation { text, seq_prob })
}

/// Sums the echoed log-probabilities of tokens starting at or after
/// `answer_offset` in a legacy completions body.
pub fn parse_echo_logprob(body: &str, answer_offset: usize) -> Result<f64, BackendError> {
    let v = parse_json(body)?;
    let lps = v
        .pointer("/choices/0/logprobs/token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing token_logprobs".into()))?;
    let offs = v
        .pointer("/choices/0/logprobs/text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Protocol("missing text_offset".into()))?;
    let mut total = 0.0;
    for (lp, off) in lps.iter().zip(offs) {
        let off = off.as_u64().unwrap_or(0) as usize;
        if off >= answer_offset {
            total += lp
                .as_f64()
                .ok_or_else(|| BackendError::Protocol("null logprob inside answer span".into()))?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct HttpJudge {
    client: HttpClient,
}

impl HttpJudge {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl RelevanceBackend for HttpJudge {
    fn identity(&self) -> String {
        format!("judge/{}", self.client.cfg.identity())
    }

    fn judge(&self, question: &str, context: &ScoredContext) -> Result<Judgment, BackendError> {
        let cfg = &self.client.cfg;
        let prompt = cfg.relevance_template.render(question, Some(context))?;
        let body = json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": cfg.top_logprobs,
        });
        let raw = self.client.post("chat/completions", &prompt, &body)?;
        Ok(judgment_from_top_logprobs(&parse_first_token_candidates(&raw)?))
    }
}

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: HttpClient,
}

impl HttpGenerator {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl GeneratorBackend for HttpGenerator {
    fn identity(&self) -> String {
        format!("generator/{}", self.client.cfg.identity())
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError> {
        let cfg = &self.client.cfg;
        let body = json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "logprobs": true,
        });
        let raw = self.client.post("chat/completions", &request.prompt, &body)?;
        parse_generation(&raw)
    }

    fn supports_scoring(&self) -> bool {
        self.client.cfg.supports_scoring
    }

    fn score(&self, request: &GenerationRequest, answer: &str) -> Result<f64, BackendError> {
        if !self.supports_scoring() {
            return Err(BackendError::Capability {
                backend: self.identity(),
                capability: "answer scoring (completions echo)".into(),
            });
        }
        let cfg = &self.client.cfg;
        let prefix = format!("{} ", request.prompt);
        let full = format!("{prefix}{answer}");
        let body = json!({
            "model": cfg.model,
            "prompt": full,
            "echo": true,
            "max_tokens": 0,
            "logprobs": 0,
            "temperature": cfg.temperature,
        });
        let raw = self.client.post("completions", &full, &body)?;
        parse_echo_logprob(&raw, prefix.len())
    }
}
