//! Model access: relevance judges and answer generators behind two traits,
//! with a deterministic mock, an OpenAI-compatible HTTP client and a
//! content-addressed response cache.

pub mod cache;
pub mod cached;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::data::ScoredContext;
use crate::error::BackendError;
use crate::scoring::RelevanceJudgment;

pub use cache::{CacheStats, ResponseCache};
pub use cached::Cached;
pub use mock::{MockGenerator, MockJudge};
pub use prompt::PromptTemplate;

/// Probability floor substituted for a classification token that did not
/// appear among the returned candidates.
pub const MISSING_TOKEN_FLOOR: f64 = 1e-6;

/// Per-judgment diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentFlags {
    pub missing_true: bool,
    pub missing_false: bool,
    /// The matched candidate was only a prefix of "true"/"false", i.e. the
    /// provider tokenizer split the word.
    pub partial_token: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub judgment: RelevanceJudgment,
    pub flags: JudgmentFlags,
}

impl From<RelevanceJudgment> for Judgment {
    fn from(judgment: RelevanceJudgment) -> Self {
        Self {
            judgment,
            flags: JudgmentFlags::default(),
        }
    }
}

/// Produces a (p_true, p_false) pair for a question/context pair.
pub trait RelevanceBackend: Send + Sync {
    /// Stable backend + model identifier; part of every cache key.
    fn identity(&self) -> String;
    fn judge(&self, question: &str, context: &ScoredContext) -> Result<Judgment, BackendError>;
}

/// Inputs for one generation call. `contexts` is empty for context-free
/// (parametric) generation and may hold several passages for concatenated
/// prompting.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub question: String,
    pub contexts: Vec<ScoredContext>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// Sequence probability of `text`, when the provider reports token
    /// log-probabilities.
    pub seq_prob: Option<f64>,
}

pub trait GeneratorBackend: Send + Sync {
    fn identity(&self) -> String;
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError>;

    /// Whether [`GeneratorBackend::score`] is implemented.
    fn supports_scoring(&self) -> bool {
        false
    }

    /// Log-probability of `answer` given the request's prompt.
    fn score(&self, _request: &GenerationRequest, _answer: &str) -> Result<f64, BackendError> {
        Err(BackendError::Capability {
            backend: self.identity(),
            capability: "answer scoring".into(),
        })
    }
}

impl<T: RelevanceBackend + ?Sized> RelevanceBackend for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn judge(&self, question: &str, context: &ScoredContext) -> Result<Judgment, BackendError> {
        (**self).judge(question, context)
    }
}

impl<T: GeneratorBackend + ?Sized> GeneratorBackend for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError> {
        (**self).generate(request)
    }
    fn supports_scoring(&self) -> bool {
        (**self).supports_scoring()
    }
    fn score(&self, request: &GenerationRequest, answer: &str) -> Result<f64, BackendError> {
        (**self).score(request, answer)
    }
}
