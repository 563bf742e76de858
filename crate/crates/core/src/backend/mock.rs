//! Deterministic stand-ins for the relevance and generator models.
//!
//! Every output is a function of `(seed, inputs)` through a SHA-256 based
//! noise source, so runs never depend on wall-clock time or hash-map order.
//!
//! Fixture conventions understood by the mocks:
//! - a context whose raw text contains [`RELEVANCE_MARKER`] is judged
//!   relevant with `p_true >= 0.9`;
//! - the mock generator answers with the first `<<span>>` found in its
//!   contexts, and falls back to the first context title otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::{Generation, GenerationRequest, GeneratorBackend, Judgment, RelevanceBackend};
use crate::data::{normalize_answer, ScoredContext};
use crate::error::BackendError;
use crate::scoring::RelevanceJudgment;

pub const RELEVANCE_MARKER: &str = "##REL##";
pub const UNKNOWN_ANSWER: &str = "unknown";

const STOPWORDS: &[&str] = &[
    "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "how", "in", "is", "it",
    "of", "on", "or", "rel", "that", "to", "was", "were", "what", "when", "where", "which", "who",
    "whom", "why", "with",
];

/// Uniform value in [0, 1) derived from the seed and the given parts.
pub fn seeded_unit(seed: u64, parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update([0x1f]);
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

fn content_tokens(text: &str) -> BTreeSet<String> {
    normalize_answer(text)
        .split(' ')
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

/// Fraction of the question's content tokens that also occur in `text`.
pub fn token_overlap(question: &str, text: &str) -> f64 {
    let q = content_tokens(question);
    if q.is_empty() {
        return 0.0;
    }
    let c = content_tokens(text);
    q.intersection(&c).count() as f64 / q.len() as f64
}

#[derive(Debug, Clone)]
pub struct MockJudge {
    pub seed: u64,
}

impl MockJudge {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn judgment(&self, question: &str, context: &ScoredContext) -> RelevanceJudgment {
        let u = seeded_unit(self.seed, &["judge", question, &context.title, &context.text]);
        let p_true = if context.text.contains(RELEVANCE_MARKER) {
            0.9 + 0.09 * u
        } else {
            0.05 + 0.6 * token_overlap(question, &context.full_text()) + 0.1 * u
        };
        // 2% of the remaining mass goes to non-classification tokens.
        RelevanceJudgment::new(p_true, 0.98 * (1.0 - p_true))
    }
}

impl RelevanceBackend for MockJudge {
    fn identity(&self) -> String {
        format!("mock-judge/seed={}", self.seed)
    }

    fn judge(&self, question: &str, context: &ScoredContext) -> Result<Judgment, BackendError> {
        Ok(self.judgment(question, context).into())
    }
}

/// Returns the text inside the first `<<...>>` span.
pub fn extract_span(text: &str) -> Option<&str> {
    let start = text.find("<<")? + 2;
    let len = text[start..].find(">>")?;
    Some(text[start..start + len].trim())
}

#[derive(Debug)]
pub struct MockGenerator {
    pub seed: u64,
    /// Answers for context-free prompts, keyed by normalized question.
    knowledge: BTreeMap<String, String>,
    report_seq_prob: bool,
    scoring: bool,
    calls: AtomicUsize,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            knowledge: BTreeMap::new(),
            report_seq_prob: true,
            scoring: true,
            calls: AtomicUsize::new(0),
        }
    }

    /// Adds parametric knowledge used when a request carries no context.
    pub fn with_knowledge<I, Q, A>(mut self, entries: I) -> Self
    where
        I: IntoIterator<Item = (Q, A)>,
        Q: AsRef<str>,
        A: Into<String>,
    {
        for (q, a) in entries {
            self.knowledge.insert(normalize_answer(q.as_ref()), a.into());
        }
        self
    }

    /// Simulates a provider that returns no token log-probabilities.
    pub fn without_seq_prob(mut self) -> Self {
        self.report_seq_prob = false;
        self
    }

    pub fn without_scoring(mut self) -> Self {
        self.scoring = false;
        self
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer_for(&self, request: &GenerationRequest) -> (String, f64) {
        if request.contexts.is_empty() {
            let u = seeded_unit(self.seed, &["parametric", &request.question]);
            return match self.knowledge.get(&normalize_answer(&request.question)) {
                Some(a) => (a.clone(), 0.7 + 0.2 * u),
                None => (UNKNOWN_ANSWER.to_string(), 0.05 + 0.1 * u),
            };
        }
        let key: Vec<&str> = request.contexts.iter().map(|c| c.text.as_str()).collect();
        let u = seeded_unit(self.seed, &["generate", &request.question, &key.join("\u{1e}")]);
        match request.contexts.iter().find_map(|c| extract_span(&c.text)) {
            Some(span) => (span.to_string(), 0.6 + 0.3 * u),
            None => (request.contexts[0].title.trim().to_string(), 0.2 + 0.2 * u),
        }
    }
}

impl GeneratorBackend for MockGenerator {
    fn identity(&self) -> String {
        format!("mock-generator/seed={}", self.seed)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Generation, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (text, p) = self.answer_for(request);
        Ok(Generation {
            text,
            seq_prob: self.report_seq_prob.then_some(p),
        })
    }

    fn supports_scoring(&self) -> bool {
        self.scoring
    }

    fn score(&self, request: &GenerationRequest, answer: &str) -> Result<f64, BackendError> {
        if !self.scoring {
            return Err(BackendError::Capability {
                backend: self.identity(),
                capability: "answer scoring".into(),
            });
        }
        let (own, p) = self.answer_for(request);
        if own.trim() == answer.trim() {
            return Ok(p.ln());
        }
        let joined: String = request
            .contexts
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let u = seeded_unit(self.seed, &["score", &request.question, &joined, answer]);
        let needle = normalize_answer(answer);
        if !needle.is_empty() && normalize_answer(&joined).contains(&needle) {
            Ok((0.1 + 0.2 * u).ln())
        } else {
            Ok((1e-4 * (1.0 + u)).ln())
        }
    }
}
