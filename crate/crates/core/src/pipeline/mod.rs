//! End-to-end runs: rerank, evaluate, classify context sets and the mixed
//! parametric-fallback strategy, plus report emission.
//!
//! The four rerank/weight ablation configurations are the combinations of
//! [`RerankSource::Retriever`]/[`RerankSource::Re`] with
//! [`WeightSource::Retriever`]/[`WeightSource::Re`].

mod report;
mod run;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::prompt::{DEFAULT_GENERATION_TEMPLATE, DEFAULT_PARAMETRIC_TEMPLATE};
use crate::backend::{Cached, GeneratorBackend, MockGenerator, MockJudge, RelevanceBackend, ResponseCache};
use crate::error::{Error, Result};
use crate::marginalize::Grouping;
use crate::policy::{ConfidenceSource, PolicyConfig, PolicyMode};
use crate::scoring::{ScoreMode, DEFAULT_CLAMP_EPS};

pub use report::{
    check_classify_consistency, check_consistency, emit_classify_report, emit_report, emit_rerank_report,
    metric_rows, render_classify_table, render_csv, render_rerank_table, render_table, Aggregates,
    BackendIdentities, ClassifyRecord, ClassifyReport, EvalReport, MixedSummary, QuestionFailure, QuestionReport,
    RerankReport,
};
pub use run::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankSource {
    Re,
    #[default]
    Retriever,
    /// Keep the input order.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Re,
    #[default]
    Retriever,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationStyle {
    /// One generation per context, marginalized over the set.
    #[default]
    PerContext,
    /// A single generation over all contexts concatenated into one prompt.
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    Table,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Table => "txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Contexts loaded, judged and reranked per question.
    pub top_k_rerank: usize,
    /// Contexts, after reranking, that the generator sees.
    pub top_k_generate: usize,
    pub rerank_source: RerankSource,
    pub weight_source: WeightSource,
    pub grouping: Grouping,
    pub policy: PolicyConfig,
    /// Score every candidate under every context instead of only its own.
    pub thorough: bool,
    pub generation_style: GenerationStyle,
    pub score_mode: ScoreMode,
    pub clamp_eps: f64,
    pub generation_template: String,
    pub parametric_template: String,
    /// Include a threshold sweep over the default grid in eval reports.
    pub sweep: bool,
    pub cache_dir: Option<PathBuf>,
    pub jobs: usize,
    pub seed: u64,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            top_k_rerank: 25,
            top_k_generate: 25,
            rerank_source: RerankSource::default(),
            weight_source: WeightSource::default(),
            grouping: Grouping::default(),
            policy: PolicyConfig::default(),
            thorough: false,
            generation_style: GenerationStyle::default(),
            score_mode: ScoreMode::default(),
            clamp_eps: DEFAULT_CLAMP_EPS,
            generation_template: DEFAULT_GENERATION_TEMPLATE.to_string(),
            parametric_template: DEFAULT_PARAMETRIC_TEMPLATE.to_string(),
            sweep: false,
            cache_dir: None,
            jobs: 8,
            seed: 0,
            format: ReportFormat::default(),
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

impl RunConfig {
    /// Sets one option by its config-file key. Dashes and underscores are
    /// interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "input" | "dataset" => self.dataset = PathBuf::from(value),
            "top_k" | "top_k_generate" => self.top_k_generate = parse_num(&key, value)?,
            "top_k_rerank" => self.top_k_rerank = parse_num(&key, value)?,
            "rerank_source" => self.rerank_source = parse_enum(&key, value)?,
            "weight_source" => self.weight_source = parse_enum(&key, value)?,
            "grouping" => self.grouping = parse_enum(&key, value)?,
            "threshold" => self.policy.threshold = parse_num(&key, value)?,
            "policy" | "policy_mode" => self.policy.mode = parse_enum(&key, value)?,
            "confidence_source" => self.policy.confidence_source = parse_enum(&key, value)?,
            "thorough" => self.thorough = parse_bool(&key, value)?,
            "generation_style" => self.generation_style = parse_enum(&key, value)?,
            "score_mode" => self.score_mode = parse_enum(&key, value)?,
            "clamp_eps" => self.clamp_eps = parse_num(&key, value)?,
            "generation_template" => self.generation_template = value.to_string(),
            "parametric_template" => self.parametric_template = value.to_string(),
            "sweep" => self.sweep = parse_bool(&key, value)?,
            "cache_dir" => {
                self.cache_dir = (!value.is_empty() && value != "none").then(|| PathBuf::from(value));
            }
            "jobs" => self.jobs = parse_num(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "format" => self.format = parse_enum(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text file. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Whether relevance judgments are needed for this run.
    pub fn needs_relevance(&self) -> bool {
        self.rerank_source == RerankSource::Re
            || self.weight_source == WeightSource::Re
            || (self.policy.mode != PolicyMode::None && self.policy.confidence_source == ConfidenceSource::Re)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.top_k_rerank == 0 || self.top_k_generate == 0 {
            return Err(Error::Config("top-k values must be at least 1".into()));
        }
        if self.top_k_generate > self.top_k_rerank {
            return Err(Error::Config(format!(
                "top_k_generate ({}) exceeds top_k_rerank ({})",
                self.top_k_generate, self.top_k_rerank
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps {} outside (0, 0.5)", self.clamp_eps)));
        }
        if self.thorough && self.generation_style == GenerationStyle::Concatenated {
            return Err(Error::Config("thorough decoding needs per-context generation".into()));
        }
        Ok(())
    }
}

/// The models a run talks to.
#[derive(Clone, Default)]
pub struct Backends {
    pub relevance: Option<Arc<dyn RelevanceBackend>>,
    pub generator: Option<Arc<dyn GeneratorBackend>>,
    /// Answers context-free prompts for the parametric fallback.
    pub parametric: Option<Arc<dyn GeneratorBackend>>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("relevance", &self.relevance.as_ref().map(|b| b.identity()))
            .field("generator", &self.generator.as_ref().map(|b| b.identity()))
            .field("parametric", &self.parametric.as_ref().map(|b| b.identity()))
            .finish()
    }
}

impl Backends {
    /// Mock judge and generator; the same generator doubles as the
    /// parametric model.
    pub fn mock(seed: u64) -> Self {
        let generator: Arc<dyn GeneratorBackend> = Arc::new(MockGenerator::new(seed));
        Self {
            relevance: Some(Arc::new(MockJudge::new(seed))),
            generator: Some(generator.clone()),
            parametric: Some(generator),
        }
    }

    /// Routes every call through `cache`.
    pub fn cached(self, cache: &Arc<ResponseCache>) -> Self {
        fn gen(b: Arc<dyn GeneratorBackend>, cache: &Arc<ResponseCache>) -> Arc<dyn GeneratorBackend> {
            Arc::new(Cached::new(b, cache.clone()))
        }
        Self {
            relevance: self
                .relevance
                .map(|b| Arc::new(Cached::new(b, cache.clone())) as Arc<dyn RelevanceBackend>),
            generator: self.generator.map(|b| gen(b, cache)),
            parametric: self.parametric.map(|b| gen(b, cache)),
        }
    }

    pub fn identities(&self) -> BackendIdentities {
        BackendIdentities {
            relevance: self.relevance.as_ref().map(|b| b.identity()),
            generator: self.generator.as_ref().map(|b| b.identity()),
            parametric: self.parametric.as_ref().map(|b| b.identity()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse() {
        let mut c = RunConfig::default();
        c.apply_overrides(
            "# ablation\n\
             rerank-source = re\nweight_source=re\ntop_k = 3\nthreshold = 0.6\n\
             policy = parametric-fallback\nconfidence_source = retriever\ncache_dir = none\n",
        )
        .unwrap();
        assert_eq!(c.rerank_source, RerankSource::Re);
        assert_eq!(c.weight_source, WeightSource::Re);
        assert_eq!(c.top_k_generate, 3);
        assert_eq!(c.policy.threshold, 0.6);
        assert_eq!(c.policy.mode, PolicyMode::ParametricFallback);
        assert_eq!(c.policy.confidence_source, ConfidenceSource::Retriever);
        assert!(c.cache_dir.is_none());
        assert!(c.apply_overrides("bogus = 1").is_err());
        assert!(c.apply_overrides("grouping = fuzzy").is_err());
        assert!(c.apply_overrides("no equals sign").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.top_k_generate = 30;
        assert!(c.validate().is_err());
        c.top_k_generate = 5;
        c.policy.threshold = 1.5;
        assert!(c.validate().is_err());
    }
}
