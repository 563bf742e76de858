use std::path::Path;
use std::sync::Arc;

use super::report::{split_of, Aggregates, ClassifyRecord, ClassifyReport, EvalReport, MixedSummary, QuestionFailure, QuestionReport, RerankReport};
use super::{Backends, GenerationStyle, RerankSource, RunConfig, WeightSource};
use crate::backend::{CacheStats, GenerationRequest, GeneratorBackend, PromptTemplate, ResponseCache};
use crate::data::{load_dataset, write_dataset, QuestionRecord, ScoredContext};
use crate::error::{Error, Result};
use crate::marginalize::{generate_candidates, marginalize, marginalize_thorough, CandidateAnswer, MarginalizedAnswer};
use crate::metrics::{classification_prf, recall_at_k, AnswerScores, DEFAULT_RECALL_KS};
use crate::par::parallel_map;
use crate::policy::{
    answerable_label, decide, set_confidence, threshold_search, ConfidenceSource, DecisionKind, MinMaxScale, PolicyMode,
    SetConfidence, ThresholdSweep, DEFAULT_GRID, UNANSWERABLE_RESPONSE,
};
use crate::scoring::{re_score_with_mode, relevance_distribution, rerank_order, retriever_distribution};

/// A configured run: options, backends and the optional response cache.
#[derive(Debug)]
pub struct Pipeline {
    config: RunConfig,
    backends: Backends,
    cache: Option<Arc<ResponseCache>>,
}

/// A record after judging and reranking, truncated to `top_k_rerank`.
struct Ranked {
    record: QuestionRecord,
    /// RE values aligned with `record.contexts`.
    re: Option<Vec<f64>>,
}

struct EvalRun {
    questions: Vec<QuestionReport>,
    failures: Vec<QuestionFailure>,
    ranked: Vec<QuestionRecord>,
}

fn failure(index: usize, record: &QuestionRecord, e: Error) -> QuestionFailure {
    log::warn!("question {} ({}) failed: {e}", index, record.id);
    QuestionFailure {
        index,
        id: record.id.clone(),
        kind: if matches!(e, Error::Backend(_)) { "backend" } else { "data" }.to_string(),
        message: e.to_string(),
    }
}

fn cache_delta(before: CacheStats, after: CacheStats) -> CacheStats {
    CacheStats {
        hits: after.hits - before.hits,
        misses: after.misses - before.misses,
        writes: after.writes - before.writes,
        quarantined: after.quarantined - before.quarantined,
    }
}

impl Pipeline {
    /// Validates the configuration and, when a cache directory is set, routes
    /// every backend call through the cache.
    pub fn new(config: RunConfig, backends: Backends) -> Result<Self> {
        config.validate()?;
        PromptTemplate::new(&config.generation_template).render("q", Some(&probe_context()))?;
        PromptTemplate::new(&config.parametric_template).render("q", None)?;
        let (backends, cache) = match &config.cache_dir {
            Some(dir) => {
                let cache = Arc::new(ResponseCache::open(dir)?);
                (backends.cached(&cache), Some(cache))
            }
            None => (backends, None),
        };
        if config.needs_relevance() && backends.relevance.is_none() {
            return Err(Error::Config("this configuration needs a relevance backend".into()));
        }
        if config.policy.mode == PolicyMode::ParametricFallback && backends.parametric.is_none() {
            return Err(Error::Config("parametric fallback needs a parametric generator".into()));
        }
        Ok(Self {
            config,
            backends,
            cache,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Loads the configured dataset, keeping `top_k_rerank` contexts.
    pub fn load_dataset(&self) -> Result<Vec<QuestionRecord>> {
        load_dataset(&self.config.dataset, Some(self.config.top_k_rerank))
    }

    fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(|c| c.stats())
    }

    fn cache_since(&self, before: Option<CacheStats>) -> Option<CacheStats> {
        Some(cache_delta(before?, self.cache_stats()?))
    }

    fn generator(&self) -> Result<&dyn GeneratorBackend> {
        self.backends
            .generator
            .as_deref()
            .ok_or_else(|| Error::Config("no generator backend configured".into()))
    }

    fn rank(&self, cfg: &RunConfig, record: &QuestionRecord, need_re: bool) -> Result<Ranked> {
        let mut record = record.clone();
        record.contexts.truncate(cfg.top_k_rerank);
        if record.contexts.is_empty() {
            return Err(Error::Empty("context list"));
        }
        let re = if need_re {
            let judge = self
                .backends
                .relevance
                .as_deref()
                .ok_or_else(|| Error::Config("no relevance backend configured".into()))?;
            let mut out = Vec::with_capacity(record.contexts.len());
            for c in &record.contexts {
                let j = judge.judge(&record.question, c)?;
                out.push(re_score_with_mode(j.judgment, cfg.score_mode)?);
            }
            Some(out)
        } else {
            None
        };
        let order: Vec<usize> = match cfg.rerank_source {
            RerankSource::None => (0..record.contexts.len()).collect(),
            RerankSource::Retriever => {
                let scores: Vec<f64> = record.contexts.iter().map(|c| c.retriever_score).collect();
                rerank_order(&record, &scores)?
            }
            RerankSource::Re => rerank_order(&record, re.as_ref().expect("RE rerank implies judging"))?,
        };
        let re = re.map(|v| order.iter().map(|&i| v[i]).collect());
        record.contexts = order.iter().map(|&i| record.contexts[i].clone()).collect();
        Ok(Ranked { record, re })
    }

    fn confidence(&self, cfg: &RunConfig, ranked: &Ranked, scale: Option<MinMaxScale>) -> Result<Option<SetConfidence>> {
        let k = cfg.top_k_generate.min(ranked.record.contexts.len());
        match cfg.policy.confidence_source {
            ConfidenceSource::Re => ranked
                .re
                .as_ref()
                .map(|re| set_confidence(&re[..k], ConfidenceSource::Re))
                .transpose(),
            ConfidenceSource::Retriever => {
                let scale = scale.ok_or(Error::Empty("retriever scores for min-max scaling"))?;
                let values: Vec<f64> = ranked.record.contexts[..k]
                    .iter()
                    .map(|c| scale.apply(c.retriever_score))
                    .collect();
                set_confidence(&values, ConfidenceSource::Retriever).map(Some)
            }
        }
    }

    fn fit_scale(&self, cfg: &RunConfig, records: &[QuestionRecord]) -> Result<Option<MinMaxScale>> {
        if cfg.policy.confidence_source != ConfidenceSource::Retriever {
            return Ok(None);
        }
        MinMaxScale::fit(
            records
                .iter()
                .flat_map(|r| r.contexts.iter().take(cfg.top_k_rerank).map(|c| c.retriever_score)),
        )
        .map(Some)
    }

    fn weights(&self, cfg: &RunConfig, contexts: &[ScoredContext], re: Option<&[f64]>, idx: &[usize]) -> Result<Vec<f64>> {
        match cfg.weight_source {
            WeightSource::Re => {
                let re = re.ok_or_else(|| Error::Config("RE weights need relevance judgments".into()))?;
                let values: Vec<f64> = idx.iter().map(|&j| re[j]).collect();
                Ok(relevance_distribution(&values, cfg.clamp_eps)?.weights)
            }
            WeightSource::Retriever => {
                let values: Vec<f64> = idx.iter().map(|&j| contexts[j].retriever_score).collect();
                retriever_distribution(&values)
            }
        }
    }

    /// Generates from the contexts and marginalizes. Returns the ranked
    /// answers and the number of contexts whose generation failed.
    fn rag(&self, cfg: &RunConfig, question: &str, contexts: &[ScoredContext], re: Option<&[f64]>) -> Result<(Vec<MarginalizedAnswer>, usize)> {
        let generator = self.generator()?;
        let template = PromptTemplate::new(&cfg.generation_template);
        if cfg.generation_style == GenerationStyle::Concatenated {
            let request = GenerationRequest {
                question: question.to_string(),
                contexts: contexts.to_vec(),
                prompt: template.render_concatenated(question, contexts)?,
            };
            let g = generator.generate(&request)?;
            let candidate = CandidateAnswer {
                text: g.text,
                seq_prob: g.seq_prob.unwrap_or(1.0),
                source_rank: 0,
                seq_prob_available: g.seq_prob.is_some(),
            };
            return Ok((marginalize(&[candidate], &[1.0], cfg.grouping)?, 0));
        }
        let set = generate_candidates(question, contexts, generator, &template, 1)?;
        let answers = if cfg.thorough {
            let all: Vec<usize> = (0..contexts.len()).collect();
            let w = self.weights(cfg, contexts, re, &all)?;
            marginalize_thorough(question, &set.candidates, contexts, &w, generator, &template, cfg.grouping)?
        } else {
            let idx: Vec<usize> = set.candidates.iter().map(|c| c.source_rank).collect();
            let w = self.weights(cfg, contexts, re, &idx)?;
            marginalize(&set.candidates, &w, cfg.grouping)?
        };
        Ok((answers, set.failures.len()))
    }

    fn parametric_answer(&self, cfg: &RunConfig, question: &str) -> Result<String> {
        let backend = self
            .backends
            .parametric
            .as_deref()
            .ok_or_else(|| Error::Config("no parametric generator configured".into()))?;
        let request = GenerationRequest {
            question: question.to_string(),
            contexts: Vec::new(),
            prompt: PromptTemplate::new(&cfg.parametric_template).render(question, None)?,
        };
        Ok(backend.generate(&request)?.text)
    }

    fn eval_one(&self, cfg: &RunConfig, index: usize, record: &QuestionRecord, need_re: bool, scale: Option<MinMaxScale>) -> Result<(QuestionReport, QuestionRecord)> {
        let ranked = self.rank(cfg, record, need_re)?;
        let k = cfg.top_k_generate.min(ranked.record.contexts.len());
        let contexts = &ranked.record.contexts[..k];
        let re = ranked.re.as_ref().map(|v| &v[..k]);
        let answerable = answerable_label(&ranked.record, k);
        let confidence = self.confidence(cfg, &ranked, scale)?;
        let decision = match confidence {
            Some(c) => decide(c, &cfg.policy).kind,
            None if cfg.policy.mode == PolicyMode::None => DecisionKind::Answer,
            None => return Err(Error::Config("policy needs a set confidence".into())),
        };

        let (candidates, generation_failures) = if decision == DecisionKind::ParametricAnswer {
            (Vec::new(), 0)
        } else {
            self.rag(cfg, &record.question, contexts, re)?
        };
        let rag_prediction = candidates.first().map(|a| a.text.clone());
        let fallback_prediction = match decision {
            DecisionKind::ParametricAnswer => Some(self.parametric_answer(cfg, &record.question)?),
            _ => None,
        };
        let golds = &record.gold_answers;
        let rag_scores = rag_prediction.as_deref().map(|p| AnswerScores::compute(p, golds));
        let (prediction, scores) = match decision {
            DecisionKind::Answer => (
                rag_prediction.clone().expect("answer decisions generate"),
                rag_scores.expect("answer decisions generate"),
            ),
            DecisionKind::Unanswerable => (
                UNANSWERABLE_RESPONSE.to_string(),
                if answerable { AnswerScores::WRONG } else { AnswerScores::RIGHT },
            ),
            DecisionKind::ParametricAnswer => {
                let p = fallback_prediction.clone().expect("fallback decisions generate");
                let s = AnswerScores::compute(&p, golds);
                (p, s)
            }
        };

        let report = QuestionReport {
            index,
            id: record.id.clone(),
            question: record.question.clone(),
            gold_answers: golds.clone(),
            context_ids: contexts.iter().map(|c| c.id.clone()).collect(),
            re_scores: re.map(<[f64]>::to_vec),
            answerable,
            confidence,
            decision,
            rag_prediction,
            fallback_prediction,
            prediction,
            scores,
            rag_scores,
            candidates,
            generation_failures,
        };
        Ok((report, ranked.record))
    }

    fn eval_run(&self, cfg: &RunConfig, records: &[QuestionRecord], scale: Option<MinMaxScale>) -> Result<EvalRun> {
        if records.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        self.generator()?;
        let need_re = cfg.needs_relevance()
            || (cfg.sweep && cfg.policy.confidence_source == ConfidenceSource::Re && self.backends.relevance.is_some());
        let results = parallel_map(records.len(), cfg.jobs, |i| self.eval_one(cfg, i, &records[i], need_re, scale));
        let mut run = EvalRun {
            questions: Vec::new(),
            failures: Vec::new(),
            ranked: Vec::new(),
        };
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((q, ranked)) => {
                    run.questions.push(q);
                    run.ranked.push(ranked);
                }
                Err(e) => run.failures.push(failure(i, &records[i], e)),
            }
        }
        if run.questions.is_empty() {
            return Err(Error::AllFailed(records.len()));
        }
        Ok(run)
    }

    fn eval_report(&self, cfg: &RunConfig, records: &[QuestionRecord]) -> Result<EvalReport> {
        let scale = self.fit_scale(cfg, records)?;
        let run = self.eval_run(cfg, records, scale)?;
        let confidences: Option<Vec<f64>> = run.questions.iter().map(|q| q.confidence.map(|c| c.value)).collect();
        let unanswerable: Vec<bool> = run.questions.iter().map(|q| !q.answerable).collect();
        let classification = match &confidences {
            Some(conf) => {
                let predicted: Vec<bool> = conf.iter().map(|&c| c < cfg.policy.threshold).collect();
                Some(classification_prf(&unanswerable, &predicted)?)
            }
            None => None,
        };
        let sweep = match (&confidences, cfg.sweep) {
            (Some(conf), true) => Some(sweep_or_partial(conf, &unanswerable)?),
            _ => None,
        };
        Ok(EvalReport {
            config: cfg.clone(),
            backends: self.backends.identities(),
            n_questions: records.len(),
            aggregates: Aggregates::from_questions(&run.questions),
            split: split_of(&run.questions)?,
            recall: recall_at_k(&run.ranked, &DEFAULT_RECALL_KS)?,
            classification,
            sweep,
            mixed: None,
            cache: None,
            questions: run.questions,
            failures: run.failures,
        })
    }

    /// Reranks every question and writes the reranked dataset, truncated to
    /// `top_k_generate` contexts, to `output`.
    pub fn run_rerank(&self, output: &Path) -> Result<RerankReport> {
        let records = self.load_dataset()?;
        let report = self.rerank_records(&records, output)?;
        Ok(report)
    }

    pub fn rerank_records(&self, records: &[QuestionRecord], output: &Path) -> Result<RerankReport> {
        if records.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let before = self.cache_stats();
        let cfg = &self.config;
        let need_re = cfg.rerank_source == RerankSource::Re;
        let results = parallel_map(records.len(), cfg.jobs, |i| self.rank(cfg, &records[i], need_re));
        let mut originals = Vec::new();
        let mut ranked = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(r) => {
                    let mut orig = records[i].clone();
                    orig.contexts.truncate(cfg.top_k_rerank);
                    originals.push(orig);
                    ranked.push(r.record);
                }
                Err(e) => failures.push(failure(i, &records[i], e)),
            }
        }
        if ranked.is_empty() {
            return Err(Error::AllFailed(records.len()));
        }
        let truncated: Vec<QuestionRecord> = ranked
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.contexts.truncate(cfg.top_k_generate);
                r
            })
            .collect();
        write_dataset(output, &truncated)?;
        Ok(RerankReport {
            config: cfg.clone(),
            backends: self.backends.identities(),
            n_questions: records.len(),
            output: output.to_path_buf(),
            recall_before: recall_at_k(&originals, &DEFAULT_RECALL_KS)?,
            recall: recall_at_k(&ranked, &DEFAULT_RECALL_KS)?,
            failures,
            cache: self.cache_since(before),
        })
    }

    pub fn run_eval(&self) -> Result<EvalReport> {
        let records = self.load_dataset()?;
        self.eval_records(&records)
    }

    /// Runs the configured pipeline on in-memory records.
    pub fn eval_records(&self, records: &[QuestionRecord]) -> Result<EvalReport> {
        let before = self.cache_stats();
        let mut report = self.eval_report(&self.config, records)?;
        report.cache = self.cache_since(before);
        Ok(report)
    }

    /// Answers low-confidence questions from the parametric generator
    /// without contexts. With `compare_baseline`, also runs the plain
    /// pipeline to report EM before the fallback.
    pub fn run_mixed(&self, compare_baseline: bool) -> Result<EvalReport> {
        let records = self.load_dataset()?;
        self.mixed_records(&records, compare_baseline)
    }

    pub fn mixed_records(&self, records: &[QuestionRecord], compare_baseline: bool) -> Result<EvalReport> {
        if self.backends.parametric.is_none() {
            return Err(Error::Config("parametric fallback needs a parametric generator".into()));
        }
        let before = self.cache_stats();
        let mut cfg = self.config.clone();
        cfg.policy.mode = PolicyMode::ParametricFallback;
        if cfg.policy.confidence_source == ConfidenceSource::Re && self.backends.relevance.is_none() {
            return Err(Error::Config("RE confidence needs a relevance backend".into()));
        }
        let mut report = self.eval_report(&cfg, records)?;

        let baseline = if compare_baseline {
            let mut b = self.config.clone();
            b.policy.mode = PolicyMode::None;
            Some(self.eval_report(&b, records)?)
        } else {
            None
        };
        if let Some(b) = &baseline {
            for q in report.questions.iter_mut().filter(|q| q.rag_prediction.is_none()) {
                if let Some(bq) = b.questions.iter().find(|bq| bq.index == q.index) {
                    q.rag_prediction = bq.rag_prediction.clone();
                    q.rag_scores = bq.rag_scores;
                    q.candidates = bq.candidates.clone();
                    q.generation_failures = bq.generation_failures;
                }
            }
            report.split = split_of(&report.questions)?;
        }

        let n = report.questions.len();
        let routed = report
            .questions
            .iter()
            .filter(|q| q.decision == DecisionKind::ParametricAnswer)
            .count();
        let em_after = report.aggregates.overall.em;
        let em_before = baseline.as_ref().map(|b| b.aggregates.overall.em);
        report.mixed = Some(MixedSummary {
            routed,
            routed_fraction: 100.0 * routed as f64 / n as f64,
            em_before,
            em_after,
            em_gain: em_before.map(|b| em_after - b),
        });
        report.cache = self.cache_since(before);
        Ok(report)
    }

    /// Classifies each question's top-k context set as answerable or not.
    /// With `search_on`, the threshold is chosen by grid search on those
    /// records instead of taken from the config. When a generator is
    /// configured, also reports accuracy before and after answering
    /// "unanswerable" for rejected sets.
    pub fn run_classify(&self, search_on: Option<&[QuestionRecord]>) -> Result<ClassifyReport> {
        let records = self.load_dataset()?;
        self.classify_records(&records, search_on)
    }

    pub fn classify_records(&self, records: &[QuestionRecord], search_on: Option<&[QuestionRecord]>) -> Result<ClassifyReport> {
        if records.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let before = self.cache_stats();
        let mut cfg = self.config.clone();
        cfg.policy.mode = PolicyMode::Unanswerable;
        let need_re = cfg.policy.confidence_source == ConfidenceSource::Re;
        if need_re && self.backends.relevance.is_none() {
            return Err(Error::Config("RE confidence needs a relevance backend".into()));
        }
        let scale = self.fit_scale(&cfg, search_on.unwrap_or(records))?;

        let sweep = match search_on {
            Some(dev) => {
                if dev.is_empty() {
                    return Err(Error::Empty("dev set"));
                }
                let dev_cfg = cfg.clone();
                let scored = parallel_map(dev.len(), cfg.jobs, |i| -> Result<(f64, bool)> {
                    let ranked = self.rank(&dev_cfg, &dev[i], need_re || dev_cfg.needs_relevance())?;
                    let k = dev_cfg.top_k_generate.min(ranked.record.contexts.len());
                    let c = self.confidence(&dev_cfg, &ranked, scale)?.expect("confidence source is available");
                    Ok((c.value, !answerable_label(&ranked.record, k)))
                });
                let mut conf = Vec::new();
                let mut labels = Vec::new();
                for (i, r) in scored.into_iter().enumerate() {
                    match r {
                        Ok((c, l)) => {
                            conf.push(c);
                            labels.push(l);
                        }
                        Err(e) => {
                            let f = failure(i, &dev[i], e);
                            log::warn!("dev question {} ({}) skipped: {}", f.index, f.id, f.message);
                        }
                    }
                }
                if conf.is_empty() {
                    return Err(Error::AllFailed(dev.len()));
                }
                let sweep = threshold_search(&conf, &labels, &DEFAULT_GRID)?;
                cfg.policy.threshold = sweep.best_threshold.expect("two-class sweep has a best threshold");
                Some(sweep)
            }
            None => None,
        };

        let (rows, failures, split) = if self.backends.generator.is_some() {
            let run = self.eval_run(&cfg, records, scale)?;
            let rows = run
                .questions
                .iter()
                .map(|q| {
                    let c = q.confidence.expect("unanswerable policy computes confidence");
                    ClassifyRecord {
                        index: q.index,
                        id: q.id.clone(),
                        answerable: q.answerable,
                        confidence: c.value,
                        predicted_unanswerable: q.decision == DecisionKind::Unanswerable,
                    }
                })
                .collect::<Vec<_>>();
            let split = split_of(&run.questions)?;
            (rows, run.failures, split)
        } else {
            let results = parallel_map(records.len(), cfg.jobs, |i| -> Result<ClassifyRecord> {
                let ranked = self.rank(&cfg, &records[i], need_re || cfg.needs_relevance())?;
                let k = cfg.top_k_generate.min(ranked.record.contexts.len());
                let c = self.confidence(&cfg, &ranked, scale)?.expect("confidence source is available");
                Ok(ClassifyRecord {
                    index: i,
                    id: records[i].id.clone(),
                    answerable: answerable_label(&ranked.record, k),
                    confidence: c.value,
                    predicted_unanswerable: c.value < cfg.policy.threshold,
                })
            });
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(row) => rows.push(row),
                    Err(e) => failures.push(failure(i, &records[i], e)),
                }
            }
            if rows.is_empty() {
                return Err(Error::AllFailed(records.len()));
            }
            (rows, failures, None)
        };

        let labels: Vec<bool> = rows.iter().map(|r| !r.answerable).collect();
        let predicted: Vec<bool> = rows.iter().map(|r| r.predicted_unanswerable).collect();
        Ok(ClassifyReport {
            backends: self.backends.identities(),
            n_questions: records.len(),
            threshold: cfg.policy.threshold,
            threshold_searched: sweep.is_some(),
            sweep,
            classification: classification_prf(&labels, &predicted)?,
            answerable_fraction: 100.0 * labels.iter().filter(|u| !**u).count() as f64 / labels.len() as f64,
            split,
            records: rows,
            failures,
            cache: self.cache_since(before),
            config: cfg,
        })
    }
}

/// A sweep for the report; single-class label sets keep the per-threshold
/// rows without a best threshold.
fn sweep_or_partial(confidences: &[f64], unanswerable: &[bool]) -> Result<ThresholdSweep> {
    match threshold_search(confidences, unanswerable, &DEFAULT_GRID) {
        Ok(s) => Ok(s),
        Err(Error::SingleClass { sweep }) => Ok(sweep),
        Err(e) => Err(e),
    }
}

fn probe_context() -> ScoredContext {
    ScoredContext {
        id: "probe".into(),
        title: "t".into(),
        text: "x".into(),
        retriever_score: 0.0,
        rank: 0,
    }
}
