use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rerag_core::backend::{GeneratorBackend, Judgment, MockGenerator, MockJudge, RelevanceBackend};
use rerag_core::data::{contains_gold, load_dataset, parse_dataset, ScoredContext, QuestionRecord};
use rerag_core::pipeline::*;
use rerag_core::policy::{ConfidenceSource, DecisionKind, PolicyMode};
use rerag_core::scoring::RelevanceJudgment;
use rerag_core::{BackendError, Error};

const SEED: u64 = 7;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/nq_mock_20.json")
}

fn knowledge() -> Vec<(String, String)> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/nq_mock_20_knowledge.json");
    let map: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    map.into_iter().collect()
}

fn config(rerank: RerankSource, weight: WeightSource) -> RunConfig {
    RunConfig {
        dataset: fixture(),
        top_k_generate: 3,
        rerank_source: rerank,
        weight_source: weight,
        seed: SEED,
        ..Default::default()
    }
}

fn eval(cfg: RunConfig) -> EvalReport {
    Pipeline::new(cfg, Backends::mock(SEED)).unwrap().run_eval().unwrap()
}

#[test]
fn ablation_ordering_on_fixture() {
    use RerankSource as R;
    use WeightSource as W;
    let em = |r, w| eval(config(r, w)).aggregates.overall.em;
    let baseline = em(R::Retriever, W::Retriever);
    let score = em(R::Retriever, W::Re);
    let rerank = em(R::Re, W::Retriever);
    let both = em(R::Re, W::Re);
    // Hand-tabulated from the fixture's question types.
    assert_eq!((baseline, score, rerank, both), (30.0, 50.0, 65.0, 80.0));
}

#[test]
fn weight_source_only_changes_scores() {
    let a = eval(config(RerankSource::Re, WeightSource::Re));
    let b = eval(config(RerankSource::Re, WeightSource::Retriever));
    for (qa, qb) in a.questions.iter().zip(&b.questions) {
        assert_eq!(qa.context_ids, qb.context_ids);
        let texts = |q: &QuestionReport| q.candidates.iter().map(|c| c.text.clone()).collect::<BTreeSet<_>>();
        assert_eq!(texts(qa), texts(qb), "{}", qa.id);
    }
}

#[test]
fn policy_none_equals_unanswerable_at_zero() {
    let mut none = config(RerankSource::Re, WeightSource::Re);
    none.policy.threshold = 0.0;
    let mut gated = none.clone();
    gated.policy.mode = PolicyMode::Unanswerable;
    let a = eval(none);
    let b = eval(gated);
    assert_eq!(a.questions, b.questions);
    assert_eq!(a.aggregates, b.aggregates);
    assert_eq!(a.split, b.split);
    assert_eq!(a.classification, b.classification);
}

#[test]
fn warm_cache_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.cache_dir = Some(dir.path().join("cache"));
    cfg.sweep = true;
    let run = || Pipeline::new(cfg.clone(), Backends::mock(SEED)).unwrap().run_eval().unwrap();
    let cold = run();
    let warm1 = run();
    let warm2 = run();
    assert_eq!(warm1.to_json().unwrap(), warm2.to_json().unwrap());
    assert_eq!(cold.questions, warm1.questions);
    let c = warm1.cache.unwrap();
    assert_eq!((c.misses, c.writes), (0, 0));
    assert!(c.hits > 0);
}

#[test]
fn jobs_do_not_change_the_report() {
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.jobs = 1;
    let serial = eval(cfg.clone()).questions;
    cfg.jobs = 16;
    assert_eq!(serial, eval(cfg).questions);
}

#[test]
fn rerank_none_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.json");
    let mut cfg = config(RerankSource::None, WeightSource::Retriever);
    cfg.top_k_generate = 25;
    let report = Pipeline::new(cfg, Backends::mock(SEED)).unwrap().run_rerank(&out).unwrap();
    assert_eq!(load_dataset(&out, None).unwrap(), load_dataset(fixture(), None).unwrap());
    assert_eq!(report.recall, report.recall_before);
}

#[test]
fn rerank_promotes_marked_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.json");
    let cfg = config(RerankSource::Re, WeightSource::Re);
    let report = Pipeline::new(cfg, Backends::mock(SEED)).unwrap().run_rerank(&out).unwrap();
    let reranked = load_dataset(&out, None).unwrap();
    let original = load_dataset(fixture(), None).unwrap();
    for (r, o) in reranked.iter().zip(&original) {
        assert_eq!(r.contexts.len(), 3);
        if o.contexts.iter().any(|c| c.text.contains("##REL##")) {
            assert!(r.contexts[0].text.contains("##REL##"), "{}", r.id);
        }
    }
    assert!(report.recall.is_monotone() && report.recall_before.is_monotone());
    assert_eq!(report.recall.get(1), Some(80.0));
    assert_eq!(report.recall_before.get(1), Some(30.0));
    assert!(report.recall.get(1) >= report.recall_before.get(1));
}

/// RE = 1 on gold-bearing contexts and 0 elsewhere.
struct GoldJudge(Vec<QuestionRecord>);

impl RelevanceBackend for GoldJudge {
    fn identity(&self) -> String {
        "oracle".into()
    }
    fn judge(&self, q: &str, c: &ScoredContext) -> Result<Judgment, BackendError> {
        let rec = self.0.iter().find(|r| r.question == q).unwrap();
        let hit = contains_gold(&c.text, &rec.gold_answers);
        Ok(RelevanceJudgment::new(hit as u8 as f64, (!hit) as u8 as f64).into())
    }
}

struct ConstantJudge(f64);

impl RelevanceBackend for ConstantJudge {
    fn identity(&self) -> String {
        format!("constant/{}", self.0)
    }
    fn judge(&self, _q: &str, _c: &ScoredContext) -> Result<Judgment, BackendError> {
        Ok(RelevanceJudgment::new(self.0, 1.0 - self.0).into())
    }
}

fn classify(judge: Arc<dyn RelevanceBackend>, threshold: f64, rerank: RerankSource) -> ClassifyReport {
    let mut cfg = config(rerank, WeightSource::Retriever);
    cfg.policy.threshold = threshold;
    let backends = Backends {
        relevance: Some(judge),
        ..Default::default()
    };
    Pipeline::new(cfg, backends).unwrap().run_classify(None).unwrap()
}

#[test]
fn classify_oracle_confidences_separate_perfectly() {
    let records = load_dataset(fixture(), None).unwrap();
    let r = classify(Arc::new(GoldJudge(records)), 0.5, RerankSource::Retriever);
    let m = r.classification;
    assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
}

#[test]
fn classify_constant_confidences_are_degenerate() {
    let below = classify(Arc::new(ConstantJudge(0.6)), 0.7, RerankSource::Retriever);
    assert_eq!(below.classification.recall, 1.0);
    let above = classify(Arc::new(ConstantJudge(0.6)), 0.5, RerankSource::Retriever);
    assert_eq!(above.classification.recall, 0.0);
}

#[test]
fn classify_matches_hand_tabulation() {
    // Retriever order, top-3: A and S sets hold the marked gold context, the
    // R, T and U sets do not, and none of the latter reach 0.7.
    let r = classify(Arc::new(MockJudge::new(SEED)), 0.7, RerankSource::Retriever);
    let m = r.classification;
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (10, 0, 0, 10));
    // After RE reranking only the U sets lack a gold answer.
    let r = classify(Arc::new(MockJudge::new(SEED)), 0.7, RerankSource::Re);
    let m = r.classification;
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (4, 0, 0, 16));
    check_classify_consistency(&r).unwrap();
}

#[test]
fn classify_with_dev_search_and_split() {
    let cfg = config(RerankSource::Re, WeightSource::Re);
    let p = Pipeline::new(cfg, Backends::mock(SEED)).unwrap();
    let records = p.load_dataset().unwrap();
    let r = p.run_classify(Some(&records)).unwrap();
    assert!(r.threshold_searched);
    let sweep = r.sweep.as_ref().unwrap();
    assert_eq!(sweep.best_threshold, Some(0.5));
    assert_eq!(sweep.best_f1, Some(1.0));
    let split = r.split.unwrap();
    assert_eq!(split.unanswerable_classified, 100.0);
    assert_eq!(split.answerable_rejected, 0.0);
    assert_eq!(split.unanswerable.after.em, 100.0);
    assert!(split.answerable.after.em <= split.answerable.before.em);
}

#[test]
fn classify_retriever_confidence() {
    let mut cfg = config(RerankSource::Retriever, WeightSource::Retriever);
    cfg.policy.confidence_source = ConfidenceSource::Retriever;
    let p = Pipeline::new(cfg, Backends::default()).unwrap();
    let r = p.run_classify(None).unwrap();
    // Every fixture list starts at retriever score 80, the dataset maximum.
    assert!(r.records.iter().all(|x| x.confidence == 1.0 && !x.predicted_unanswerable));
}

struct Mixed {
    generator: Arc<MockGenerator>,
    report: EvalReport,
}

fn mixed(threshold: f64, baseline: bool) -> Mixed {
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.policy.threshold = threshold;
    let generator = Arc::new(MockGenerator::new(SEED));
    let backends = Backends {
        relevance: Some(Arc::new(MockJudge::new(SEED))),
        generator: Some(generator.clone()),
        parametric: Some(Arc::new(MockGenerator::new(SEED).with_knowledge(knowledge()))),
    };
    let report = Pipeline::new(cfg, backends).unwrap().run_mixed(baseline).unwrap();
    Mixed { generator, report }
}

#[test]
fn mixed_threshold_zero_equals_eval() {
    let m = mixed(0.0, false).report;
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.policy.threshold = 0.0;
    let e = eval(cfg);
    assert_eq!(m.mixed.as_ref().unwrap().routed, 0);
    assert_eq!(m.questions, e.questions);
    assert_eq!(m.aggregates, e.aggregates);
}

#[test]
fn mixed_threshold_one_never_calls_rag_generator() {
    let m = mixed(1.0, false);
    assert_eq!(m.generator.calls(), 0);
    assert_eq!(m.report.mixed.as_ref().unwrap().routed, 20);
    assert!(m.report.questions.iter().all(|q| q.decision == DecisionKind::ParametricAnswer));
    assert!(m.report.split.is_none());
}

#[test]
fn mixed_gain_equals_routed_fraction() {
    let r = mixed(0.7, true).report;
    let s = r.mixed.clone().unwrap();
    assert_eq!(s.routed, 4);
    assert_eq!(s.em_before, Some(80.0));
    assert_eq!(s.em_after, 100.0);
    assert_eq!(s.em_gain, Some(s.routed_fraction));
    check_consistency(&r).unwrap();
    assert!(r.split.is_some());
}

struct FlakyJudge;

impl RelevanceBackend for FlakyJudge {
    fn identity(&self) -> String {
        "flaky".into()
    }
    fn judge(&self, q: &str, c: &ScoredContext) -> Result<Judgment, BackendError> {
        if q.contains("moby") {
            return Err(BackendError::Transport {
                attempts: 3,
                message: "connection reset".into(),
            });
        }
        MockJudge::new(SEED).judge(q, c)
    }
}

#[test]
fn one_failing_question_is_isolated() {
    let mut backends = Backends::mock(SEED);
    backends.relevance = Some(Arc::new(FlakyJudge));
    let r = Pipeline::new(config(RerankSource::Re, WeightSource::Re), backends)
        .unwrap()
        .run_eval()
        .unwrap();
    assert_eq!(r.n_questions, 20);
    assert_eq!(r.questions.len(), 19);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].kind, "backend");
    assert_eq!(r.aggregates.overall.n, 19);
    check_consistency(&r).unwrap();
}

struct DeadJudge;

impl RelevanceBackend for DeadJudge {
    fn identity(&self) -> String {
        "dead".into()
    }
    fn judge(&self, _q: &str, _c: &ScoredContext) -> Result<Judgment, BackendError> {
        Err(BackendError::Protocol("no logprobs".into()))
    }
}

#[test]
fn all_failing_questions_abort() {
    let mut backends = Backends::mock(SEED);
    backends.relevance = Some(Arc::new(DeadJudge));
    let err = Pipeline::new(config(RerankSource::Re, WeightSource::Re), backends)
        .unwrap()
        .run_eval()
        .unwrap_err();
    assert!(matches!(err, Error::AllFailed(20)));
}

#[test]
fn missing_backends_are_config_errors() {
    let no_judge = Backends {
        relevance: None,
        ..Backends::mock(SEED)
    };
    assert!(matches!(
        Pipeline::new(config(RerankSource::Re, WeightSource::Retriever), no_judge),
        Err(Error::Config(_))
    ));
    let mut cfg = config(RerankSource::Retriever, WeightSource::Retriever);
    cfg.policy.mode = PolicyMode::ParametricFallback;
    let no_parametric = Backends {
        parametric: None,
        ..Backends::mock(SEED)
    };
    assert!(matches!(Pipeline::new(cfg, no_parametric), Err(Error::Config(_))));
}

#[test]
fn thorough_and_concatenated_variants_run() {
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.thorough = true;
    let thorough = eval(cfg.clone());
    check_consistency(&thorough).unwrap();
    assert!(thorough.aggregates.overall.em >= 50.0);

    cfg.thorough = false;
    cfg.generation_style = GenerationStyle::Concatenated;
    let concat = eval(cfg);
    check_consistency(&concat).unwrap();
    assert!(concat.questions.iter().all(|q| q.candidates.len() == 1));

    let no_scoring = Backends {
        generator: Some(Arc::new(MockGenerator::new(SEED).without_scoring()) as Arc<dyn GeneratorBackend>),
        ..Backends::mock(SEED)
    };
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    cfg.thorough = true;
    let err = Pipeline::new(cfg, no_scoring).unwrap().run_eval().unwrap_err();
    assert!(matches!(err, Error::AllFailed(_)));
}

#[test]
fn emitted_reports_are_self_consistent() {
    let mut cfg = config(RerankSource::Retriever, WeightSource::Re);
    cfg.policy.mode = PolicyMode::Unanswerable;
    cfg.sweep = true;
    let report = eval(cfg);
    let dir = tempfile::tempdir().unwrap();

    let json = emit_report(&report, ReportFormat::Json, dir.path()).unwrap();
    let parsed = EvalReport::from_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(Aggregates::from_questions(&parsed.questions), parsed.aggregates);
    assert_eq!(parsed, report);

    let csv = emit_report(&report, ReportFormat::Csv, dir.path()).unwrap();
    let lines = std::fs::read_to_string(csv).unwrap().lines().count();
    assert_eq!(lines, 1 + metric_rows(&report).len());

    let table = emit_report(&report, ReportFormat::Table, dir.path()).unwrap();
    let text = std::fs::read_to_string(table).unwrap();
    assert!(text.contains("before -> after") && text.contains("Threshold sweep"));

    let mut tampered = report.clone();
    tampered.aggregates.overall.em += 5.0;
    assert!(matches!(
        emit_report(&tampered, ReportFormat::Json, dir.path()),
        Err(Error::Inconsistent(_))
    ));
    let mut tampered = report;
    tampered.questions[0].scores.em = !tampered.questions[0].scores.em;
    assert!(matches!(check_consistency(&tampered), Err(Error::Inconsistent(_))));
}

#[test]
fn fixture_report_matches_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden/eval_re_re.json");
    let records = parse_dataset(&std::fs::read_to_string(fixture()).unwrap(), None).unwrap();
    let mut cfg = config(RerankSource::Re, WeightSource::Re);
    // A relative path keeps the echoed config machine-independent.
    cfg.dataset = PathBuf::from("fixtures/nq_mock_20.json");
    cfg.sweep = true;
    cfg.policy.mode = PolicyMode::Unanswerable;
    let report = Pipeline::new(cfg, Backends::mock(SEED)).unwrap().eval_records(&records).unwrap();
    let json = report.to_json().unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &json).unwrap();
    }
    let expected = std::fs::read_to_string(&golden)
        .unwrap_or_else(|_| panic!("missing {}; rerun with UPDATE_GOLDEN=1", golden.display()));
    assert_eq!(json, expected);
}
