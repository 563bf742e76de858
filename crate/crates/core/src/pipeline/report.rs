use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ReportFormat, RunConfig};
use crate::backend::CacheStats;
use crate::error::{Error, Result};
use crate::marginalize::MarginalizedAnswer;
use crate::metrics::{classification_prf, round1, AnswerScores, ClassificationPrf, MetricRow, RecallTable};
use crate::policy::{evaluate_policy, DecisionKind, PolicyCase, SetConfidence, SplitReport, ThresholdSweep, UNANSWERABLE_RESPONSE};

/// Tolerance when re-deriving aggregates from per-question records.
const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentities {
    pub relevance: Option<String>,
    pub generator: Option<String>,
    pub parametric: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    /// Position in the input dataset.
    pub index: usize,
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    /// Generation set after reranking.
    pub context_ids: Vec<String>,
    /// RE values for the generation set, when judged.
    pub re_scores: Option<Vec<f64>>,
    /// Whether the generation set contains a gold answer.
    pub answerable: bool,
    pub confidence: Option<SetConfidence>,
    pub decision: DecisionKind,
    /// Top marginalized answer; absent when the question was routed to the
    /// parametric fallback without generating.
    pub rag_prediction: Option<String>,
    pub fallback_prediction: Option<String>,
    /// The answer that was scored.
    pub prediction: String,
    pub scores: AnswerScores,
    pub rag_scores: Option<AnswerScores>,
    pub candidates: Vec<MarginalizedAnswer>,
    pub generation_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub index: usize,
    pub id: String,
    /// `backend` or `data`.
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: MetricRow,
    pub answerable: MetricRow,
    pub unanswerable: MetricRow,
}

impl Aggregates {
    pub fn from_questions(questions: &[QuestionReport]) -> Self {
        let side = |answerable: bool| {
            MetricRow::aggregate(
                questions
                    .iter()
                    .filter(move |q| q.answerable == answerable)
                    .map(|q| &q.scores),
            )
        };
        Self {
            overall: MetricRow::aggregate(questions.iter().map(|q| &q.scores)),
            answerable: side(true),
            unanswerable: side(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSummary {
    pub routed: usize,
    /// Percent of scored questions answered by the parametric generator.
    pub routed_fraction: f64,
    /// EM of the plain pipeline, when it was run for comparison.
    pub em_before: Option<f64>,
    pub em_after: f64,
    pub em_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub backends: BackendIdentities,
    /// Questions in the input, including failed ones.
    pub n_questions: usize,
    pub aggregates: Aggregates,
    /// Accuracy before and after the policy, split by answerable label.
    pub split: Option<SplitReport>,
    pub recall: RecallTable,
    /// Unanswerable-class metrics of `confidence < threshold`.
    pub classification: Option<ClassificationPrf>,
    pub sweep: Option<ThresholdSweep>,
    pub mixed: Option<MixedSummary>,
    pub cache: Option<CacheStats>,
    pub questions: Vec<QuestionReport>,
    pub failures: Vec<QuestionFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankReport {
    pub config: RunConfig,
    pub backends: BackendIdentities,
    pub n_questions: usize,
    pub output: PathBuf,
    /// Recall of the input order.
    pub recall_before: RecallTable,
    pub recall: RecallTable,
    pub failures: Vec<QuestionFailure>,
    pub cache: Option<CacheStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRecord {
    pub index: usize,
    pub id: String,
    pub answerable: bool,
    pub confidence: f64,
    pub predicted_unanswerable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub config: RunConfig,
    pub backends: BackendIdentities,
    pub n_questions: usize,
    pub threshold: f64,
    pub threshold_searched: bool,
    pub sweep: Option<ThresholdSweep>,
    pub classification: ClassificationPrf,
    /// Percent of classified sets that are answerable.
    pub answerable_fraction: f64,
    pub split: Option<SplitReport>,
    pub records: Vec<ClassifyRecord>,
    pub failures: Vec<QuestionFailure>,
    pub cache: Option<CacheStats>,
}

/// Split report over the questions, when every one has a generated answer.
pub(super) fn split_of(questions: &[QuestionReport]) -> Result<Option<SplitReport>> {
    let cases: Option<Vec<PolicyCase<'_>>> = questions
        .iter()
        .map(|q| {
            Some(PolicyCase {
                answerable: q.answerable,
                decision: q.decision,
                prediction: q.rag_prediction.as_deref()?,
                fallback_prediction: q.fallback_prediction.as_deref(),
                golds: &q.gold_answers,
            })
        })
        .collect();
    match cases {
        Some(c) if !c.is_empty() => evaluate_policy(&c).map(Some),
        _ => Ok(None),
    }
}

fn inconsistent(msg: String) -> Error {
    Error::Inconsistent(msg)
}

fn check_failure_accounting(n: usize, indices: impl Iterator<Item = usize>, failures: &[QuestionFailure]) -> Result<()> {
    let mut all: Vec<usize> = indices.chain(failures.iter().map(|f| f.index)).collect();
    if all.len() != n {
        return Err(inconsistent(format!("{} records plus failures for {n} questions", all.len())));
    }
    all.sort_unstable();
    if all.iter().enumerate().any(|(i, &x)| i != x) {
        return Err(inconsistent("question indices are not a permutation of the input".into()));
    }
    Ok(())
}

fn check_question(q: &QuestionReport) -> Result<()> {
    let fail = |what: &str| Err(inconsistent(format!("question {} ({}): {what}", q.index, q.id)));
    if let (Some(p), Some(s)) = (&q.rag_prediction, &q.rag_scores) {
        if AnswerScores::compute(p, &q.gold_answers) != *s {
            return fail("rag scores do not match the rag prediction");
        }
    }
    let expected = match q.decision {
        DecisionKind::Answer => match &q.rag_prediction {
            Some(p) if *p == q.prediction => AnswerScores::compute(p, &q.gold_answers),
            _ => return fail("answered without a matching rag prediction"),
        },
        DecisionKind::Unanswerable => {
            if q.prediction != UNANSWERABLE_RESPONSE {
                return fail("rejected set with a non-abstaining prediction");
            }
            if q.answerable {
                AnswerScores::WRONG
            } else {
                AnswerScores::RIGHT
            }
        }
        DecisionKind::ParametricAnswer => match &q.fallback_prediction {
            Some(p) if *p == q.prediction => AnswerScores::compute(p, &q.gold_answers),
            _ => return fail("fallback without a matching fallback prediction"),
        },
    };
    if expected != q.scores {
        return fail("scores do not match the prediction");
    }
    Ok(())
}

fn rows_match(what: &str, a: &MetricRow, b: &MetricRow) -> Result<()> {
    if a.approx_eq(b, CONSISTENCY_TOL) {
        Ok(())
    } else {
        Err(inconsistent(format!("{what}: embedded {a:?} vs recomputed {b:?}")))
    }
}

fn split_matches(embedded: &SplitReport, recomputed: &SplitReport) -> Result<()> {
    rows_match("answerable before", &embedded.answerable.before, &recomputed.answerable.before)?;
    rows_match("answerable after", &embedded.answerable.after, &recomputed.answerable.after)?;
    rows_match("unanswerable before", &embedded.unanswerable.before, &recomputed.unanswerable.before)?;
    rows_match("unanswerable after", &embedded.unanswerable.after, &recomputed.unanswerable.after)?;
    if (embedded.unanswerable_classified - recomputed.unanswerable_classified).abs() > CONSISTENCY_TOL
        || (embedded.answerable_rejected - recomputed.answerable_rejected).abs() > CONSISTENCY_TOL
    {
        return Err(inconsistent("split rejection rates".into()));
    }
    Ok(())
}

/// Re-derives every aggregate of `report` from its per-question records.
pub fn check_consistency(report: &EvalReport) -> Result<()> {
    check_failure_accounting(report.n_questions, report.questions.iter().map(|q| q.index), &report.failures)?;
    for q in &report.questions {
        check_question(q)?;
    }
    let agg = Aggregates::from_questions(&report.questions);
    rows_match("overall", &report.aggregates.overall, &agg.overall)?;
    rows_match("answerable", &report.aggregates.answerable, &agg.answerable)?;
    rows_match("unanswerable", &report.aggregates.unanswerable, &agg.unanswerable)?;

    match (&report.split, split_of(&report.questions)?) {
        (Some(e), Some(r)) => split_matches(e, &r)?,
        (None, None) => {}
        _ => return Err(inconsistent("split report presence does not match the records".into())),
    }

    if let Some(embedded) = &report.classification {
        let conf: Option<Vec<f64>> = report.questions.iter().map(|q| q.confidence.map(|c| c.value)).collect();
        let conf = conf.ok_or_else(|| inconsistent("classification without confidences".into()))?;
        let labels: Vec<bool> = report.questions.iter().map(|q| !q.answerable).collect();
        let predicted: Vec<bool> = conf.iter().map(|&c| c < report.config.policy.threshold).collect();
        if classification_prf(&labels, &predicted)? != *embedded {
            return Err(inconsistent("classification counts".into()));
        }
    }

    if !report.recall.is_monotone() {
        return Err(inconsistent("recall table is not monotone in k".into()));
    }

    if let Some(m) = &report.mixed {
        let routed = report
            .questions
            .iter()
            .filter(|q| q.decision == DecisionKind::ParametricAnswer)
            .count();
        if routed != m.routed || (m.em_after - agg.overall.em).abs() > CONSISTENCY_TOL {
            return Err(inconsistent("mixed-strategy summary".into()));
        }
    }
    Ok(())
}

pub fn check_classify_consistency(report: &ClassifyReport) -> Result<()> {
    check_failure_accounting(report.n_questions, report.records.iter().map(|r| r.index), &report.failures)?;
    for r in &report.records {
        if r.predicted_unanswerable != (r.confidence < report.threshold) {
            return Err(inconsistent(format!("record {}: prediction disagrees with threshold", r.index)));
        }
    }
    let labels: Vec<bool> = report.records.iter().map(|r| !r.answerable).collect();
    let predicted: Vec<bool> = report.records.iter().map(|r| r.predicted_unanswerable).collect();
    if classification_prf(&labels, &predicted)? != report.classification {
        return Err(inconsistent("classification counts".into()));
    }
    Ok(())
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Inconsistent(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// The metric rows of a report, in CSV/table order.
pub fn metric_rows(report: &EvalReport) -> Vec<(String, MetricRow)> {
    let a = &report.aggregates;
    let mut rows = vec![
        ("overall".to_string(), a.overall),
        ("answerable".to_string(), a.answerable),
        ("unanswerable".to_string(), a.unanswerable),
    ];
    if let Some(s) = &report.split {
        rows.push(("answerable_before".into(), s.answerable.before));
        rows.push(("answerable_after".into(), s.answerable.after));
        rows.push(("unanswerable_before".into(), s.unanswerable.before));
        rows.push(("unanswerable_after".into(), s.unanswerable.after));
    }
    rows
}

pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("row,em,acc,f1,n\n");
    for (name, r) in metric_rows(report) {
        let _ = writeln!(out, "{name},{:.1},{:.1},{:.1},{}", round1(r.em), round1(r.acc), round1(r.f1), r.n);
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.1}", round1(x))
}

/// The serde name of a unit enum variant.
fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn describe_config(c: &RunConfig) -> String {
    format!(
        "rerank={}  weight={}  grouping={}  top-k={}/{}  policy={} (threshold {:.2}, confidence {}){}",
        name(&c.rerank_source),
        name(&c.weight_source),
        name(&c.grouping),
        c.top_k_generate,
        c.top_k_rerank,
        name(&c.policy.mode),
        c.policy.threshold,
        name(&c.policy.confidence_source),
        if c.thorough { "  thorough" } else { "" },
    )
}

fn write_recall(out: &mut String, label: &str, t: &RecallTable) {
    let _ = write!(out, "{label:<16}");
    for e in &t.entries {
        let _ = write!(out, "  @{:<3}{:>6}{}", e.k, pct(e.recall), if e.truncated { "*" } else { " " });
    }
    out.push('\n');
}

fn write_sweep(out: &mut String, s: &ThresholdSweep) {
    let _ = writeln!(out, "Threshold sweep (unanswerable class)");
    let _ = writeln!(out, "  {:>9} {:>7} {:>7} {:>7} {:>7} {:>7}", "threshold", "P", "R", "F1", "kept", "caught");
    for r in &s.rows {
        let mark = if Some(r.threshold) == s.best_threshold { " <" } else { "" };
        let _ = writeln!(
            out,
            "  {:>9.2} {:>7} {:>7} {:>7} {:>7} {:>7}{mark}",
            r.threshold,
            pct(100.0 * r.precision),
            pct(100.0 * r.recall),
            pct(100.0 * r.f1),
            pct(r.answerable_kept),
            pct(r.unanswerable_caught),
        );
    }
}

fn write_prf(out: &mut String, m: &ClassificationPrf) {
    let _ = writeln!(
        out,
        "Unanswerable sets: P {}  R {}  F1 {}  (tp {} fp {} fn {} tn {})",
        pct(100.0 * m.precision),
        pct(100.0 * m.recall),
        pct(100.0 * m.f1),
        m.tp,
        m.fp,
        m.fn_,
        m.tn
    );
}

fn write_split(out: &mut String, s: &SplitReport) {
    let _ = writeln!(out, "Accuracy by context set (before -> after policy)");
    let _ = writeln!(out, "  {:<18} {:>16} {:>16} {:>16}", "", "EM", "Acc", "F1");
    for (label, side) in [("answerable (O)", &s.answerable), ("unanswerable (X)", &s.unanswerable)] {
        let arrow = |a: f64, b: f64| format!("{} -> {}", pct(a), pct(b));
        let _ = writeln!(
            out,
            "  {:<18} {:>16} {:>16} {:>16}",
            label,
            arrow(side.before.em, side.after.em),
            arrow(side.before.acc, side.after.acc),
            arrow(side.before.f1, side.after.f1),
        );
    }
    let _ = writeln!(
        out,
        "  unanswerable sets rejected {}%, answerable sets rejected {}%",
        pct(s.unanswerable_classified),
        pct(s.answerable_rejected)
    );
}

fn write_cache(out: &mut String, c: &Option<CacheStats>) {
    if let Some(c) = c {
        let _ = writeln!(
            out,
            "Cache: {} hits, {} misses, {} writes, {} quarantined",
            c.hits, c.misses, c.writes, c.quarantined
        );
    }
}

pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Evaluation: {} questions, {} failed",
        report.n_questions,
        report.failures.len()
    );
    let _ = writeln!(out, "{}", describe_config(&report.config));
    out.push('\n');
    let _ = writeln!(out, "{:<22} {:>7} {:>7} {:>7} {:>6}", "", "EM", "Acc", "F1", "n");
    for (name, r) in metric_rows(report).into_iter().take(3) {
        let _ = writeln!(out, "{name:<22} {:>7} {:>7} {:>7} {:>6}", pct(r.em), pct(r.acc), pct(r.f1), r.n);
    }
    if let Some(s) = &report.split {
        out.push('\n');
        write_split(&mut out, s);
    }
    if let Some(m) = &report.mixed {
        out.push('\n');
        let _ = write!(out, "Parametric fallback: {} routed ({}%)", m.routed, pct(m.routed_fraction));
        match (m.em_before, m.em_gain) {
            (Some(b), Some(g)) => {
                let _ = writeln!(out, ", EM {} -> {} ({:+.1})", pct(b), pct(m.em_after), round1(g));
            }
            _ => {
                let _ = writeln!(out, ", EM {}", pct(m.em_after));
            }
        }
    }
    if let Some(c) = &report.classification {
        out.push('\n');
        write_prf(&mut out, c);
    }
    if let Some(s) = &report.sweep {
        out.push('\n');
        write_sweep(&mut out, s);
    }
    out.push('\n');
    write_recall(&mut out, "Recall", &report.recall);
    if report.recall.entries.iter().any(|e| e.truncated) {
        let _ = writeln!(out, "  * some questions have fewer than k contexts");
    }
    if !report.failures.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "Failed questions");
        for f in &report.failures {
            let _ = writeln!(out, "  #{} {} [{}] {}", f.index, f.id, f.kind, f.message);
        }
    }
    write_cache(&mut out, &report.cache);
    out
}

pub fn render_classify_table(report: &ClassifyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Context-set classification: {} questions, {} failed, {}% answerable",
        report.n_questions,
        report.failures.len(),
        pct(report.answerable_fraction)
    );
    let _ = writeln!(
        out,
        "threshold {:.2} ({}), confidence {}, top-k {}",
        report.threshold,
        if report.threshold_searched { "searched" } else { "fixed" },
        name(&report.config.policy.confidence_source),
        report.config.top_k_generate
    );
    out.push('\n');
    write_prf(&mut out, &report.classification);
    if let Some(s) = &report.sweep {
        out.push('\n');
        write_sweep(&mut out, s);
    }
    if let Some(s) = &report.split {
        out.push('\n');
        write_split(&mut out, s);
    }
    write_cache(&mut out, &report.cache);
    out
}

pub fn render_rerank_table(report: &RerankReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Reranking: {} questions, {} failed, written to {}",
        report.n_questions,
        report.failures.len(),
        report.output.display()
    );
    write_recall(&mut out, "retriever order", &report.recall_before);
    write_recall(&mut out, "reranked", &report.recall);
    write_cache(&mut out, &report.cache);
    out
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Checks the report and writes `report.{json,csv,txt}` into `dir`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    check_consistency(report)?;
    let body = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Table => render_table(report),
    };
    write_file(dir, &format!("report.{}", format.extension()), &body)
}

/// Writes `classify.{json,csv,txt}` into `dir`. The CSV holds one row per
/// question.
pub fn emit_classify_report(report: &ClassifyReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    check_classify_consistency(report)?;
    let body = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => {
            let mut out = String::from("index,id,answerable,confidence,predicted_unanswerable\n");
            for r in &report.records {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.index,
                    csv_field(&r.id),
                    r.answerable,
                    r.confidence,
                    r.predicted_unanswerable
                );
            }
            out
        }
        ReportFormat::Table => render_classify_table(report),
    };
    write_file(dir, &format!("classify.{}", format.extension()), &body)
}

/// Writes `rerank.{json,csv,txt}` into `dir`. The CSV holds the recall
/// table.
pub fn emit_rerank_report(report: &RerankReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    let body = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => {
            let mut out = String::from("k,recall_before,recall\n");
            for (b, a) in report.recall_before.entries.iter().zip(&report.recall.entries) {
                let _ = writeln!(out, "{},{:.1},{:.1}", a.k, round1(b.recall), round1(a.recall));
            }
            out
        }
        ReportFormat::Table => render_rerank_table(report),
    };
    write_file(dir, &format!("rerank.{}", format.extension()), &body)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
