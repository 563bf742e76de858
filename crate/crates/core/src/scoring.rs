//! Relevance scores, their logits, and the two context weightings used for
//! answer marginalization: softmax over retriever similarities and softmax
//! over relevance logits.

use serde::{Deserialize, Serialize};

use crate::data::QuestionRecord;
use crate::error::{Error, Result};

/// Default saturation guard applied before taking a logit.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

/// Probabilities a relevance model assigns to its "true" and "false" tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub p_true: f64,
    pub p_false: f64,
}

impl RelevanceJudgment {
    pub fn new(p_true: f64, p_false: f64) -> Self {
        Self { p_true, p_false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `p_true / (p_true + p_false)`.
    #[default]
    Normalized,
    /// `p_true` as reported, without renormalizing against `p_false`.
    Raw,
}

/// A relevance value in (0, 1) together with its log-odds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: f64,
    pub logit: f64,
}

impl RelevanceScore {
    pub fn from_value(value: f64, eps: f64) -> Self {
        Self {
            value,
            logit: logit_clamped(value, eps),
        }
    }
}

/// Normalized probability of the "true" token.
pub fn re_score(j: RelevanceJudgment) -> Result<f64> {
    re_score_with_mode(j, ScoreMode::Normalized)
}

pub fn re_score_with_mode(j: RelevanceJudgment, mode: ScoreMode) -> Result<f64> {
    let RelevanceJudgment { p_true, p_false } = j;
    if !(p_true.is_finite() && p_false.is_finite()) || p_true < 0.0 || p_false < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "judgment probabilities must be finite and non-negative, got ({p_true}, {p_false})"
        )));
    }
    match mode {
        ScoreMode::Raw => Ok(p_true.min(1.0)),
        ScoreMode::Normalized => {
            let total = p_true + p_false;
            if total <= 0.0 {
                return Err(Error::DegenerateJudgment);
            }
            Ok(p_true / total)
        }
    }
}

/// `ln(value / (1 - value))` with no clamping.
pub fn logit(value: f64) -> Result<f64> {
    if !(value > 0.0 && value < 1.0) {
        return Err(Error::Domain(value));
    }
    Ok((value / (1.0 - value)).ln())
}

/// Logit after clamping `value` into `[eps, 1 - eps]`.
pub fn logit_clamped(value: f64, eps: f64) -> f64 {
    let v = value.clamp(eps, 1.0 - eps);
    (v / (1.0 - v)).ln()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Weights over a context set, positive and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDistribution {
    pub weights: Vec<f64>,
}

/// Softmax over relevance logits. `scores` are RE values; they are clamped
/// into `[eps, 1 - eps]` first.
pub fn relevance_distribution(scores: &[f64], eps: f64) -> Result<RelevanceDistribution> {
    if scores.is_empty() {
        return Err(Error::Empty("relevance scores"));
    }
    let logits: Vec<f64> = scores.iter().map(|&s| logit_clamped(s, eps)).collect();
    Ok(RelevanceDistribution {
        weights: softmax(&logits)?,
    })
}

/// Softmax over raw retriever similarities.
pub fn retriever_distribution(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite retriever score {bad}")));
    }
    softmax(scores)
}

/// Returns the permutation of context indices sorted by descending score,
/// ties broken by original retriever rank.
pub fn rerank_order(record: &QuestionRecord, scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() != record.contexts.len() {
        return Err(Error::LengthMismatch {
            what: "rerank scores vs contexts",
            left: scores.len(),
            right: record.contexts.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(record.contexts[a].rank.cmp(&record.contexts[b].rank))
    });
    Ok(order)
}

/// Sorts contexts by `scores` (descending, ties by original rank) and keeps
/// the first `k`.
pub fn rerank(record: &QuestionRecord, scores: &[f64], k: usize) -> Result<QuestionRecord> {
    if k == 0 {
        return Err(Error::InvalidArgument("rerank k must be at least 1".into()));
    }
    let order = rerank_order(record, scores)?;
    let contexts = order
        .into_iter()
        .take(k)
        .map(|i| record.contexts[i].clone())
        .collect();
    Ok(QuestionRecord {
        contexts,
        ..record.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScoredContext;
    use proptest::prelude::*;

    fn record(n: usize) -> QuestionRecord {
        QuestionRecord {
            id: "q".into(),
            question: "q".into(),
            gold_answers: vec!["a".into()],
            contexts: (0..n)
                .map(|rank| ScoredContext {
                    id: rank.to_string(),
                    title: String::new(),
                    text: format!("ctx {rank}"),
                    retriever_score: 10.0 - rank as f64,
                    rank,
                })
                .collect(),
        }
    }

    #[test]
    fn re_score_examples() {
        assert!((re_score(RelevanceJudgment::new(0.6, 0.2)).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(re_score(RelevanceJudgment::new(0.3, 0.3)).unwrap(), 0.5);
        assert_eq!(re_score(RelevanceJudgment::new(0.4, 0.0)).unwrap(), 1.0);
        assert!(matches!(
            re_score(RelevanceJudgment::new(0.0, 0.0)),
            Err(Error::DegenerateJudgment)
        ));
    }

    #[test]
    fn raw_mode_ignores_false_mass() {
        let j = RelevanceJudgment::new(0.3, 0.1);
        assert_eq!(re_score_with_mode(j, ScoreMode::Raw).unwrap(), 0.3);
        assert_eq!(re_score_with_mode(RelevanceJudgment::new(0.0, 0.0), ScoreMode::Raw).unwrap(), 0.0);
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((logit(0.75).unwrap() - 3f64.ln()).abs() < 1e-12);
        let eps = 1e-6;
        // 1 - (1 - eps) is not exactly eps in binary, hence the tolerance.
        assert!((logit_clamped(1.0, eps) - ((1.0 - eps) / eps).ln()).abs() < 1e-9);
        assert!((logit_clamped(0.0, eps) + ((1.0 - eps) / eps).ln()).abs() < 1e-9);
        assert!(matches!(logit(1.0), Err(Error::Domain(_))));
        assert!(matches!(logit(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn relevance_distribution_examples() {
        let d = relevance_distribution(&[0.5, 0.5], DEFAULT_CLAMP_EPS).unwrap();
        assert_eq!(d.weights, vec![0.5, 0.5]);
        let d = relevance_distribution(&[0.75, 0.5], DEFAULT_CLAMP_EPS).unwrap();
        assert!((d.weights[0] - 0.75).abs() < 1e-12 && (d.weights[1] - 0.25).abs() < 1e-12);
        assert_eq!(relevance_distribution(&[0.3], DEFAULT_CLAMP_EPS).unwrap().weights, vec![1.0]);
        assert!(relevance_distribution(&[], DEFAULT_CLAMP_EPS).is_err());
    }

    #[test]
    fn retriever_distribution_examples() {
        assert_eq!(retriever_distribution(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let d = retriever_distribution(&[2f64.ln(), 0.0]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        // exp(-1000) underflows to exactly 0 in f64; the reference value is
        // 1/(1+e^-1000) ≈ 1 - 5.1e-435.
        let d = retriever_distribution(&[1000.0, 0.0]).unwrap();
        assert!(d.iter().all(|x| x.is_finite()));
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!(retriever_distribution(&[]).is_err());
        assert!(retriever_distribution(&[f64::NAN]).is_err());
    }

    #[test]
    fn rerank_examples() {
        let r = record(3);
        let same = rerank(&r, &[0.4, 0.4, 0.4], 3).unwrap();
        assert_eq!(same.contexts.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![0, 1, 2]);
        let top2 = rerank(&r, &[0.1, 0.9, 0.5], 2).unwrap();
        assert_eq!(top2.contexts.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2]);
        let all = rerank(&r, &[0.1, 0.9, 0.5], 10).unwrap();
        assert_eq!(all.contexts.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(matches!(rerank(&r, &[0.1], 2), Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn scale_invariance(a in 1e-6f64..1.0, b in 1e-6f64..1.0, c in 1e-3f64..1e3) {
            let base = re_score(RelevanceJudgment::new(a, b)).unwrap();
            let scaled = re_score(RelevanceJudgment::new(c * a, c * b)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn logit_of_re_is_log_ratio(a in 1e-4f64..1.0, b in 1e-4f64..1.0) {
            let v = re_score(RelevanceJudgment::new(a, b)).unwrap();
            prop_assert!((logit(v).unwrap() - (a / b).ln()).abs() < 1e-9);
        }

        #[test]
        fn relevance_weights_monotone(
            scores in prop::collection::vec(0.01f64..0.99, 2..8),
            idx in 0usize..8,
            bump in 0.001f64..0.5,
        ) {
            let i = idx % scores.len();
            let before = relevance_distribution(&scores, DEFAULT_CLAMP_EPS).unwrap().weights;
            let mut raised = scores.clone();
            raised[i] = (raised[i] + bump).min(0.995);
            prop_assume!(raised[i] > scores[i]);
            let after = relevance_distribution(&raised, DEFAULT_CLAMP_EPS).unwrap().weights;
            prop_assert!(after[i] > before[i]);
            for j in (0..scores.len()).filter(|&j| j != i) {
                prop_assert!(after[j] <= before[j] + 1e-15);
            }
            prop_assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rerank_idempotent(scores in prop::collection::vec(-5.0f64..5.0, 1..10)) {
            let r = record(scores.len());
            let once = rerank(&r, &scores, scores.len()).unwrap();
            let reordered: Vec<f64> = once.contexts.iter().map(|c| scores[c.rank]).collect();
            let twice = rerank(&once, &reordered, scores.len()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn softmax_preserves_argmax(scores in prop::collection::vec(-50.0f64..50.0, 1..10)) {
            let d = retriever_distribution(&scores).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
            prop_assert_eq!(argmax(&d), argmax(&scores));
        }
    }
}
