//! Answer metrics (EM, containment accuracy, token F1), retrieval recall@k,
//! and precision/recall/F1 for the unanswerable class.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{contains_gold, normalize_answer, QuestionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 5, 10, 20];

pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g.as_ref()) == p)
}

/// Normalized prediction contains some normalized gold.
pub fn accuracy_contains<S: AsRef<str>>(prediction: &str, golds: &[S]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| p.contains(&normalize_answer(g.as_ref())))
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1 on normalized text, maximized over golds.
pub fn f1_token<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(prediction);
    golds
        .iter()
        .map(|g| token_f1(&p, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max)
}

/// Rounds a percentage to one decimal, halves away from zero.
pub fn round1(x: f64) -> f64 {
    // Nudge by a few ulps so values like 12.35 that are stored just below the
    // half still round up.
    let scaled = x * 10.0;
    let nudged = scaled + scaled.signum() * scaled.abs() * 4.0 * f64::EPSILON;
    (nudged.abs() + 0.5).floor().copysign(x) / 10.0
}

/// Per-question correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScores {
    pub em: bool,
    pub acc: bool,
    pub f1: f64,
}

impl AnswerScores {
    pub fn compute<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Self {
        Self {
            em: exact_match(prediction, golds),
            acc: accuracy_contains(prediction, golds),
            f1: f1_token(prediction, golds),
        }
    }

    pub const WRONG: AnswerScores = AnswerScores {
        em: false,
        acc: false,
        f1: 0.0,
    };

    pub const RIGHT: AnswerScores = AnswerScores {
        em: true,
        acc: true,
        f1: 1.0,
    };
}

/// Aggregate EM / Acc / F1 as percentages over `n` records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricRow {
    pub em: f64,
    pub acc: f64,
    pub f1: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn aggregate<'a>(scores: impl IntoIterator<Item = &'a AnswerScores>) -> Self {
        let mut row = MetricRow::default();
        for s in scores {
            row.n += 1;
            row.em += s.em as u8 as f64;
            row.acc += s.acc as u8 as f64;
            row.f1 += s.f1;
        }
        if row.n > 0 {
            let n = row.n as f64;
            row.em *= 100.0 / n;
            row.acc *= 100.0 / n;
            row.f1 *= 100.0 / n;
        }
        row
    }

    pub fn approx_eq(&self, other: &MetricRow, tol: f64) -> bool {
        self.n == other.n
            && (self.em - other.em).abs() <= tol
            && (self.acc - other.acc).abs() <= tol
            && (self.f1 - other.f1).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    /// Hit rate in percent.
    pub recall: f64,
    /// Some record had fewer than `k` contexts; its hit was computed over
    /// what exists.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RecallTable {
    pub entries: Vec<RecallEntry>,
}

impl RecallTable {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.k == k).map(|e| e.recall)
    }

    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].k > w[1].k || w[0].recall <= w[1].recall)
    }
}

/// Position of the first gold-bearing context, if any.
pub fn first_hit(record: &QuestionRecord) -> Option<usize> {
    record
        .contexts
        .iter()
        .position(|c| contains_gold(&c.text, &record.gold_answers))
}

/// Percent of records with a gold answer among their first `k` contexts.
pub fn recall_at_k(records: &[QuestionRecord], ks: &[usize]) -> Result<RecallTable> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let hits: Vec<Option<usize>> = records.iter().map(first_hit).collect();
    let min_len = records.iter().map(|r| r.contexts.len()).min().unwrap_or(0);
    let entries = ks
        .into_iter()
        .map(|k| {
            let found = hits.iter().filter(|h| matches!(h, Some(p) if *p < k)).count();
            RecallEntry {
                k,
                recall: 100.0 * found as f64 / records.len() as f64,
                truncated: k > min_len,
            }
        })
        .collect();
    let table = RecallTable { entries };
    debug_assert!(table.is_monotone());
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassificationPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// A zero denominator was replaced by 0.
    pub zero_division: bool,
}

/// Precision / recall / F1 for the positive (unanswerable) class.
pub fn classification_prf(labels: &[bool], predicted: &[bool]) -> Result<ClassificationPrf> {
    if labels.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            what: "labels vs predictions",
            left: labels.len(),
            right: predicted.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("classification labels"));
    }
    let mut m = ClassificationPrf::default();
    for (&l, &p) in labels.iter().zip(predicted) {
        match (l, p) {
            (true, true) => m.tp += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    let ratio = |num: usize, den: usize, flag: &mut bool| {
        if den == 0 {
            *flag = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut zero = false;
    m.precision = ratio(m.tp, m.tp + m.fp, &mut zero);
    m.recall = ratio(m.tp, m.tp + m.fn_, &mut zero);
    // 2PR/(P+R) rewritten over counts, so equal confusion matrices give
    // bit-identical F1 values.
    m.f1 = if m.tp > 0 {
        2.0 * m.tp as f64 / (2 * m.tp + m.fp + m.fn_) as f64
    } else {
        zero = true;
        0.0
    };
    m.zero_division = zero;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScoredContext;

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("the Rifleman.", &["rifleman"]));
        assert!(exact_match("", &[""]));
        assert!(!exact_match("Johnny Crawford", &["John Ernest Crawford"]));
    }

    #[test]
    fn accuracy_examples() {
        assert!(accuracy_contains("it was John Ernest Crawford", &["John Ernest Crawford"]));
        assert!(!accuracy_contains("cannes", &["Cannes, France"]));
        for (p, g) in [("The Rifleman", "rifleman"), ("", ""), ("x y", "X Y.")] {
            if exact_match(p, &[g]) {
                assert!(accuracy_contains(p, &[g]));
            }
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_token("cannes france", &["cannes france"]), 1.0);
        assert_eq!(f1_token("paris", &["london"]), 0.0);
        assert!((f1_token("cannes france", &["cannes"]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_token("", &[""]), 1.0);
        assert_eq!(f1_token("the", &["x"]), 0.0);
        assert_eq!(f1_token("x", &["a"]), 0.0);
        // Max over golds, multiset overlap.
        assert_eq!(f1_token("new york", &["york", "New York"]), 1.0);
        assert!((f1_token("x b b", &["b b c"]) - 2.0 / 3.0).abs() < 1e-12);
        // "a" is an article and disappears: "b b" vs "b b c" gives P=1, R=2/3.
        assert!((f1_token("a b b", &["b b c"]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round1(12.35), 12.4);
        assert_eq!(round1(12.34), 12.3);
        assert_eq!(round1(0.05), 0.1);
        assert_eq!(round1(100.0), 100.0);
        assert_eq!(round1(2.0 / 3.0 * 100.0), 66.7);
    }

    #[test]
    fn metric_row_percentages() {
        let s = [AnswerScores::RIGHT, AnswerScores::WRONG, AnswerScores { em: false, acc: true, f1: 0.5 }];
        let row = MetricRow::aggregate(&s);
        assert_eq!(row.n, 3);
        assert!((row.em - 100.0 / 3.0).abs() < 1e-12);
        assert!((row.acc - 200.0 / 3.0).abs() < 1e-12);
        assert!((row.f1 - 50.0).abs() < 1e-12);
    }

    fn rec(texts: &[&str], gold: &str) -> QuestionRecord {
        QuestionRecord {
            id: "r".into(),
            question: "q".into(),
            gold_answers: vec![gold.into()],
            contexts: texts
                .iter()
                .enumerate()
                .map(|(rank, t)| ScoredContext {
                    id: rank.to_string(),
                    title: String::new(),
                    text: t.to_string(),
                    retriever_score: 0.0,
                    rank,
                })
                .collect(),
        }
    }

    #[test]
    fn recall_hand_check() {
        let r = rec(&["a", "b", "gold here", "c", "d", "e"], "gold");
        let t = recall_at_k(&[r], &[1, 5]).unwrap();
        assert_eq!(t.get(1), Some(0.0));
        assert_eq!(t.get(5), Some(100.0));
        assert!(!t.entries[1].truncated);
        let t = recall_at_k(&[rec(&["gold"], "gold")], &DEFAULT_RECALL_KS).unwrap();
        assert!(t.entries[1].truncated);
        assert!(t.is_monotone());
        assert!(recall_at_k(&[], &[1]).is_err());
    }

    #[test]
    fn prf_examples() {
        let labels = [true, false, true, false];
        let perfect = classification_prf(&labels, &labels).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

        let all = classification_prf(&labels, &[true; 4]).unwrap();
        assert_eq!(all.recall, 1.0);
        assert_eq!(all.precision, 0.5);

        // TP=2 FP=1 FN=2 TN=0.
        let l = [true, true, false, true, true];
        let p = [true, true, true, false, false];
        let m = classification_prf(&l, &p).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 2, 0));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-12);

        let none = classification_prf(&[true, false], &[false, false]).unwrap();
        assert!(none.zero_division);
        assert_eq!(none.f1, 0.0);
        assert!(classification_prf(&[], &[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = String> {
            proptest::collection::vec("[a-z]{1,4}", 0..5).prop_map(|w| w.join(" "))
        }

        proptest! {
            #[test]
            fn exact_match_implies_the_others(p in words(), noise in "[.,!]{0,2}") {
                let variant = format!("The {}{}", p.to_uppercase(), noise);
                prop_assert!(exact_match(&variant, &[&p]));
                prop_assert!(accuracy_contains(&variant, &[&p]));
                prop_assert_eq!(f1_token(&variant, &[&p]), 1.0);
            }

            #[test]
            fn metrics_ignore_surface_changes(p in words(), g in words()) {
                let styled = format!("an {}!", p.to_uppercase());
                let golds = [g.as_str()];
                prop_assert_eq!(exact_match(&p, &golds), exact_match(&styled, &golds));
                prop_assert_eq!(accuracy_contains(&p, &golds), accuracy_contains(&styled, &golds));
                prop_assert_eq!(f1_token(&p, &golds), f1_token(&styled, &golds));
            }

            #[test]
            fn prf_matches_confusion_counts(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
                let (labels, predicted): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
                let m = classification_prf(&labels, &predicted).unwrap();
                let count = |l: bool, p: bool| pairs.iter().filter(|&&x| x == (l, p)).count();
                let (tp, fp, fn_, tn) = (count(true, true), count(false, true), count(true, false), count(false, false));
                prop_assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
                let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
                prop_assert!((m.precision - ratio(tp, tp + fp)).abs() < 1e-12);
                prop_assert!((m.recall - ratio(tp, tp + fn_)).abs() < 1e-12);
                prop_assert!((m.f1 - ratio(2 * tp, 2 * tp + fp + fn_)).abs() < 1e-12);
            }
        }
    }
}
