//! Confidence-gated decoding: set-level confidence, answer/unanswerable/
//! fallback decisions, threshold search and split evaluation.

use serde::{Deserialize, Serialize};

use crate::data::QuestionRecord;
use crate::error::{Error, Result};
use crate::metrics::{classification_prf, AnswerScores, MetricRow};

/// Grid searched for the confidence threshold: 0.5 to 0.9 in steps of 0.1.
pub const DEFAULT_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Set confidences below this value are flagged as low.
pub const LOW_CONFIDENCE: f64 = 0.5;

/// Response emitted for questions classified as unanswerable.
pub const UNANSWERABLE_RESPONSE: &str = "unanswerable";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceSource {
    /// Relevance-estimator "true" probability.
    #[default]
    Re,
    /// Retriever similarity, min-max mapped to [0, 1].
    Retriever,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetConfidence {
    pub value: f64,
    pub source: ConfidenceSource,
    pub low: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    #[default]
    None,
    Unanswerable,
    ParametricFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub threshold: f64,
    pub mode: PolicyMode,
    pub confidence_source: ConfidenceSource,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            mode: PolicyMode::None,
            confidence_source: ConfidenceSource::Re,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionKind {
    Answer,
    Unanswerable,
    ParametricAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: DecisionKind,
    pub confidence: SetConfidence,
}

/// Maximum of the per-context confidence values.
pub fn set_confidence(values: &[f64], source: ConfidenceSource) -> Result<SetConfidence> {
    if values.is_empty() {
        return Err(Error::Empty("confidence values"));
    }
    let value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SetConfidence {
        value,
        source,
        low: value < LOW_CONFIDENCE,
    })
}

/// A confidence at or above the threshold passes.
pub fn decide(confidence: SetConfidence, config: &PolicyConfig) -> Decision {
    let pass = confidence.value >= config.threshold;
    let kind = match (config.mode, pass) {
        (PolicyMode::None, _) | (_, true) => DecisionKind::Answer,
        (PolicyMode::Unanswerable, false) => DecisionKind::Unanswerable,
        (PolicyMode::ParametricFallback, false) => DecisionKind::ParametricAnswer,
    };
    Decision { kind, confidence }
}

/// Whether any of the first `k` contexts contains a gold answer.
pub fn answerable_label(record: &QuestionRecord, k: usize) -> bool {
    record.has_gold_in_top(k)
}

/// Min-max map fitted on a dev set, used to put unbounded retriever
/// similarities on the [0, 1] threshold scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScale {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScale {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Empty("retriever scores for min-max scaling"));
        }
        Ok(Self { min, max })
    }

    /// Maps into [0, 1], clamping values outside the fitted range. A
    /// degenerate range maps everything to 0.5.
    pub fn apply(&self, x: f64) -> f64 {
        if self.max > self.min {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Percent of answerable sets kept (confidence >= threshold).
    pub answerable_kept: f64,
    /// Percent of unanswerable sets flagged (confidence < threshold).
    pub unanswerable_caught: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub rows: Vec<SweepRow>,
    pub best_threshold: Option<f64>,
    pub best_f1: Option<f64>,
}

/// Evaluates every grid value and picks the one maximizing unanswerable-class
/// F1, preferring the lower threshold on ties. `unanswerable[i]` is the
/// ground truth for `confidences[i]`.
pub fn threshold_search(confidences: &[f64], unanswerable: &[bool], grid: &[f64]) -> Result<ThresholdSweep> {
    if confidences.len() != unanswerable.len() {
        return Err(Error::LengthMismatch {
            what: "confidences vs labels",
            left: confidences.len(),
            right: unanswerable.len(),
        });
    }
    if confidences.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let n_pos = unanswerable.iter().filter(|u| **u).count();
    let n_neg = unanswerable.len() - n_pos;
    let mut rows = Vec::with_capacity(grid.len());
    for &t in &grid {
        let predicted: Vec<bool> = confidences.iter().map(|&c| c < t).collect();
        let m = classification_prf(unanswerable, &predicted)?;
        rows.push(SweepRow {
            threshold: t,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            answerable_kept: if n_neg == 0 { 0.0 } else { 100.0 * m.tn as f64 / n_neg as f64 },
            unanswerable_caught: 100.0 * m.recall,
        });
    }

    let mut sweep = ThresholdSweep {
        rows,
        best_threshold: None,
        best_f1: None,
    };
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { sweep });
    }
    let best = sweep
        .rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.f1 >= r.f1 => Some(b),
            _ => Some(r),
        })
        .expect("grid is non-empty");
    sweep.best_threshold = Some(best.threshold);
    sweep.best_f1 = Some(best.f1);
    Ok(sweep)
}

/// One question's inputs to [`evaluate_policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCase<'a> {
    pub answerable: bool,
    pub decision: DecisionKind,
    /// What the retrieval-augmented generator answered.
    pub prediction: &'a str,
    /// Context-free answer for `ParametricAnswer` decisions.
    pub fallback_prediction: Option<&'a str>,
    pub golds: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitSide {
    /// Scores with every question answered by the generator.
    pub before: MetricRow,
    /// Scores after applying the decisions.
    pub after: MetricRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitReport {
    pub answerable: SplitSide,
    pub unanswerable: SplitSide,
    /// Percent of unanswerable sets answered with "unanswerable".
    pub unanswerable_classified: f64,
    /// Percent of answerable sets wrongly answered with "unanswerable".
    pub answerable_rejected: f64,
}

/// Scores the answerable (O) and unanswerable (X) sets separately. An
/// "unanswerable" response is wrong on O and right on X.
pub fn evaluate_policy(cases: &[PolicyCase<'_>]) -> Result<SplitReport> {
    let mut before = [Vec::new(), Vec::new()];
    let mut after = [Vec::new(), Vec::new()];
    let mut rejected = [0usize, 0usize];
    for c in cases {
        let side = usize::from(!c.answerable);
        let rag = AnswerScores::compute(c.prediction, c.golds);
        before[side].push(rag);
        let final_scores = match c.decision {
            DecisionKind::Answer => rag,
            DecisionKind::Unanswerable => {
                rejected[side] += 1;
                if c.answerable {
                    AnswerScores::WRONG
                } else {
                    AnswerScores::RIGHT
                }
            }
            DecisionKind::ParametricAnswer => {
                let p = c.fallback_prediction.ok_or_else(|| {
                    Error::InvalidArgument("ParametricAnswer decision without a fallback prediction".into())
                })?;
                AnswerScores::compute(p, c.golds)
            }
        };
        after[side].push(final_scores);
    }
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(SplitReport {
        answerable: SplitSide {
            before: MetricRow::aggregate(&before[0]),
            after: MetricRow::aggregate(&after[0]),
        },
        unanswerable: SplitSide {
            before: MetricRow::aggregate(&before[1]),
            after: MetricRow::aggregate(&after[1]),
        },
        unanswerable_classified: pct(rejected[1], before[1].len()),
        answerable_rejected: pct(rejected[0], before[0].len()),
    })
}
