//! Per-context answer generation and weighted aggregation of the answers
//! into a ranked list (RAG-sequence style).
//!
//! The weighting is supplied by the caller, so the same code serves both the
//! retriever softmax and the relevance distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{GenerationRequest, GeneratorBackend, PromptTemplate};
use crate::data::{normalize_answer, ScoredContext};
use crate::error::{BackendError, Error, Result};
use crate::par::parallel_map;

/// Tolerance when checking that weights form a distribution.
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub text: String,
    /// P_G(text | question, context).
    pub seq_prob: f64,
    /// Index of the generating context within the generation set.
    pub source_rank: usize,
    /// False when the backend reported no probability and 1.0 was assumed.
    pub seq_prob_available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalizedAnswer {
    pub text: String,
    pub score: f64,
    /// `(context index, weight * P_G)` pairs, by context index.
    pub supporting_contexts: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Identical after trimming surrounding whitespace.
    #[default]
    Exact,
    /// Identical after answer normalization.
    Normalized,
}

impl Grouping {
    pub fn key(self, text: &str) -> String {
        match self {
            Grouping::Exact => text.trim().to_string(),
            Grouping::Normalized => normalize_answer(text),
        }
    }
}

/// Candidates in context order plus the contexts whose generation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<CandidateAnswer>,
    pub failures: Vec<(usize, BackendError)>,
}

/// One generation call per context, reassembled in context order.
pub fn generate_candidates(
    question: &str,
    contexts: &[ScoredContext],
    generator: &dyn GeneratorBackend,
    template: &PromptTemplate,
    max_in_flight: usize,
) -> Result<CandidateSet> {
    if contexts.is_empty() {
        return Err(Error::Empty("context list"));
    }
    let results = parallel_map(contexts.len(), max_in_flight, |j| {
        let request = GenerationRequest {
            question: question.to_string(),
            contexts: vec![contexts[j].clone()],
            prompt: template.render(question, Some(&contexts[j]))?,
        };
        generator.generate(&request)
    });
    let mut set = CandidateSet {
        candidates: Vec::with_capacity(contexts.len()),
        failures: Vec::new(),
    };
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(g) => set.candidates.push(CandidateAnswer {
                text: g.text,
                seq_prob: g.seq_prob.unwrap_or(1.0),
                source_rank: j,
                seq_prob_available: g.seq_prob.is_some(),
            }),
            Err(e) => {
                log::warn!("generation failed for context {j}: {e}");
                set.failures.push((j, e));
            }
        }
    }
    if set.candidates.is_empty() {
        let (_, first) = set.failures.swap_remove(0);
        return Err(Error::Backend(first));
    }
    Ok(set)
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            what: "weights vs candidates",
            left: weights.len(),
            right: n,
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

struct Group {
    text: String,
    contributions: Vec<(usize, f64)>,
}

fn finish(groups: BTreeMap<String, Group>) -> Vec<MarginalizedAnswer> {
    let mut out: Vec<MarginalizedAnswer> = groups
        .into_values()
        .map(|mut g| {
            // Summing in context order makes the result independent of the
            // order candidates were supplied in.
            g.contributions.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            MarginalizedAnswer {
                text: g.text,
                score: g.contributions.iter().map(|c| c.1).sum(),
                supporting_contexts: g.contributions,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
    out
}

fn add_to_group(groups: &mut BTreeMap<String, Group>, key: String, text: &str, contribution: (usize, f64)) {
    let text = text.trim();
    let g = groups.entry(key).or_insert_with(|| Group {
        text: text.to_string(),
        contributions: Vec::new(),
    });
    if text < g.text.as_str() {
        g.text = text.to_string();
    }
    g.contributions.push(contribution);
}

/// Fast decoding: each candidate contributes `weight * seq_prob` to its own
/// group only; a context that did not generate an answer adds nothing to it.
///
/// `weights[i]` belongs to `candidates[i]`.
pub fn marginalize(
    candidates: &[CandidateAnswer],
    weights: &[f64],
    grouping: Grouping,
) -> Result<Vec<MarginalizedAnswer>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    check_weights(weights, candidates.len())?;
    let mut groups = BTreeMap::new();
    for (c, &w) in candidates.iter().zip(weights) {
        add_to_group(&mut groups, grouping.key(&c.text), &c.text, (c.source_rank, w * c.seq_prob));
    }
    Ok(finish(groups))
}

/// Thorough decoding: every distinct candidate is scored by the generator
/// under every context, `score(y) = Σ_j w_j · P_G(y | q, c_j)`.
///
/// `weights[j]` belongs to `contexts[j]`.
pub fn marginalize_thorough(
    question: &str,
    candidates: &[CandidateAnswer],
    contexts: &[ScoredContext],
    weights: &[f64],
    generator: &dyn GeneratorBackend,
    template: &PromptTemplate,
    grouping: Grouping,
) -> Result<Vec<MarginalizedAnswer>> {
    if !generator.supports_scoring() {
        return Err(Error::Backend(BackendError::Capability {
            backend: generator.identity(),
            capability: "answer scoring".into(),
        }));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    check_weights(weights, contexts.len())?;

    let mut distinct: BTreeMap<String, String> = BTreeMap::new();
    for c in candidates {
        let text = c.text.trim();
        let entry = distinct.entry(grouping.key(text)).or_insert_with(|| text.to_string());
        if text < entry.as_str() {
            *entry = text.to_string();
        }
    }

    let mut groups = BTreeMap::new();
    for (j, ctx) in contexts.iter().enumerate() {
        let request = GenerationRequest {
            question: question.to_string(),
            contexts: vec![ctx.clone()],
            prompt: template.render(question, Some(ctx))?,
        };
        for (key, text) in &distinct {
            let p = generator.score(&request, text)?.exp();
            add_to_group(&mut groups, key.clone(), text, (j, weights[j] * p));
        }
    }
    Ok(finish(groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockGenerator;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn cand(text: &str, seq_prob: f64, source_rank: usize) -> CandidateAnswer {
        CandidateAnswer {
            text: text.into(),
            seq_prob,
            source_rank,
            seq_prob_available: true,
        }
    }

    fn ctx(rank: usize, text: &str) -> ScoredContext {
        ScoredContext {
            id: rank.to_string(),
            title: format!("title {rank}"),
            text: text.into(),
            retriever_score: 0.0,
            rank,
        }
    }

    /// Dictionary accumulation, written independently of `marginalize`.
    fn oracle(cands: &[CandidateAnswer], weights: &[f64]) -> HashMap<String, f64> {
        let mut acc = HashMap::new();
        for (c, w) in cands.iter().zip(weights) {
            *acc.entry(c.text.trim().to_string()).or_insert(0.0) += w * c.seq_prob;
        }
        acc
    }

    #[test]
    fn total_mass_single_answer() {
        let out = marginalize(&[cand("A", 1.0, 0), cand("A", 1.0, 1)], &[0.7, 0.3], Grouping::Exact).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_grouping_case() {
        let c = [cand("A", 1.0, 0), cand("B", 1.0, 1), cand("A", 1.0, 2)];
        let out = marginalize(&c, &[0.5, 0.3, 0.2], Grouping::Exact).unwrap();
        assert_eq!(out[0].text, "A");
        assert!((out[0].score - 0.7).abs() < 1e-12);
        assert_eq!(out[1].text, "B");
        assert!((out[1].score - 0.3).abs() < 1e-12);
        assert_eq!(out[0].supporting_contexts.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn seq_probs_weight_contributions() {
        let out = marginalize(&[cand("A", 0.8, 0), cand("A", 0.5, 1)], &[0.7, 0.3], Grouping::Exact).unwrap();
        assert!((out[0].score - 0.71).abs() < 1e-12);
    }

    #[test]
    fn ties_are_lexicographic() {
        let out = marginalize(&[cand("b", 1.0, 0), cand("a", 1.0, 1)], &[0.5, 0.5], Grouping::Exact).unwrap();
        assert_eq!(out[0].text, "a");
    }

    #[test]
    fn normalized_grouping_merges_surface_forms() {
        let c = [cand("The Beatles", 1.0, 0), cand("beatles.", 1.0, 1), cand("Stones", 1.0, 2)];
        let exact = marginalize(&c, &[0.3, 0.3, 0.4], Grouping::Exact).unwrap();
        assert_eq!(exact[0].text, "Stones");
        let norm = marginalize(&c, &[0.3, 0.3, 0.4], Grouping::Normalized).unwrap();
        assert_eq!(norm[0].text, "The Beatles");
        assert!((norm[0].score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(marginalize(&[], &[], Grouping::Exact), Err(Error::Empty(_))));
        assert!(matches!(
            marginalize(&[cand("A", 1.0, 0)], &[0.5, 0.5], Grouping::Exact),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(marginalize(&[cand("A", 1.0, 0)], &[0.5], Grouping::Exact).is_err());
    }

    #[test]
    fn generate_three_in_order() {
        let g = MockGenerator::new(11);
        let ctxs = vec![ctx(0, "<<x>>"), ctx(1, "<<y>>"), ctx(2, "none")];
        let set = generate_candidates("q", &ctxs, &g, &PromptTemplate::default(), 1).unwrap();
        let texts: Vec<_> = set.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["x", "y", "title 2"]);
        assert!(set.failures.is_empty());
        let par = generate_candidates("q", &ctxs, &g, &PromptTemplate::default(), 3).unwrap();
        assert_eq!(set, par);
    }

    #[test]
    fn missing_seq_prob_defaults_to_one() {
        let g = MockGenerator::new(11).without_seq_prob();
        let ctxs = vec![ctx(0, "<<x>>"), ctx(1, "<<y>>")];
        let set = generate_candidates("q", &ctxs, &g, &PromptTemplate::default(), 1).unwrap();
        assert!(set.candidates.iter().all(|c| c.seq_prob == 1.0 && !c.seq_prob_available));
    }

    #[test]
    fn seeded_mock_is_reproducible() {
        let ctxs = vec![ctx(0, "<<x>>"), ctx(1, "plain")];
        let a = generate_candidates("q", &ctxs, &MockGenerator::new(9), &PromptTemplate::default(), 1).unwrap();
        let b = generate_candidates("q", &ctxs, &MockGenerator::new(9), &PromptTemplate::default(), 2).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn thorough_matches_fast_when_every_context_agrees() {
        let g = MockGenerator::new(4);
        let t = PromptTemplate::default();
        let ctxs = vec![ctx(0, "a <<A>>"), ctx(1, "b <<A>>"), ctx(2, "c <<A>>")];
        let set = generate_candidates("q", &ctxs, &g, &t, 1).unwrap();
        let w = [0.5, 0.3, 0.2];
        let fast = marginalize(&set.candidates, &w, Grouping::Exact).unwrap();
        let thorough = marginalize_thorough("q", &set.candidates, &ctxs, &w, &g, &t, Grouping::Exact).unwrap();
        assert_eq!(fast.len(), 1);
        assert_eq!(thorough.len(), 1);
        assert!((fast[0].score - thorough[0].score).abs() < 1e-12);
    }

    #[test]
    fn thorough_matches_pairwise_double_sum() {
        let g = MockGenerator::new(21);
        let t = PromptTemplate::default();
        let ctxs = vec![ctx(0, "<<A>> and B"), ctx(1, "<<B>>"), ctx(2, "nothing here")];
        let set = generate_candidates("q", &ctxs, &g, &t, 1).unwrap();
        let w = [0.2, 0.5, 0.3];
        let out = marginalize_thorough("q", &set.candidates, &ctxs, &w, &g, &t, Grouping::Exact).unwrap();
        for answer in &out {
            let mut expected = 0.0;
            for (j, c) in ctxs.iter().enumerate() {
                let req = GenerationRequest {
                    question: "q".into(),
                    contexts: vec![c.clone()],
                    prompt: t.render("q", Some(c)).unwrap(),
                };
                expected += w[j] * g.score(&req, &answer.text).unwrap().exp();
            }
            assert!((answer.score - expected).abs() < 1e-12);
        }
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn thorough_single_context() {
        let g = MockGenerator::new(2);
        let t = PromptTemplate::default();
        let ctxs = vec![ctx(0, "<<A>>")];
        let set = generate_candidates("q", &ctxs, &g, &t, 1).unwrap();
        let out = marginalize_thorough("q", &set.candidates, &ctxs, &[1.0], &g, &t, Grouping::Exact).unwrap();
        assert!((out[0].score - set.candidates[0].seq_prob).abs() < 1e-12);
        let no_scoring = MockGenerator::new(2).without_scoring();
        assert!(matches!(
            marginalize_thorough("q", &set.candidates, &ctxs, &[1.0], &no_scoring, &t, Grouping::Exact),
            Err(Error::Backend(BackendError::Capability { .. }))
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<CandidateAnswer>, Vec<f64>)> {
        (1usize..=5).prop_flat_map(|n| {
            (
                prop::collection::vec((0usize..4, 0.01f64..=1.0), n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(pairs, raw)| {
                    let total: f64 = raw.iter().sum();
                    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
                    let cands = pairs
                        .into_iter()
                        .enumerate()
                        .map(|(j, (a, p))| cand(["A", "B", "C", "D"][a], p, j))
                        .collect();
                    (cands, weights)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_accumulation_oracle((cands, weights) in instance()) {
            let out = marginalize(&cands, &weights, Grouping::Exact).unwrap();
            let expected = oracle(&cands, &weights);
            prop_assert_eq!(out.len(), expected.len());
            for a in &out {
                prop_assert!((a.score - expected[&a.text]).abs() <= 1e-12);
                let contrib: f64 = a.supporting_contexts.iter().map(|c| c.1).sum();
                prop_assert!((a.score - contrib).abs() <= 1e-9);
            }
            let total: f64 = out.iter().map(|a| a.score).sum();
            prop_assert!(total <= 1.0 + 1e-12);
        }

        #[test]
        fn permutation_invariant((cands, weights) in instance(), rot in 0usize..5) {
            let n = cands.len();
            let k = rot % n;
            let mut pc = cands.clone();
            let mut pw = weights.clone();
            pc.rotate_left(k);
            pw.rotate_left(k);
            prop_assert_eq!(
                marginalize(&cands, &weights, Grouping::Exact).unwrap(),
                marginalize(&pc, &pw, Grouping::Exact).unwrap()
            );
        }

        #[test]
        fn unit_seq_probs_conserve_mass((cands, weights) in instance()) {
            let ones: Vec<_> = cands.iter().map(|c| CandidateAnswer { seq_prob: 1.0, ..c.clone() }).collect();
            let total: f64 = marginalize(&ones, &weights, Grouping::Exact).unwrap().iter().map(|a| a.score).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
