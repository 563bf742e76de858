//! Browser bindings for the scoring, marginalization and threshold-search
//! routines. Every export takes and returns JSON text so the page needs no
//! generated glue beyond `wasm-bindgen`'s.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use rerag_core::data::{QuestionRecord, ScoredContext};
use rerag_core::marginalize::{marginalize, CandidateAnswer, Grouping, MarginalizedAnswer};
use rerag_core::policy::{threshold_search, ThresholdSweep, DEFAULT_GRID};
use rerag_core::scoring::{
    re_score, relevance_distribution, rerank_order, retriever_distribution, RelevanceJudgment, DEFAULT_CLAMP_EPS,
};

#[derive(Debug, Deserialize)]
struct JudgedContext {
    #[serde(default)]
    title: String,
    p_true: f64,
    p_false: f64,
    retriever_score: f64,
}

#[derive(Debug, Deserialize)]
struct WeightsInput {
    contexts: Vec<JudgedContext>,
}

#[derive(Debug, Serialize)]
struct WeightsOutput {
    re_scores: Vec<f64>,
    relevance_weights: Vec<f64>,
    retriever_weights: Vec<f64>,
    /// Context indices after reranking by relevance score.
    rerank_order: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct Candidate {
    text: String,
    seq_prob: f64,
}

#[derive(Debug, Deserialize)]
struct MarginalizeInput {
    candidates: Vec<Candidate>,
    weights: Vec<f64>,
    #[serde(default)]
    grouping: Grouping,
}

#[derive(Debug, Deserialize)]
struct SweepInput {
    confidences: Vec<f64>,
    unanswerable: Vec<bool>,
    grid: Option<Vec<f64>>,
}

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad input: {e}"))
}

fn render<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// `{contexts: [{p_true, p_false, retriever_score, title?}]}` to relevance
/// scores, both weight distributions and the reranked order.
#[wasm_bindgen]
pub fn context_weights(json: &str) -> Result<String, String> {
    let input: WeightsInput = parse(json)?;
    let re_scores = input
        .contexts
        .iter()
        .map(|c| re_score(RelevanceJudgment::new(c.p_true, c.p_false)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let relevance_weights = relevance_distribution(&re_scores, DEFAULT_CLAMP_EPS)
        .map_err(|e| e.to_string())?
        .weights;
    let retriever: Vec<f64> = input.contexts.iter().map(|c| c.retriever_score).collect();
    let retriever_weights = retriever_distribution(&retriever).map_err(|e| e.to_string())?;
    let record = QuestionRecord {
        id: String::new(),
        question: String::new(),
        gold_answers: Vec::new(),
        contexts: input
            .contexts
            .iter()
            .enumerate()
            .map(|(rank, c)| ScoredContext {
                id: rank.to_string(),
                title: c.title.clone(),
                text: String::new(),
                retriever_score: c.retriever_score,
                rank,
            })
            .collect(),
    };
    let order = rerank_order(&record, &re_scores).map_err(|e| e.to_string())?;
    render(&WeightsOutput {
        re_scores,
        relevance_weights,
        retriever_weights,
        rerank_order: order,
    })
}

/// `{candidates: [{text, seq_prob}], weights, grouping?}` to answers ranked
/// by marginal score. Candidate `i` is taken to come from context `i`.
#[wasm_bindgen]
pub fn marginalize_answers(json: &str) -> Result<String, String> {
    let input: MarginalizeInput = parse(json)?;
    let candidates: Vec<CandidateAnswer> = input
        .candidates
        .into_iter()
        .enumerate()
        .map(|(i, c)| CandidateAnswer {
            text: c.text,
            seq_prob: c.seq_prob,
            source_rank: i,
            seq_prob_available: true,
        })
        .collect();
    let answers: Vec<MarginalizedAnswer> =
        marginalize(&candidates, &input.weights, input.grouping).map_err(|e| e.to_string())?;
    render(&answers)
}

/// `{confidences, unanswerable, grid?}` to the per-threshold table and the
/// F1-maximizing threshold.
#[wasm_bindgen]
pub fn threshold_sweep(json: &str) -> Result<String, String> {
    let input: SweepInput = parse(json)?;
    let grid = input.grid.unwrap_or_else(|| DEFAULT_GRID.to_vec());
    let sweep: ThresholdSweep =
        threshold_search(&input.confidences, &input.unanswerable, &grid).map_err(|e| e.to_string())?;
    render(&sweep)
}
