//! Retrieved-context datasets in the DPR / FiD-KD release layout.
//!
//! Input files are a JSON array of
//! `{"question", "answers": [..], "ctxs": [{"id"?, "title", "text", "score"}]}`
//! objects. Context order in the file is the retriever's rank order and is
//! preserved until a caller explicitly reranks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// One retrieved passage together with its retriever similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContext {
    pub id: String,
    pub title: String,
    pub text: String,
    pub retriever_score: f64,
    /// 0-based position in the retriever's original list.
    pub rank: usize,
}

/// A question, its gold answer aliases and its retrieved context list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub contexts: Vec<ScoredContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_questions: usize,
    pub mean_contexts: f64,
    pub min_contexts: usize,
    pub max_contexts: usize,
    /// Fraction of records where at least one context contains a gold answer.
    pub answerable_fraction: f64,
}

/// Reads a dataset file, keeping at most `max_contexts` contexts per record
/// (taken from the head of the list).
pub fn load_dataset(path: impl AsRef<Path>, max_contexts: Option<usize>) -> Result<Vec<QuestionRecord>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&raw, max_contexts)
}

/// Parses dataset JSON text. See [`load_dataset`].
pub fn parse_dataset(json: &str, max_contexts: Option<usize>) -> Result<Vec<QuestionRecord>> {
    let value: Value = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(Error::Parse("top-level value must be an array of records".into()));
    };
    items
        .iter()
        .enumerate()
        .map(|(index, item)| parse_record(index, item, max_contexts))
        .collect()
}

fn parse_record(index: usize, item: &Value, max_contexts: Option<usize>) -> Result<QuestionRecord> {
    let err = |message: String| Error::Record { index, message };
    let obj = item
        .as_object()
        .ok_or_else(|| err("record is not an object".into()))?;

    let question = obj
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| err("missing string field `question`".into()))?
        .to_string();

    let answers = obj
        .get("answers")
        .and_then(Value::as_array)
        .ok_or_else(|| err("missing array field `answers`".into()))?;
    let gold_answers = answers
        .iter()
        .map(|a| a.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| err("`answers` must contain only strings".into()))?;
    if gold_answers.is_empty() {
        return Err(err("`answers` is empty".into()));
    }

    let ctxs = obj
        .get("ctxs")
        .and_then(Value::as_array)
        .ok_or_else(|| err("missing array field `ctxs`".into()))?;
    let keep = max_contexts.unwrap_or(usize::MAX).min(ctxs.len());
    let contexts = ctxs[..keep]
        .iter()
        .enumerate()
        .map(|(rank, c)| parse_context(rank, c).map_err(|m| err(format!("ctxs[{rank}]: {m}"))))
        .collect::<Result<Vec<_>>>()?;

    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    };

    Ok(QuestionRecord {
        id,
        question,
        gold_answers,
        contexts,
    })
}

fn parse_context(rank: usize, value: &Value) -> std::result::Result<ScoredContext, String> {
    let obj = value.as_object().ok_or("context is not an object")?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or("missing string field `text`")?
        .to_string();
    let title = match obj.get("title") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("`title` must be a string".into()),
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => rank.to_string(),
    };
    let retriever_score = match obj.get("score") {
        Some(Value::Number(n)) => n.as_f64().ok_or("`score` is not representable")?,
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("`score` string {s:?} is not a number"))?,
        _ => return Err("missing field `score`".into()),
    };
    if !retriever_score.is_finite() {
        return Err(format!("`score` {retriever_score} is not finite"));
    }
    Ok(ScoredContext {
        id,
        title,
        text,
        retriever_score,
        rank,
    })
}

#[derive(Serialize)]
struct FileRecord<'a> {
    id: &'a str,
    question: &'a str,
    answers: &'a [String],
    ctxs: Vec<FileContext<'a>>,
}

#[derive(Serialize)]
struct FileContext<'a> {
    id: &'a str,
    title: &'a str,
    text: &'a str,
    score: f64,
}

/// Serializes records back into the input file layout, in their current
/// context order.
pub fn dataset_to_json(records: &[QuestionRecord]) -> Result<String> {
    let out: Vec<FileRecord<'_>> = records
        .iter()
        .map(|r| FileRecord {
            id: &r.id,
            question: &r.question,
            answers: &r.gold_answers,
            ctxs: r
                .contexts
                .iter()
                .map(|c| FileContext {
                    id: &c.id,
                    title: &c.title,
                    text: &c.text,
                    score: c.retriever_score,
                })
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&out).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[QuestionRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_json(records)?).map_err(|e| Error::io(path, e))
}

/// Characters removed during answer normalization: every code point in the
/// Unicode punctuation categories (Pc, Pd, Ps, Pe, Pi, Pf, Po) plus the ASCII
/// symbols `$ + < = > ^ ` | ~` that SQuAD-style scripts also strip.
pub fn is_stripped_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation, drop the articles "a"/"an"/"the" as whole
/// words, and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|&c| !is_stripped_punctuation(c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff the normalized context contains any normalized gold answer.
pub fn contains_gold<S: AsRef<str>>(context_text: &str, gold_answers: &[S]) -> bool {
    let haystack = normalize_answer(context_text);
    contains_any_normalized(&haystack, gold_answers)
}

pub(crate) fn contains_any_normalized<S: AsRef<str>>(normalized_haystack: &str, gold_answers: &[S]) -> bool {
    gold_answers
        .iter()
        .any(|g| normalized_haystack.contains(&normalize_answer(g.as_ref())))
}

impl ScoredContext {
    /// Title and body as one string, the form gold-containment is checked on.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

impl QuestionRecord {
    /// Whether any of the first `k` contexts contains a gold answer.
    pub fn has_gold_in_top(&self, k: usize) -> bool {
        self.contexts
            .iter()
            .take(k)
            .any(|c| contains_gold(&c.text, &self.gold_answers))
    }
}

pub fn dataset_stats(dataset: &[QuestionRecord]) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let counts: Vec<usize> = dataset.iter().map(|r| r.contexts.len()).collect();
    let answerable = dataset
        .iter()
        .filter(|r| r.has_gold_in_top(usize::MAX))
        .count();
    Ok(DatasetStats {
        n_questions: dataset.len(),
        mean_contexts: counts.iter().sum::<usize>() as f64 / dataset.len() as f64,
        min_contexts: counts.iter().copied().min().unwrap_or(0),
        max_contexts: counts.iter().copied().max().unwrap_or(0),
        answerable_fraction: answerable as f64 / dataset.len() as f64,
    })
}
