use serde::{Deserialize, Serialize};

use crate::data::ScoredContext;
use crate::error::BackendError;

pub const DEFAULT_GENERATION_TEMPLATE: &str = "question: {question} context: {title}. {text}";

pub const DEFAULT_RELEVANCE_TEMPLATE: &str = "Does the context contain the answer to the question? \
Reply with exactly one word, true or false.\nquestion: {question} context: {title}. {text}";

pub const DEFAULT_PARAMETRIC_TEMPLATE: &str = "question: {question}";

/// A prompt with `{question}`, `{title}` and `{text}` placeholders and an
/// optional few-shot prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    #[serde(default)]
    pub few_shot_examples: Vec<(String, String)>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_GENERATION_TEMPLATE)
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            few_shot_examples: Vec::new(),
        }
    }

    pub fn with_few_shot(mut self, examples: Vec<(String, String)>) -> Self {
        self.few_shot_examples = examples;
        self
    }

    /// Renders against a single context, or no context at all.
    pub fn render(&self, question: &str, context: Option<&ScoredContext>) -> Result<String, BackendError> {
        let (title, text) = context.map_or(("", ""), |c| (c.title.as_str(), c.text.as_str()));
        let mut out = String::new();
        for (q, a) in &self.few_shot_examples {
            out.push_str(&format!("question: {q}\nanswer: {a}\n\n"));
        }
        out.push_str(&fill(&self.text, question, title, text)?);
        if !self.few_shot_examples.is_empty() {
            out.push_str("\nanswer:");
        }
        Ok(out)
    }

    /// Renders with several contexts concatenated into `{text}`, titles
    /// inlined, for concatenated-context prompting.
    pub fn render_concatenated(&self, question: &str, contexts: &[ScoredContext]) -> Result<String, BackendError> {
        let joined = contexts
            .iter()
            .map(|c| format!("{}. {}", c.title, c.text))
            .collect::<Vec<_>>()
            .join("\n");
        let merged = ScoredContext {
            id: String::new(),
            title: String::new(),
            text: joined,
            retriever_score: 0.0,
            rank: 0,
        };
        self.render(question, Some(&merged))
    }
}

fn fill(template: &str, question: &str, title: &str, text: &str) -> Result<String, BackendError> {
    let mut out = String::with_capacity(template.len() + question.len() + text.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| BackendError::Config(format!("unterminated placeholder in template {template:?}")))?;
        match &after[..close] {
            "question" => out.push_str(question),
            "title" => out.push_str(title),
            "text" => out.push_str(text),
            other => {
                return Err(BackendError::Config(format!("unknown placeholder {{{other}}} in template")));
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
