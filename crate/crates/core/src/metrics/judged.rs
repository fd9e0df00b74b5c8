//! Faithfulness metrics mediated by the chat model: the hallucination score,
//! question answering agreement, fact-triple support and sentence-level
//! entailment.

use std::collections::{BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::MetricSettings;
use crate::backend::{ChatRequest, Gateway};
use crate::corpus::{sentence_split, Article};
use crate::error::{Error, Result};
use crate::refine::Refiner;
use crate::template::render;

pub const QAGS_QUESTIONS_PROMPT: &str = "Write up to {n} short factoid questions that can be answered using only the summary below. Output one question per line and nothing else.\n\nSummary:\n{summary}\n\nQuestions:";
pub const QAGS_ANSWER_PROMPT: &str = "Answer the question using only the text below. Reply with a short phrase taken from the text, or with \"unanswerable\" if the text does not contain the answer.\n\nText:\n{context}\n\nQuestion: {question}\n\nAnswer:";
pub const FACTSUMM_PROMPT: &str = "Extract the facts stated in the text below as (subject, relation, object) triples. Output one JSON object per line with the string keys \"subject\", \"relation\" and \"object\", and nothing else. Output nothing if the text states no facts.\n\nText:\n{text}\n\nTriples:";
pub const SUMMAC_PROMPT: &str = "Does the premise entail the hypothesis? Reply with only a number between 0 and 1: the probability that the hypothesis is true given the premise.\n\nPremise:\n{premise}\n\nHypothesis:\n{hypothesis}\n\nProbability:";

pub const UNANSWERABLE: &str = "unanswerable";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricPrompts {
    pub qags_questions: String,
    pub qags_answer: String,
    pub factsumm_triples: String,
    pub summac_entailment: String,
}

impl Default for MetricPrompts {
    fn default() -> Self {
        MetricPrompts {
            qags_questions: QAGS_QUESTIONS_PROMPT.into(),
            qags_answer: QAGS_ANSWER_PROMPT.into(),
            factsumm_triples: FACTSUMM_PROMPT.into(),
            summac_entailment: SUMMAC_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    /// Lowercased, whitespace-collapsed fields with edge punctuation removed.
    /// `None` when a field ends up empty.
    pub fn normalized(subject: &str, relation: &str, object: &str) -> Option<Self> {
        let norm = |s: &str| {
            s.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        };
        let triple = Triple {
            subject: norm(subject),
            relation: norm(relation),
            object: norm(object),
        };
        (!triple.subject.is_empty() && !triple.relation.is_empty() && !triple.object.is_empty())
            .then_some(triple)
    }
}

/// Score plus a diagnostic payload for the scorecard.
pub type Scored = (f64, Value);

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+(?:\.\d+)?|\.\d+)\s*(%)?").unwrap());
static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:[-*•]\s*|\(?[0-9]+[.):]\s*|[Qq][0-9]*[.:)]\s*)").unwrap());

/// First number in the reply, read as a probability; percentages are
/// scaled. Values outside [0, 1] are rejected.
pub fn parse_probability(reply: &str) -> Option<f64> {
    let caps = NUMBER.captures(reply)?;
    let mut value: f64 = caps[1].parse().ok()?;
    if caps.get(2).is_some() {
        value /= 100.0;
    }
    (0.0..=1.0).contains(&value).then_some(value)
}

/// One question per non-empty line, list markers stripped.
pub fn parse_questions(reply: &str, limit: usize) -> Vec<String> {
    reply
        .lines()
        .map(|l| LIST_MARKER.replace(l.trim(), "").trim().to_string())
        .filter(|l| !l.is_empty())
        .take(limit)
        .collect()
}

/// Triples from JSON lines (or one JSON array). `None` if any non-blank line
/// is not a triple object.
pub fn parse_triples(reply: &str) -> Option<BTreeSet<Triple>> {
    #[derive(Deserialize)]
    struct RawTriple {
        subject: String,
        relation: String,
        object: String,
    }
    let trimmed = reply.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return Some(BTreeSet::new());
    }
    let raw: Vec<RawTriple> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).ok()?
    } else {
        trimmed
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with("```"))
            .map(|l| serde_json::from_str(l).ok())
            .collect::<Option<_>>()?
    };
    Some(
        raw.iter()
            .filter_map(|t| Triple::normalized(&t.subject, &t.relation, &t.object))
            .collect(),
    )
}

fn answer_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Bag-of-tokens F1 between two short answers, ignoring case, punctuation
/// and English articles.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta = answer_tokens(a);
    let tb = answer_tokens(b);
    if ta.is_empty() || tb.is_empty() {
        return if ta == tb { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &ta {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / ta.len() as f64;
    let r = overlap as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

fn is_unanswerable(answer: &str) -> bool {
    answer_tokens(answer).iter().any(|t| t == UNANSWERABLE)
}

pub(super) struct Judge<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a MetricPrompts,
    pub settings: &'a MetricSettings,
    pub refiner: &'a Refiner<'a>,
}

impl Judge<'_> {
    fn chat(&self, prompt: String) -> Result<String> {
        let req = ChatRequest::new(prompt)
            .with_temperature(self.settings.temperature)
            .with_max_tokens(self.settings.max_tokens);
        Ok(self.gateway.chat(&req)?.text)
    }

    fn chat_parsed<T>(&self, prompt: String, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        let mut last = String::new();
        for _ in 0..=self.settings.reask {
            last = self.chat(prompt.clone())?;
            if let Some(v) = parse(&last) {
                return Ok(v);
            }
        }
        let head: String = last.chars().take(60).collect();
        Err(Error::Parse(format!("unparseable reply {head:?}")))
    }

    /// Hallucination score 1..=10 mapped to [0, 1] by (s − 1) / 9.
    pub fn gpt(&self, article: &Article, summary: &str) -> Result<Scored> {
        let score = self.refiner.score_hallucination(article, summary)?;
        Ok((
            gpt_scale(score.raw),
            json!({"raw": score.raw, "clamped": score.clamped}),
        ))
    }

    pub fn qags(&self, article: &Article, summary: &str) -> Result<Scored> {
        let n = self.settings.qags_questions;
        if n == 0 {
            return Err(Error::Precondition("qags needs at least one question".into()));
        }
        let prompt = render(
            &self.prompts.qags_questions,
            &[("n", &n.to_string()), ("summary", summary)],
        );
        let questions = parse_questions(&self.chat(prompt)?, n);
        if questions.is_empty() {
            return Err(Error::Parse("no questions generated".into()));
        }
        let mut per_question = Vec::with_capacity(questions.len());
        for question in &questions {
            let ask = |context: &str| {
                self.chat(render(
                    &self.prompts.qags_answer,
                    &[("context", context), ("question", question)],
                ))
            };
            let from_article = ask(&article.body)?;
            let from_summary = ask(summary)?;
            let score = if is_unanswerable(&from_article) {
                0.0
            } else {
                token_f1(from_article.trim(), from_summary.trim())
            };
            per_question.push(json!({
                "question": question,
                "article_answer": from_article.trim(),
                "summary_answer": from_summary.trim(),
                "f1": score,
            }));
        }
        let mean = per_question
            .iter()
            .map(|q| q["f1"].as_f64().unwrap_or(0.0))
            .sum::<f64>()
            / per_question.len() as f64;
        Ok((mean, json!({ "questions": per_question })))
    }

    pub fn factsumm(&self, article: &Article, summary: &str) -> Result<Scored> {
        let extract = |text: &str| {
            self.chat_parsed(
                render(&self.prompts.factsumm_triples, &[("text", text)]),
                parse_triples,
            )
        };
        let summary_triples = extract(summary)?;
        if summary_triples.is_empty() {
            return Ok((1.0, json!({"summary_triples": 0, "vacuous": true})));
        }
        let article_triples = extract(&article.body)?;
        let matched = summary_triples.intersection(&article_triples).count();
        Ok((
            matched as f64 / summary_triples.len() as f64,
            json!({
                "summary_triples": summary_triples.len(),
                "article_triples": article_triples.len(),
                "matched": matched,
                "vacuous": false,
            }),
        ))
    }

    /// Max entailment over article sentences, averaged over summary sentences.
    pub fn summac(&self, article: &Article, summary: &str) -> Result<Scored> {
        let premises = article.sentences();
        let hypotheses = sentence_split(summary);
        if hypotheses.is_empty() {
            return Err(Error::Precondition("summary has no sentences".into()));
        }
        let mut maxima = Vec::with_capacity(hypotheses.len());
        for hypothesis in hypotheses.iter() {
            let mut best = 0.0f64;
            for premise in premises.iter() {
                let prompt = render(
                    &self.prompts.summac_entailment,
                    &[("premise", premise), ("hypothesis", hypothesis)],
                );
                best = best.max(self.chat_parsed(prompt, parse_probability)?);
            }
            maxima.push(best);
        }
        let mean = maxima.iter().sum::<f64>() / maxima.len() as f64;
        Ok((mean, json!({ "sentence_scores": maxima })))
    }
}

pub fn gpt_scale(raw: u8) -> f64 {
    (f64::from(raw.clamp(1, 10)) - 1.0) / 9.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_parsing() {
        assert_eq!(parse_probability("0.85"), Some(0.85));
        assert_eq!(parse_probability("Probability: 1"), Some(1.0));
        assert_eq!(parse_probability("about 70%"), Some(0.7));
        assert_eq!(parse_probability(".5"), Some(0.5));
        assert_eq!(parse_probability("high"), None);
        assert_eq!(parse_probability("7"), None);
    }

    #[test]
    fn question_parsing() {
        let reply = "1. Who won?\n\n2) When was it?\n- Where?\nQ4: Why?\n";
        assert_eq!(
            parse_questions(reply, 10),
            ["Who won?", "When was it?", "Where?", "Why?"]
        );
        assert_eq!(parse_questions(reply, 2).len(), 2);
        assert!(parse_questions("  \n ", 3).is_empty());
    }

    #[test]
    fn triple_parsing() {
        let reply = "```\n{\"subject\": \"The Mayor\", \"relation\": \"opened\", \"object\": \"the bridge.\"}\n```";
        let triples = parse_triples(reply).unwrap();
        assert_eq!(
            triples.into_iter().collect::<Vec<_>>(),
            [Triple {
                subject: "the mayor".into(),
                relation: "opened".into(),
                object: "the bridge".into()
            }]
        );
        let array = r#"[{"subject":"a","relation":"b","object":"c"},{"subject":"a","relation":"b","object":"c"}]"#;
        assert_eq!(parse_triples(array).unwrap().len(), 1);
        assert_eq!(parse_triples("").unwrap().len(), 0);
        assert_eq!(parse_triples("None").unwrap().len(), 0);
        assert!(parse_triples("the mayor opened a bridge").is_none());
        let blank_field = r#"{"subject":"!","relation":"b","object":"c"}"#;
        assert_eq!(parse_triples(blank_field).unwrap().len(), 0);
    }

    #[test]
    fn answer_f1() {
        assert_eq!(token_f1("Paris", "paris."), 1.0);
        assert_eq!(token_f1("The Eiffel Tower", "eiffel tower"), 1.0);
        assert_eq!(token_f1("Paris", "unanswerable"), 0.0);
        // {new, york, city} vs {new, york}: p = 2/3, r = 1, f1 = 0.8
        assert!((token_f1("New York City", "New York") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("the", "a"), 1.0);
        assert_eq!(token_f1("the", "x"), 0.0);
    }

    #[test]
    fn gpt_mapping() {
        assert_eq!(gpt_scale(10), 1.0);
        assert_eq!(gpt_scale(1), 0.0);
        assert!((gpt_scale(7) - 2.0 / 3.0).abs() < 1e-12);
    }
}
