//! Prompt-driven evaluation and refinement loop.
//!
//! Each iteration asks the judge model for a yes/no verdict, a reasoned
//! verdict and a 1–10 hallucination score. The score alone decides whether
//! to stop or to request a rewrite. After the loop, the chosen text goes
//! through one more verdict and score as final verification.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatRequest, Gateway};
use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::summarize::{Method, Stage, Summary};
use crate::template::{has_placeholder, render};

/// Must appear verbatim in every refinement-catalog template.
pub const HALLUCINATION_DEFINITION: &str = "linguistically logical but contains details that are either not mentioned in the article or are factually inaccurate";

pub const VALIDATION_INSTRUCTION: &str = "Please determine whether the provided summary can be classified as 'hallucinated' or not by matching it with the appropriate article. Note that, 'hallucination' refers to a summary that is linguistically logical but contains details that are either not mentioned in the article or are factually inaccurate.";
pub const SCORING_INSTRUCTION: &str = "Score the following summary by the given corresponding article with respect to 'hallucination' from 1 to 10. Note that in this context, 'hallucination' refers to a summary that is linguistically logical but contains details that are either not mentioned in the article or are factually inaccurate. 10 points indicates that the summary is not hallucinated at all and 1 point indicates that the summary is fully hallucinated.";
pub const REFINEMENT_INSTRUCTION: &str = "Refine the summary and reduce 'hallucination' and try to achieve the score of 10 out of 10 for each summary. Note that in this context, 'hallucination' refers to a summary that is linguistically logical but contains details that are either not mentioned in the article or are factually inaccurate.";
pub const FINAL_VERIFICATION_INSTRUCTION: &str = "Final Verification: Re-evaluate the refined summaries to confirm the reduction of hallucinations. Repeat the evaluation process for the refined summaries to ensure that they meet the desired criteria of minimal hallucinations. A final round of evaluation confirms the effectiveness of the refinements in reducing hallucinations.";

pub const BASIC_ANSWER: &str = "Answer (yes or no)";
pub const DETAILED_ANSWER: &str =
    "Explain your reasoning step by step then answer the question (yes or no)";
pub const SCORING_ANSWER: &str = "Points";
pub const REFINEMENT_ANSWER: &str = "Refined Summary";

fn layout(instruction: &str, answer: &str) -> String {
    format!("{instruction}\n\nArticle:\n{{article}}\n\nSummary:\n{{summary}}\n\n{answer}:")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCatalog {
    pub basic_validation: String,
    pub detailed_analysis: String,
    pub scoring: String,
    pub refinement: String,
    pub final_verification: String,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        PromptCatalog {
            basic_validation: layout(VALIDATION_INSTRUCTION, BASIC_ANSWER),
            detailed_analysis: layout(VALIDATION_INSTRUCTION, DETAILED_ANSWER),
            scoring: layout(SCORING_INSTRUCTION, SCORING_ANSWER),
            refinement: layout(REFINEMENT_INSTRUCTION, REFINEMENT_ANSWER),
            final_verification: layout(
                &format!("{FINAL_VERIFICATION_INSTRUCTION}\n\n{VALIDATION_INSTRUCTION}"),
                BASIC_ANSWER,
            ),
        }
    }
}

impl PromptCatalog {
    pub fn templates(&self) -> [(&'static str, &str); 5] {
        [
            ("basic_validation", &self.basic_validation),
            ("detailed_analysis", &self.detailed_analysis),
            ("scoring", &self.scoring),
            ("refinement", &self.refinement),
            ("final_verification", &self.final_verification),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, template) in self.templates() {
            if !template.contains(HALLUCINATION_DEFINITION) {
                return Err(Error::Config(format!(
                    "prompt {name} must contain the hallucination definition"
                )));
            }
            for placeholder in ["article", "summary"] {
                if !has_placeholder(template, placeholder) {
                    return Err(Error::Config(format!(
                        "prompt {name} is missing {{{placeholder}}}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub hallucinated: bool,
    /// Only filled by the detailed (step-by-step) prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub raw: u8,
    /// The reply's number was outside 1..=10 and got clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TargetReached,
    MaxIters,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub input_text: String,
    pub verdict: Option<bool>,
    pub detailed_verdict: Option<bool>,
    pub reasoning: Option<String>,
    pub score_raw: Option<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub score_clamped: bool,
    pub refined_text: Option<String>,
    /// Chat calls issued during this iteration, re-asks included.
    pub chat_calls: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl IterationRecord {
    fn new(input_text: &str) -> Self {
        IterationRecord {
            input_text: input_text.to_string(),
            verdict: None,
            detailed_verdict: None,
            reasoning: None,
            score_raw: None,
            score_clamped: false,
            refined_text: None,
            chat_calls: 0,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalVerification {
    pub hallucinated: Option<bool>,
    pub score_raw: Option<u8>,
    pub chat_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub article_id: String,
    pub method: Method,
    pub iterations: Vec<IterationRecord>,
    /// Best-scoring iterate; ties go to the earliest.
    pub final_text: String,
    pub final_score: Option<u8>,
    pub terminated_by: Termination,
    pub final_verification: FinalVerification,
}

impl RefinementTrace {
    /// Chat calls implied by the trace.
    pub fn chat_calls(&self) -> u32 {
        self.iterations.iter().map(|r| r.chat_calls).sum::<u32>()
            + self.final_verification.chat_calls
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineSettings {
    pub target: u8,
    pub max_iters: u32,
    /// Extra attempts when a reply cannot be parsed.
    pub reask: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RefineSettings {
    fn default() -> Self {
        RefineSettings {
            target: 10,
            max_iters: 3,
            reask: 1,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// First standalone yes/no token.
pub fn parse_first_yes_no(reply: &str) -> Option<bool> {
    YES_NO
        .find(reply)
        .map(|m| m.as_str().eq_ignore_ascii_case("yes"))
}

/// Last standalone yes/no token plus the text before it.
pub fn parse_last_yes_no(reply: &str) -> Option<(bool, String)> {
    YES_NO.find_iter(reply).last().map(|m| {
        (
            m.as_str().eq_ignore_ascii_case("yes"),
            reply[..m.start()].trim().to_string(),
        )
    })
}

/// First integer in 1..=10; failing that, the first integer clamped.
pub fn parse_score(reply: &str) -> Option<Score> {
    let numbers: Vec<u64> = INTEGER
        .find_iter(reply)
        .map(|m| m.as_str().parse().unwrap_or(u64::MAX))
        .collect();
    if let Some(&n) = numbers.iter().find(|n| (1..=10).contains(*n)) {
        return Some(Score {
            raw: n as u8,
            clamped: false,
        });
    }
    numbers.first().map(|&n| Score {
        raw: n.clamp(1, 10) as u8,
        clamped: true,
    })
}

/// Trims, drops a leading "Refined Summary:" label and surrounding double
/// quotes.
pub fn clean_refinement(reply: &str) -> String {
    let mut text = reply.trim();
    let label = REFINEMENT_ANSWER.len();
    if text.len() > label
        && text.is_char_boundary(label)
        && text[..label].eq_ignore_ascii_case(REFINEMENT_ANSWER)
        && text[label..].starts_with(':')
    {
        text = text[label + 1..].trim();
    }
    if text.len() >= 2 && text.starts_with('"') && text.ends_with('"') {
        text = text[1..text.len() - 1].trim();
    }
    text.to_string()
}

struct Asked<T> {
    value: std::result::Result<T, String>,
    attempts: u32,
}

pub struct Refiner<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptCatalog,
    settings: &'a RefineSettings,
}

impl<'a> Refiner<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptCatalog, settings: &'a RefineSettings) -> Self {
        Refiner {
            gateway,
            prompts,
            settings,
        }
    }

    fn request(&self, template: &str, article: &Article, summary: &str) -> ChatRequest {
        let prompt = render(template, &[("article", &article.body), ("summary", summary)]);
        ChatRequest::new(prompt)
            .with_temperature(self.settings.temperature)
            .with_max_tokens(self.settings.max_tokens)
    }

    /// Asks, re-asking up to `reask` times when `parse` rejects the reply.
    /// Backend failures are hard errors; parse failures are returned softly.
    fn ask<T>(&self, req: &ChatRequest, parse: impl Fn(&str) -> Option<T>) -> Result<Asked<T>> {
        let mut last = String::new();
        for attempt in 1..=self.settings.reask + 1 {
            let reply = self.gateway.chat(req)?;
            if let Some(value) = parse(&reply.text) {
                return Ok(Asked {
                    value: Ok(value),
                    attempts: attempt,
                });
            }
            last = reply.text;
        }
        let head: String = last.chars().take(60).collect();
        Ok(Asked {
            value: Err(format!("unparseable reply {head:?}")),
            attempts: self.settings.reask + 1,
        })
    }

    fn basic(&self, template: &str, article: &Article, summary: &str) -> Result<Asked<Verdict>> {
        self.ask(&self.request(template, article, summary), |r| {
            parse_first_yes_no(r).map(|hallucinated| Verdict {
                hallucinated,
                reasoning: None,
            })
        })
    }

    fn detailed(&self, article: &Article, summary: &str) -> Result<Asked<Verdict>> {
        let req = self.request(&self.prompts.detailed_analysis, article, summary);
        self.ask(&req, |r| {
            parse_last_yes_no(r).map(|(hallucinated, reasoning)| Verdict {
                hallucinated,
                reasoning: Some(reasoning),
            })
        })
    }

    fn score(&self, article: &Article, summary: &str) -> Result<Asked<Score>> {
        let req = self.request(&self.prompts.scoring, article, summary);
        self.ask(&req, parse_score)
    }

    pub fn validate_basic(&self, article: &Article, summary: &str) -> Result<Verdict> {
        self.basic(&self.prompts.basic_validation, article, summary)?
            .value
            .map_err(Error::Parse)
    }

    pub fn validate_detailed(&self, article: &Article, summary: &str) -> Result<Verdict> {
        self.detailed(article, summary)?.value.map_err(Error::Parse)
    }

    pub fn score_hallucination(&self, article: &Article, summary: &str) -> Result<Score> {
        self.score(article, summary)?.value.map_err(Error::Parse)
    }

    pub fn refine_once(&self, article: &Article, text: &str) -> Result<String> {
        let req = self.request(&self.prompts.refinement, article, text);
        let reply = self.gateway.chat(&req)?;
        let cleaned = clean_refinement(&reply.text);
        if cleaned.is_empty() {
            return Err(Error::Generation(format!(
                "empty refinement for article {}",
                article.id
            )));
        }
        Ok(cleaned)
    }

    /// Score, stop at `target`, otherwise rewrite and score again, for at
    /// most `max_iters` iterations. Returns the best-scoring iterate.
    pub fn refine_loop(&self, article: &Article, summary: &Summary) -> Result<(Summary, RefinementTrace)> {
        let target = self.settings.target;
        if !(1..=10).contains(&target) {
            return Err(Error::Precondition(format!("target {target} outside 1..=10")));
        }
        if self.settings.max_iters == 0 {
            return Err(Error::Precondition("max_iters must be at least 1".into()));
        }

        let mut iterations = Vec::new();
        let mut text = summary.text.clone();
        let mut best: Option<(u8, String)> = None;
        let mut terminated_by = Termination::MaxIters;

        for iteration in 1..=self.settings.max_iters {
            let mut record = IterationRecord::new(&text);

            let basic = self.basic(&self.prompts.basic_validation, article, &text)?;
            record.chat_calls += basic.attempts;
            match basic.value {
                Ok(v) => record.verdict = Some(v.hallucinated),
                Err(e) => record.notes.push(format!("basic validation: {e}")),
            }

            let detailed = self.detailed(article, &text)?;
            record.chat_calls += detailed.attempts;
            match detailed.value {
                Ok(v) => {
                    record.detailed_verdict = Some(v.hallucinated);
                    record.reasoning = v.reasoning;
                }
                Err(e) => record.notes.push(format!("detailed analysis: {e}")),
            }

            let score = self.score(article, &text)?;
            record.chat_calls += score.attempts;
            let score = match score.value {
                Ok(s) => s,
                Err(e) => {
                    record.notes.push(format!("scoring: {e}"));
                    iterations.push(record);
                    terminated_by = Termination::ParseFailure;
                    break;
                }
            };
            record.score_raw = Some(score.raw);
            record.score_clamped = score.clamped;
            if best.as_ref().is_none_or(|(b, _)| score.raw > *b) {
                best = Some((score.raw, text.clone()));
            }

            if score.raw >= target {
                iterations.push(record);
                terminated_by = Termination::TargetReached;
                break;
            }
            if iteration == self.settings.max_iters {
                iterations.push(record);
                terminated_by = Termination::MaxIters;
                break;
            }

            record.chat_calls += 1;
            match self.refine_once(article, &text) {
                Ok(refined) => {
                    record.refined_text = Some(refined.clone());
                    iterations.push(record);
                    text = refined;
                }
                Err(Error::Generation(e)) => {
                    record.notes.push(e);
                    iterations.push(record);
                    terminated_by = Termination::ParseFailure;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let (final_score, final_text) = match best {
            Some((score, text)) => (Some(score), text),
            None => (None, summary.text.clone()),
        };

        let check = self.basic(&self.prompts.final_verification, article, &final_text)?;
        let rescore = self.score(article, &final_text)?;
        let final_verification = FinalVerification {
            hallucinated: check.value.ok().map(|v| v.hallucinated),
            score_raw: rescore.value.ok().map(|s| s.raw),
            chat_calls: check.attempts + rescore.attempts,
        };

        let mut refined = Summary::new(&article.id, summary.method, Stage::Refined, final_text.clone());
        refined.provenance = None;
        let trace = RefinementTrace {
            article_id: article.id.clone(),
            method: summary.method,
            iterations,
            final_text,
            final_score,
            terminated_by,
            final_verification,
        };
        Ok((refined, trace))
    }
}
