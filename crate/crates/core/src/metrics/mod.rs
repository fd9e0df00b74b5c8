//! Scorecard metrics. Every score is normalized to [0, 1].

mod judged;
mod rouge;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::Gateway;
use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::refine::Refiner;
use crate::summarize::{Method, Stage, Summary};

pub use judged::{
    gpt_scale, parse_probability, parse_questions, parse_triples, token_f1, MetricPrompts, Triple,
    FACTSUMM_PROMPT, QAGS_ANSWER_PROMPT, QAGS_QUESTIONS_PROMPT, SUMMAC_PROMPT, UNANSWERABLE,
};
pub use rouge::{lcs_len, rouge_l, rouge_n, rouge_tokens, RougeScore};

/// Declaration order is the reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "factsumm")]
    FactSumm,
    #[serde(rename = "qags")]
    Qags,
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "summac")]
    SummaC,
    #[serde(rename = "gpt")]
    Gpt,
}

impl MetricName {
    pub const ALL: [MetricName; 7] = [
        MetricName::FactSumm,
        MetricName::Qags,
        MetricName::Rouge1,
        MetricName::Rouge2,
        MetricName::RougeL,
        MetricName::SummaC,
        MetricName::Gpt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::FactSumm => "factsumm",
            MetricName::Qags => "qags",
            MetricName::Rouge1 => "rouge1",
            MetricName::Rouge2 => "rouge2",
            MetricName::RougeL => "rougeL",
            MetricName::SummaC => "summac",
            MetricName::Gpt => "gpt",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeAgainst {
    #[default]
    Reference,
    Article,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSettings {
    pub enabled: BTreeSet<MetricName>,
    pub rouge_against: RougeAgainst,
    pub qags_questions: usize,
    pub reask: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            enabled: MetricName::ALL.into_iter().collect(),
            rouge_against: RougeAgainst::Reference,
            qags_questions: 5,
            reask: 1,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub article_id: String,
    pub method: Method,
    pub stage: Stage,
    pub scores: BTreeMap<MetricName, f64>,
    pub details: BTreeMap<MetricName, Value>,
}

pub struct Evaluator<'a> {
    gateway: &'a Gateway,
    prompts: &'a MetricPrompts,
    settings: &'a MetricSettings,
    refiner: &'a Refiner<'a>,
}

impl<'a> Evaluator<'a> {
    /// The `gpt` metric reuses the refiner's scoring prompt.
    pub fn new(
        gateway: &'a Gateway,
        prompts: &'a MetricPrompts,
        settings: &'a MetricSettings,
        refiner: &'a Refiner<'a>,
    ) -> Self {
        Evaluator {
            gateway,
            prompts,
            settings,
            refiner,
        }
    }

    fn judge(&self) -> judged::Judge<'_> {
        judged::Judge {
            gateway: self.gateway,
            prompts: self.prompts,
            settings: self.settings,
            refiner: self.refiner,
        }
    }

    pub fn gpt_metric(&self, article: &Article, summary: &Summary) -> Result<f64> {
        self.judge().gpt(article, &summary.text).map(|s| s.0)
    }

    pub fn qags_metric(&self, article: &Article, summary: &Summary) -> Result<f64> {
        self.judge().qags(article, &summary.text).map(|s| s.0)
    }

    pub fn factsumm_metric(&self, article: &Article, summary: &Summary) -> Result<f64> {
        self.judge().factsumm(article, &summary.text).map(|s| s.0)
    }

    pub fn summac_metric(&self, article: &Article, summary: &Summary) -> Result<f64> {
        self.judge().summac(article, &summary.text).map(|s| s.0)
    }

    fn rouge_target<'t>(&self, article: &'t Article) -> Result<&'t str> {
        let target = match self.settings.rouge_against {
            RougeAgainst::Reference => &article.reference,
            RougeAgainst::Article => &article.body,
        };
        if target.is_empty() {
            return Err(Error::Precondition(format!(
                "article {} has no reference highlights",
                article.id
            )));
        }
        Ok(target)
    }

    fn score_one(&self, metric: MetricName, article: &Article, summary: &Summary) -> Result<(f64, Value)> {
        let rouge = |score: RougeScore| {
            (
                score.f1,
                json!({"precision": score.precision, "recall": score.recall, "f1": score.f1}),
            )
        };
        let text = summary.text.as_str();
        match metric {
            MetricName::Rouge1 => Ok(rouge(rouge_n(text, self.rouge_target(article)?, 1))),
            MetricName::Rouge2 => Ok(rouge(rouge_n(text, self.rouge_target(article)?, 2))),
            MetricName::RougeL => Ok(rouge(rouge_l(text, self.rouge_target(article)?))),
            MetricName::Gpt => self.judge().gpt(article, text),
            MetricName::Qags => self.judge().qags(article, text),
            MetricName::FactSumm => self.judge().factsumm(article, text),
            MetricName::SummaC => self.judge().summac(article, text),
        }
    }

    /// Runs every metric in `enabled`. A metric whose replies cannot be used
    /// is left out of `scores` and its error is recorded under `details`;
    /// backend failures abort the whole card.
    pub fn evaluate_all(
        &self,
        article: &Article,
        summary: &Summary,
        enabled: &BTreeSet<MetricName>,
    ) -> Result<ScoreCard> {
        if enabled.is_empty() {
            return Err(Error::Precondition("no metrics enabled".into()));
        }
        let mut card = ScoreCard {
            article_id: summary.article_id.clone(),
            method: summary.method,
            stage: summary.stage,
            scores: BTreeMap::new(),
            details: BTreeMap::new(),
        };
        for &metric in enabled {
            match self.score_one(metric, article, summary) {
                Ok((score, detail)) => {
                    card.scores.insert(metric, score.clamp(0.0, 1.0));
                    card.details.insert(metric, detail);
                }
                Err(e) if e.is_backend_failure() => return Err(e),
                Err(e) => {
                    log::debug!("{metric} unavailable for {}: {e}", summary.article_id);
                    card.details.insert(metric, json!({"unavailable": e.to_string()}));
                }
            }
        }
        Ok(card)
    }

    pub fn evaluate(&self, article: &Article, summary: &Summary) -> Result<ScoreCard> {
        self.evaluate_all(article, summary, &self.settings.enabled)
    }
}
