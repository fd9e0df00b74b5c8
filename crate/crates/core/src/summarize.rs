//! Extractive, abstractive and hybrid summary generation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatRequest, Gateway};
use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::filter::{cosine_slices, reduce_hallucination, EmbeddingCache, FilterOutcome};
use crate::template::render;

pub const DEFAULT_GENERATION_PROMPT: &str =
    "Summarize the following article in at most {n} sentences:\n\n{body}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Extractive,
    Abstractive,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Extractive, Method::Abstractive, Method::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Extractive => "extractive",
            Method::Abstractive => "abstractive",
            Method::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Unrefined,
    Refined,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Unrefined => "unrefined",
            Stage::Refined => "refined",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub article_id: String,
    pub method: Method,
    pub stage: Stage,
    pub text: String,
    /// Indices of the selected source sentences (extractive only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<usize>>,
    /// Set when the hybrid filter removed every word.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub emptied_by_filter: bool,
}

impl Summary {
    pub fn new(article_id: &str, method: Method, stage: Stage, text: String) -> Self {
        Summary {
            article_id: article_id.to_string(),
            method,
            stage,
            text,
            provenance: None,
            emptied_by_filter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummarizeSettings {
    pub k_sentences: usize,
    pub abstractive_sentences: usize,
    pub prompt: String,
    pub filter_threshold: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SummarizeSettings {
    fn default() -> Self {
        SummarizeSettings {
            k_sentences: 3,
            abstractive_sentences: 3,
            prompt: DEFAULT_GENERATION_PROMPT.to_string(),
            filter_threshold: crate::filter::DEFAULT_THRESHOLD,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// The three unrefined variants for one article, plus the filter record
/// produced while building the hybrid.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticleSummaries {
    pub extractive: Summary,
    pub abstractive: Summary,
    pub hybrid: Summary,
    pub filter: FilterOutcome,
}

impl ArticleSummaries {
    pub fn into_vec(self) -> Vec<Summary> {
        vec![self.extractive, self.abstractive, self.hybrid]
    }
}

pub struct Summarizer<'a> {
    gateway: &'a Gateway,
    settings: &'a SummarizeSettings,
    cache: &'a EmbeddingCache,
}

impl<'a> Summarizer<'a> {
    pub fn new(
        gateway: &'a Gateway,
        settings: &'a SummarizeSettings,
        cache: &'a EmbeddingCache,
    ) -> Self {
        Summarizer {
            gateway,
            settings,
            cache,
        }
    }

    /// Picks the `k` sentences closest (by cosine) to the centroid of all
    /// sentence embeddings, emitted in document order. Ties go to the
    /// earlier sentence.
    pub fn extractive(&self, article: &Article, k: usize) -> Result<Summary> {
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        let sentences = article.sentences();
        if sentences.is_empty() {
            return Err(Error::Precondition(format!(
                "article {} has no sentences",
                article.id
            )));
        }
        let selected: Vec<usize> = if sentences.len() <= k {
            (0..sentences.len()).collect()
        } else {
            let vectors = self.gateway.embed(&sentences.sentences)?;
            let dim = vectors[0].dim();
            let mut centroid = vec![0.0; dim];
            for v in &vectors {
                for (c, x) in centroid.iter_mut().zip(v.values()) {
                    *c += x;
                }
            }
            let n = vectors.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= n);
            let degenerate = centroid.iter().all(|c| *c == 0.0);
            let mut scored: Vec<(usize, f64)> = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let score = if degenerate {
                        0.0
                    } else {
                        cosine_slices(v.values(), &centroid)?
                    };
                    Ok((i, score))
                })
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut top: Vec<usize> = scored.into_iter().take(k).map(|(i, _)| i).collect();
            top.sort_unstable();
            top
        };
        let text = selected
            .iter()
            .map(|&i| sentences.sentences[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let mut summary = Summary::new(&article.id, Method::Extractive, Stage::Unrefined, text);
        summary.provenance = Some(selected);
        Ok(summary)
    }

    pub fn abstractive(&self, article: &Article) -> Result<Summary> {
        let n = self.settings.abstractive_sentences.to_string();
        let prompt = render(&self.settings.prompt, &[("n", &n), ("body", &article.body)]);
        let req = ChatRequest::new(prompt)
            .with_temperature(self.settings.temperature)
            .with_max_tokens(self.settings.max_tokens);
        let reply = self.gateway.chat(&req)?;
        let text = reply.text.trim();
        if text.is_empty() {
            return Err(Error::Generation(format!(
                "empty abstractive summary for article {}",
                article.id
            )));
        }
        Ok(Summary::new(
            &article.id,
            Method::Abstractive,
            Stage::Unrefined,
            text.to_string(),
        ))
    }

    pub fn hybrid(&self, article: &Article, k: usize) -> Result<Summary> {
        let extractive = self.extractive(article, k)?;
        let abstractive = self.abstractive(article)?;
        Ok(self.combine(article, &abstractive, &extractive)?.0)
    }

    /// Abstractive text, a space, the extractive text; then the word filter
    /// against the article body.
    pub fn combine(
        &self,
        article: &Article,
        abstractive: &Summary,
        extractive: &Summary,
    ) -> Result<(Summary, FilterOutcome)> {
        let merged = format!("{} {}", abstractive.text, extractive.text);
        let (text, outcome) = reduce_hallucination(
            self.gateway,
            &article.body,
            &merged,
            self.settings.filter_threshold,
            self.cache,
        )?;
        let mut summary = Summary::new(&article.id, Method::Hybrid, Stage::Unrefined, text);
        summary.emptied_by_filter = summary.text.is_empty();
        Ok((summary, outcome))
    }

    /// All three variants, sharing the extractive and abstractive work.
    pub fn all(&self, article: &Article) -> Result<ArticleSummaries> {
        let extractive = self.extractive(article, self.settings.k_sentences)?;
        let abstractive = self.abstractive(article)?;
        let (hybrid, filter) = self.combine(article, &abstractive, &extractive)?;
        Ok(ArticleSummaries {
            extractive,
            abstractive,
            hybrid,
            filter,
        })
    }
}
