//! Corpus ingestion and text normalization.
//!
//! The corpus is line-delimited JSON using the common CNN/Daily Mail export
//! field names (`id`, `article`, `highlights`). Bodies are normalized with
//! [`preprocess`] before they reach any model, and [`sentence_split`] gives
//! the rule-based segmentation used by extractive selection and
//! entailment scoring.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Abbreviations whose trailing period never ends a sentence. Also consulted
/// by the word tokenizer so that e.g. `U.S.` stays one token.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sr.", "Jr.", "St.", "Gen.", "Gov.", "Sen.", "Rep.",
    "Lt.", "Col.", "Capt.", "Sgt.", "U.S.", "U.K.", "U.N.", "E.U.", "D.C.", "vs.", "e.g.",
    "i.e.", "Jan.", "Feb.", "Aug.", "Sept.", "Oct.", "Nov.", "Dec.",
];

pub fn is_abbreviation(word: &str) -> bool {
    ABBREVIATIONS.contains(&word)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub body: String,
    /// Gold highlights; empty when the record has none.
    pub reference: String,
}

impl Article {
    /// Builds an article from raw text, normalizing both body and reference.
    pub fn new(id: impl Into<String>, body: &str, reference: &str) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::Validation("article id is empty".into()));
        }
        let body = preprocess(body)?;
        let reference = preprocess(reference).unwrap_or_default();
        Ok(Article {
            id,
            body,
            reference,
        })
    }

    pub fn sentences(&self) -> SentenceList {
        sentence_split(&self.body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SentenceList {
    pub sentences: Vec<String>,
    /// Byte offset of each sentence within the text it was split from.
    pub offsets: Vec<usize>,
}

impl SentenceList {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(String::as_str)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    article: Option<String>,
    highlights: Option<String>,
}

/// Reads up to `limit` articles, in file order.
///
/// Blank lines and lines whose first non-blank character is `#` are skipped.
/// Reading stops once `limit` articles have been collected.
pub fn load_corpus(path: &Path, limit: Option<usize>) -> Result<Vec<Article>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, limit)
}

pub fn parse_corpus(text: &str, limit: Option<usize>) -> Result<Vec<Article>> {
    let mut articles = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if limit.is_some_and(|n| articles.len() >= n) {
            break;
        }
        let line_no = idx + 1;
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Corpus {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        let missing = |field: &str| Error::Corpus {
            line: line_no,
            message: format!("missing field \"{field}\""),
        };
        let id = raw.id.ok_or_else(|| missing("id"))?;
        let body = raw.article.ok_or_else(|| missing("article"))?;
        let article = Article::new(id, &body, raw.highlights.as_deref().unwrap_or(""))
            .map_err(|e| Error::Corpus {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen.insert(article.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate article id {:?} on line {line_no}",
                article.id
            )));
        }
        articles.push(article);
    }
    Ok(articles)
}

/// SHA-256 of the corpus file bytes, hex encoded.
pub fn corpus_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Canonical composition, control characters dropped, whitespace collapsed
/// to single spaces and trimmed. Fails when nothing is left.
pub fn preprocess(raw: &str) -> Result<String> {
    let composed: String = clean(raw).nfc().collect();
    let out = clean(&composed);
    if out.is_empty() {
        return Err(Error::Validation("text is empty after pre-processing".into()));
    }
    Ok(out)
}

fn clean(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{2019}' | '\u{201D}')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '\u{2018}' | '\u{201C}')
}

/// Splits on `.`, `!` or `?` (plus any closing quotes) followed by whitespace
/// and an uppercase letter, or by end of text. A period that ends one of
/// [`ABBREVIATIONS`] is never a boundary.
pub fn sentence_split(text: &str) -> SentenceList {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut list = SentenceList::default();
    let mut start: Option<usize> = None;
    let mut i = 0;

    let push = |list: &mut SentenceList, from: usize, to: usize| {
        let piece = &text[from..to];
        let lead = piece.len() - piece.trim_start().len();
        let sentence = piece.trim();
        if !sentence.is_empty() {
            list.sentences.push(sentence.to_string());
            list.offsets.push(from + lead);
        }
    };

    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        // Extend over runs like "?!" and closing quotes.
        let mut j = i + 1;
        while j < chars.len() && (is_terminal(chars[j].1) || is_closer(chars[j].1)) {
            j += 1;
        }
        let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
        let from = start.unwrap_or(pos);

        if c == '.' && ends_with_abbreviation(&text[from..chars[i].0 + 1]) {
            i = j;
            continue;
        }

        let boundary = if j == chars.len() {
            true
        } else if chars[j].1.is_whitespace() {
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            while k < chars.len() && is_opener(chars[k].1) {
                k += 1;
            }
            k < chars.len() && chars[k].1.is_uppercase()
        } else {
            false
        };

        if boundary {
            push(&mut list, from, end);
            start = None;
        }
        i = j;
    }
    if let Some(from) = start {
        push(&mut list, from, text.len());
    }
    list
}

fn ends_with_abbreviation(prefix: &str) -> bool {
    let word = prefix
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or(prefix)
        .trim_start_matches(is_opener);
    is_abbreviation(word)
}
