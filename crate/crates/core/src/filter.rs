//! Word-level hallucination filter.
//!
//! Every summary word is embedded and compared against every word of the
//! source text; a word survives only when its best cosine similarity is
//! strictly above the threshold (0.5 by default). Survivors are joined with
//! single spaces, so punctuation is not restored.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{EmbeddingVector, Gateway};
use crate::corpus::is_abbreviation;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    /// Lowercase form of each token.
    pub normalized: Vec<String>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedToken {
    pub token: String,
    pub max_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedToken>,
    pub threshold: f64,
}

/// Splits on whitespace and punctuation, discarding the punctuation. Known
/// abbreviations such as `U.S.` are kept whole.
pub fn tokenize(text: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let core = chunk
            .trim_start_matches(|c: char| !c.is_alphanumeric())
            .trim_end_matches(|c: char| !c.is_alphanumeric() && c != '.');
        if is_abbreviation(core) {
            tokens.push(core.to_string());
            continue;
        }
        tokens.extend(
            chunk
                .split(|c: char| !c.is_alphanumeric())
                .filter(|piece| !piece.is_empty())
                .map(str::to_string),
        );
    }
    let normalized = tokens.iter().map(|t| t.to_lowercase()).collect();
    TokenizedText { tokens, normalized }
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Computation {
            tag: "dim_mismatch",
            message: format!("cannot compare vectors of dim {} and {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::Computation {
            tag: "zero_norm",
            message: "cosine of a zero vector".into(),
        });
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-run cache of word embeddings keyed by normalized token.
#[derive(Default)]
pub struct EmbeddingCache {
    vectors: Mutex<HashMap<String, EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embeds every token not yet cached in a single gateway call.
    fn fill<'a>(&self, gateway: &Gateway, tokens: impl Iterator<Item = &'a String>) -> Result<()> {
        let missing: Vec<String> = {
            let cached = self.vectors.lock().unwrap();
            tokens
                .filter(|t| !cached.contains_key(*t))
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        if missing.is_empty() {
            return Ok(());
        }
        let vectors = gateway.embed(&missing)?;
        let mut cached = self.vectors.lock().unwrap();
        for (token, vector) in missing.into_iter().zip(vectors) {
            cached.entry(token).or_insert(vector);
        }
        Ok(())
    }

    fn get(&self, token: &str) -> Option<EmbeddingVector> {
        self.vectors.lock().unwrap().get(token).cloned()
    }
}

pub fn reduce_hallucination(
    gateway: &Gateway,
    original_text: &str,
    summary: &str,
    threshold: f64,
    cache: &EmbeddingCache,
) -> Result<(String, FilterOutcome)> {
    if original_text.trim().is_empty() {
        return Err(Error::Precondition("original text is empty".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let summary_words = tokenize(summary);
    let mut outcome = FilterOutcome {
        kept: Vec::new(),
        dropped: Vec::new(),
        threshold,
    };
    if summary_words.is_empty() {
        return Ok((String::new(), outcome));
    }
    let original_words = tokenize(original_text);
    if original_words.is_empty() {
        return Err(Error::Precondition("original text has no words".into()));
    }

    cache.fill(
        gateway,
        original_words
            .normalized
            .iter()
            .chain(summary_words.normalized.iter()),
    )?;
    let lookup = |token: &str| {
        cache.get(token).ok_or_else(|| Error::Computation {
            tag: "cache_miss",
            message: format!("no embedding for {token:?}"),
        })
    };
    let distinct: BTreeSet<&String> = original_words.normalized.iter().collect();
    let original_embeddings = distinct
        .into_iter()
        .map(|t| lookup(t))
        .collect::<Result<Vec<_>>>()?;

    for (token, norm) in summary_words.tokens.iter().zip(&summary_words.normalized) {
        let word_embedding = lookup(norm)?;
        let mut best = f64::NEG_INFINITY;
        for other in &original_embeddings {
            best = best.max(cosine(&word_embedding, other)?);
        }
        if best > threshold {
            outcome.kept.push(token.clone());
        } else {
            outcome.dropped.push(DroppedToken {
                token: token.clone(),
                max_similarity: best,
            });
        }
    }
    Ok((outcome.kept.join(" "), outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn vec(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("The cat, sat.");
        assert_eq!(t.tokens, ["The", "cat", "sat"]);
        assert_eq!(t.normalized, ["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("U.S. economy").tokens, ["U.S.", "economy"]);
        assert_eq!(tokenize("(Mr. Smith's) \"dog\"").tokens, ["Mr.", "Smith", "s", "dog"]);
    }

    #[test]
    fn cosine_examples() {
        let v = vec(&[0.3, -1.2, 4.0]);
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine(&vec(&[1.0, 0.0]), &vec(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&vec(&[1.0, 1.0]), &vec(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine(&vec(&[1.0]), &vec(&[1.0, 0.0])),
            Err(Error::Computation { tag: "dim_mismatch", .. })
        ));
        assert!(matches!(
            cosine_slices(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Computation { tag: "zero_norm", .. })
        ));
    }

    fn mock_gateway(vectors: BTreeMap<String, Vec<f64>>, dim: usize) -> Gateway {
        let script = MockScript {
            embedding_dim: dim,
            vectors,
            ..MockScript::default()
        };
        Gateway::new(Arc::new(MockBackend::from_script(script).unwrap()))
    }

    #[test]
    fn verbatim_words_survive() {
        let gw = mock_gateway(BTreeMap::new(), 64);
        let (text, outcome) = reduce_hallucination(
            &gw,
            "the cat sat on the mat",
            "the cat sat",
            DEFAULT_THRESHOLD,
            &EmbeddingCache::new(),
        )
        .unwrap();
        assert_eq!(text, "the cat sat");
        assert!(outcome.dropped.is_empty());
    }

    #[test]
    fn empty_summary_is_not_an_error() {
        let gw = mock_gateway(BTreeMap::new(), 8);
        let (text, outcome) =
            reduce_hallucination(&gw, "source", "", 0.5, &EmbeddingCache::new()).unwrap();
        assert_eq!(text, "");
        assert!(outcome.kept.is_empty() && outcome.dropped.is_empty());
    }

    #[test]
    fn orthogonal_word_is_dropped() {
        let mut pinned = BTreeMap::new();
        for (word, v) in [
            ("the", [1.0, 0.0, 0.0, 0.0]),
            ("cat", [0.0, 1.0, 0.0, 0.0]),
            ("sat", [0.0, 0.0, 1.0, 0.0]),
            ("zebra", [0.0, 0.0, 0.0, 1.0]),
        ] {
            pinned.insert(word.to_string(), v.to_vec());
        }
        let gw = mock_gateway(pinned, 4);
        let (text, outcome) = reduce_hallucination(
            &gw,
            "the cat sat",
            "the zebra sat",
            0.5,
            &EmbeddingCache::new(),
        )
        .unwrap();
        assert_eq!(text, "the sat");
        assert_eq!(
            outcome.dropped,
            [DroppedToken {
                token: "zebra".into(),
                max_similarity: 0.0
            }]
        );
    }

    #[test]
    fn threshold_is_strict() {
        let mut pinned = BTreeMap::new();
        // cos(60°) = 0.5 exactly between "a" and "b".
        pinned.insert("a".to_string(), vec![1.0, 0.0]);
        pinned.insert("b".to_string(), vec![0.5, 3f64.sqrt() / 2.0]);
        let gw = mock_gateway(pinned, 2);
        let cache = EmbeddingCache::new();
        let (_, outcome) = reduce_hallucination(&gw, "a", "b", 0.5, &cache).unwrap();
        let sim = outcome.dropped.first().map(|d| d.max_similarity);
        // Either dropped at ≤ 0.5, or the rounding landed above 0.5.
        match sim {
            Some(s) => assert!(s <= 0.5),
            None => {
                let direct = cosine_slices(&[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]).unwrap();
                assert!(direct > 0.5);
            }
        }
        let (kept, _) = reduce_hallucination(&gw, "a", "b", 0.4, &cache).unwrap();
        assert_eq!(kept, "b");
    }

    #[test]
    fn cache_reuses_embeddings() {
        let gw = mock_gateway(BTreeMap::new(), 16);
        let cache = EmbeddingCache::new();
        reduce_hallucination(&gw, "one two three", "two four", 0.5, &cache).unwrap();
        assert_eq!(cache.len(), 4);
        reduce_hallucination(&gw, "one two three", "two", 0.5, &cache).unwrap();
        assert_eq!(gw.call_count(crate::backend::CallKind::Embed), 1);
    }

    #[test]
    fn preconditions() {
        let gw = mock_gateway(BTreeMap::new(), 8);
        let cache = EmbeddingCache::new();
        assert!(matches!(
            reduce_hallucination(&gw, " ", "x", 0.5, &cache),
            Err(Error::Precondition(_))
        ));
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(
                reduce_hallucination(&gw, "x", "x", bad, &cache),
                Err(Error::Precondition(_))
            ));
        }
    }
}
