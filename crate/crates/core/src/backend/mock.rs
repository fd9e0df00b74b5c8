//! Scripted, fully deterministic backend used for offline runs and tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest};
use crate::error::{Error, Result};
use crate::filter::tokenize;

const PROMPT_HEAD_CHARS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub is_regex: bool,
    pub replies: Vec<String>,
}

impl MockRule {
    pub fn contains(pattern: &str, replies: &[&str]) -> Self {
        MockRule {
            pattern: pattern.into(),
            is_regex: false,
            replies: replies.iter().map(|r| r.to_string()).collect(),
        }
    }

    pub fn regex(pattern: &str, replies: &[&str]) -> Self {
        MockRule {
            is_regex: true,
            ..MockRule::contains(pattern, replies)
        }
    }
}

/// Script document. `vectors` optionally pins the embedding of specific
/// normalized tokens, which lets fixtures engineer exact cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub embedding_dim: usize,
    pub seed: u64,
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            embedding_dim: 64,
            seed: 0,
            rules: Vec::new(),
            vectors: BTreeMap::new(),
        }
    }
}

enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    fn is_match(&self, prompt: &str) -> bool {
        match self {
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

struct CompiledRule {
    matcher: Matcher,
    replies: Vec<String>,
}

/// Chat replies come from the first rule whose pattern matches the prompt.
/// A rule's replies are consumed in call order; once exhausted its last
/// reply repeats. Embeddings are sums of per-token seeded-hash unit vectors,
/// renormalized, so identical token sequences always embed identically.
pub struct MockBackend {
    rules: Vec<CompiledRule>,
    cursors: Mutex<Vec<usize>>,
    dim: usize,
    seed: u64,
    vectors: BTreeMap<String, Vec<f64>>,
}

pub fn mock_from_script(path: &Path) -> Result<MockBackend> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let script: MockScript = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("mock script {}: {e}", path.display())))?;
    MockBackend::from_script(script)
}

impl MockBackend {
    pub fn from_script(script: MockScript) -> Result<Self> {
        if script.embedding_dim == 0 {
            return Err(Error::Config("mock embedding_dim must be positive".into()));
        }
        let mut rules = Vec::with_capacity(script.rules.len());
        for (i, rule) in script.rules.into_iter().enumerate() {
            if rule.replies.is_empty() {
                return Err(Error::Config(format!("mock rule {i} has no replies")));
            }
            let matcher = if rule.is_regex {
                Matcher::Pattern(
                    Regex::new(&rule.pattern)
                        .map_err(|e| Error::Config(format!("mock rule {i}: {e}")))?,
                )
            } else {
                Matcher::Substring(rule.pattern)
            };
            rules.push(CompiledRule {
                matcher,
                replies: rule.replies,
            });
        }
        let mut vectors = BTreeMap::new();
        for (token, values) in script.vectors {
            if values.len() != script.embedding_dim {
                return Err(Error::Config(format!(
                    "pinned vector for {token:?} has dim {}, expected {}",
                    values.len(),
                    script.embedding_dim
                )));
            }
            vectors.insert(token.to_lowercase(), values);
        }
        Ok(MockBackend {
            cursors: Mutex::new(vec![0; rules.len()]),
            rules,
            dim: script.embedding_dim,
            seed: script.seed,
            vectors,
        })
    }

    /// Replaces the script's embedding seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit vector for one normalized token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(pinned) = self.vectors.get(token) {
            return unit(pinned.clone());
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let raw = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        unit(raw)
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text).normalized;
        if tokens.is_empty() {
            return self.token_vector(&text.trim().to_lowercase());
        }
        let mut sum = vec![0.0; self.dim];
        for token in &tokens {
            for (acc, v) in sum.iter_mut().zip(self.token_vector(token)) {
                *acc += v;
            }
        }
        unit(sum)
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock(dim={},seed={})", self.dim, self.seed)
    }

    fn chat(&self, req: &ChatRequest) -> Result<String> {
        // Held across match and consume so consumption order equals call order.
        let mut cursors = self.cursors.lock().unwrap();
        let Some(idx) = self.rules.iter().position(|r| r.matcher.is_match(&req.user)) else {
            return Err(Error::Unscripted {
                head: req.user.chars().take(PROMPT_HEAD_CHARS).collect(),
            });
        };
        let rule = &self.rules[idx];
        let pos = cursors[idx].min(rule.replies.len() - 1);
        cursors[idx] += 1;
        Ok(rule.replies[pos].clone())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Gateway;
    use crate::filter::cosine;
    use std::sync::Arc;

    fn gateway(rules: Vec<MockRule>) -> Gateway {
        let script = MockScript {
            rules,
            ..MockScript::default()
        };
        Gateway::new(Arc::new(MockBackend::from_script(script).unwrap()))
    }

    #[test]
    fn first_matching_rule_wins() {
        let gw = gateway(vec![
            MockRule::contains("hallucinated", &["yes"]),
            MockRule::contains("", &["fallback"]),
        ]);
        let ask = |p: &str| gw.chat(&ChatRequest::new(p)).unwrap().text;
        assert_eq!(ask("is this hallucinated?"), "yes");
        assert_eq!(ask("something else"), "fallback");
    }

    #[test]
    fn replies_are_consumed_in_sequence() {
        let gw = gateway(vec![MockRule::contains(
            "Score the following summary",
            &["7", "10"],
        )]);
        let ask = || gw.chat(&ChatRequest::new("Score the following summary")).unwrap().text;
        assert_eq!(ask(), "7");
        assert_eq!(ask(), "10");
        assert_eq!(ask(), "10");
    }

    #[test]
    fn regex_rules_and_unscripted_prompts() {
        let gw = gateway(vec![MockRule::regex(r"^Q\d+:", &["numbered"])]);
        assert_eq!(gw.chat(&ChatRequest::new("Q12: hi")).unwrap().text, "numbered");
        match gw.chat(&ChatRequest::new("Nothing matches this prompt")) {
            Err(Error::Unscripted { head }) => assert_eq!(head, "Nothing matches this prompt"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_scripts_are_config_errors() {
        let bad_regex = MockScript {
            rules: vec![MockRule::regex("(", &["x"])],
            ..MockScript::default()
        };
        assert!(matches!(MockBackend::from_script(bad_regex), Err(Error::Config(_))));
        let no_replies = MockScript {
            rules: vec![MockRule::contains("x", &[])],
            ..MockScript::default()
        };
        assert!(matches!(MockBackend::from_script(no_replies), Err(Error::Config(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        fs::write(&path, "{\"embedding_dim\": 8}").unwrap();
        assert!(matches!(mock_from_script(&path), Err(Error::Config(_))));
        fs::write(
            &path,
            r#"{"embedding_dim": 8, "seed": 3, "rules": [{"match": "a", "is_regex": false, "replies": ["b"]}]}"#,
        )
        .unwrap();
        let mock = mock_from_script(&path).unwrap();
        assert_eq!(mock.dim(), 8);
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let gw = gateway(vec![]);
        let v = gw.embed(&["cat".into(), "cat".into(), "dog".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(cosine(&v[0], &v[1]).unwrap(), 1.0);
        let c = cosine(&v[0], &v[2]).unwrap();
        assert!((-1.0..=1.0).contains(&c));
        assert!((v[2].norm() - 1.0).abs() < 1e-12);
        // case-insensitive: tokens are normalized first
        let upper = gw.embed(&["Cat".into()]).unwrap();
        assert_eq!(upper[0], v[0]);
    }

    #[test]
    fn seed_changes_vectors() {
        let a = MockBackend::from_script(MockScript::default()).unwrap();
        let b = MockBackend::from_script(MockScript::default()).unwrap().with_seed(9);
        assert_ne!(a.token_vector("cat"), b.token_vector("cat"));
        assert_eq!(a.token_vector("cat"), a.token_vector("cat"));
    }

    #[test]
    fn pinned_vectors_override_hashing() {
        let mut vectors = BTreeMap::new();
        vectors.insert("Zebra".to_string(), vec![0.0, 2.0]);
        let mock = MockBackend::from_script(MockScript {
            embedding_dim: 2,
            vectors,
            ..MockScript::default()
        })
        .unwrap();
        assert_eq!(mock.token_vector("zebra"), vec![0.0, 1.0]);
    }
}
