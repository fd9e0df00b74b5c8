//! Run configuration: a TOML document with nested sections, overridable
//! from the command line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{
    mock_from_script, sha256_hex, Backend, Gateway, LiveBackend, LiveConfig, RetryPolicy,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricName, MetricPrompts, MetricSettings, RougeAgainst};
use crate::refine::{PromptCatalog, RefineSettings};
use crate::report::Format;
use crate::stats::DEFAULT_ALPHA;
use crate::summarize::{SummarizeSettings, DEFAULT_GENERATION_PROMPT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
    pub max_in_flight: usize,
    pub batch_size: usize,
    pub timeout_secs: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            mock_script: None,
            base_url: "https://api.openai.com".into(),
            chat_model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-3-small".into(),
            retries: 2,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            jitter: true,
            max_in_flight: 8,
            batch_size: 64,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeSection {
    pub k_sentences: usize,
    pub abstractive_sentences: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SummarizeSection {
    fn default() -> Self {
        SummarizeSection {
            k_sentences: 3,
            abstractive_sentences: 3,
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub threshold: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            threshold: crate::filter::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub target: u8,
    pub max_iters: u32,
    pub reask: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineSettings::default();
        RefineSection {
            target: d.target,
            max_iters: d.max_iters,
            reask: d.reask,
            temperature: d.temperature,
            max_tokens: d.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub enabled: Vec<MetricName>,
    pub rouge_against: RougeAgainst,
    pub qags_questions: usize,
    pub reask: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let d = MetricSettings::default();
        MetricsSection {
            enabled: d.enabled.into_iter().collect(),
            rouge_against: d.rouge_against,
            qags_questions: d.qags_questions,
            reask: d.reask,
            temperature: d.temperature,
            max_tokens: d.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub alpha: f64,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection { alpha: DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub workers: usize,
    pub dump_filter: bool,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            workers: 1,
            dump_filter: false,
            formats: Format::ALL.to_vec(),
        }
    }
}

/// Optional prompt overrides. Unset entries fall back to the built-in texts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    pub generation: Option<String>,
    pub basic_validation: Option<String>,
    pub detailed_analysis: Option<String>,
    pub scoring: Option<String>,
    pub refinement: Option<String>,
    pub final_verification: Option<String>,
    pub qags_questions: Option<String>,
    pub qags_answer: Option<String>,
    pub factsumm_triples: Option<String>,
    pub summac_entailment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the mock script's embedding seed. Nothing else is seeded.
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub backend: BackendSection,
    pub summarize: SummarizeSection,
    pub filter: FilterSection,
    pub refine: RefineSection,
    pub metrics: MetricsSection,
    pub stats: StatsSection,
    pub output: OutputSection,
    pub prompts: PromptsSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub limit: Option<usize>,
    pub backend: Option<BackendKind>,
    pub mock_script: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub dump_filter: bool,
    pub rouge_against: Option<RougeAgainst>,
    pub k_sentences: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.corpus.path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.backend.mock_script.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.corpus {
            self.corpus.path = Some(p.clone());
        }
        if o.limit.is_some() {
            self.corpus.limit = o.limit;
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(p) = &o.mock_script {
            self.backend.mock_script = Some(p.clone());
        }
        if let Some(p) = &o.out {
            self.output.dir = p.clone();
        }
        if let Some(w) = o.workers {
            self.output.workers = w;
        }
        if o.dump_filter {
            self.output.dump_filter = true;
        }
        if let Some(r) = o.rouge_against {
            self.metrics.rouge_against = r;
        }
        if let Some(k) = o.k_sentences {
            self.summarize.k_sentences = k;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.filter.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("filter threshold must be in (0, 1), got {t}")));
        }
        if !(1..=10).contains(&self.refine.target) {
            return Err(Error::Config(format!(
                "refine target must be in [1, 10], got {}",
                self.refine.target
            )));
        }
        if self.refine.max_iters == 0 {
            return Err(Error::Config("refine max_iters must be at least 1".into()));
        }
        if self.metrics.enabled.is_empty() {
            return Err(Error::Config("at least one metric must be enabled".into()));
        }
        if self.summarize.k_sentences == 0 {
            return Err(Error::Config("k_sentences must be at least 1".into()));
        }
        if self.summarize.abstractive_sentences == 0 {
            return Err(Error::Config("abstractive_sentences must be at least 1".into()));
        }
        if self.output.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.backend.max_in_flight == 0 || self.backend.batch_size == 0 {
            return Err(Error::Config("max_in_flight and batch_size must be positive".into()));
        }
        let a = self.stats.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {a}")));
        }
        if self.backend.kind == BackendKind::Mock && self.backend.mock_script.is_none() {
            return Err(Error::Config("mock backend needs a mock script".into()));
        }
        self.prompt_catalog().validate()?;
        Ok(())
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus path given".into()))
    }

    pub fn summarize_settings(&self) -> SummarizeSettings {
        SummarizeSettings {
            k_sentences: self.summarize.k_sentences,
            abstractive_sentences: self.summarize.abstractive_sentences,
            prompt: self
                .prompts
                .generation
                .clone()
                .unwrap_or_else(|| DEFAULT_GENERATION_PROMPT.to_string()),
            filter_threshold: self.filter.threshold,
            temperature: self.summarize.temperature,
            max_tokens: self.summarize.max_tokens,
        }
    }

    pub fn refine_settings(&self) -> RefineSettings {
        RefineSettings {
            target: self.refine.target,
            max_iters: self.refine.max_iters,
            reask: self.refine.reask,
            temperature: self.refine.temperature,
            max_tokens: self.refine.max_tokens,
        }
    }

    pub fn metric_settings(&self) -> MetricSettings {
        MetricSettings {
            enabled: self.metrics.enabled.iter().copied().collect(),
            rouge_against: self.metrics.rouge_against,
            qags_questions: self.metrics.qags_questions,
            reask: self.metrics.reask,
            temperature: self.metrics.temperature,
            max_tokens: self.metrics.max_tokens,
        }
    }

    pub fn prompt_catalog(&self) -> PromptCatalog {
        let mut c = PromptCatalog::default();
        let p = &self.prompts;
        for (slot, over) in [
            (&mut c.basic_validation, &p.basic_validation),
            (&mut c.detailed_analysis, &p.detailed_analysis),
            (&mut c.scoring, &p.scoring),
            (&mut c.refinement, &p.refinement),
            (&mut c.final_verification, &p.final_verification),
        ] {
            if let Some(text) = over {
                *slot = text.clone();
            }
        }
        c
    }

    pub fn metric_prompts(&self) -> MetricPrompts {
        let mut m = MetricPrompts::default();
        let p = &self.prompts;
        for (slot, over) in [
            (&mut m.qags_questions, &p.qags_questions),
            (&mut m.qags_answer, &p.qags_answer),
            (&mut m.factsumm_triples, &p.factsumm_triples),
            (&mut m.summac_entailment, &p.summac_entailment),
        ] {
            if let Some(text) = over {
                *slot = text.clone();
            }
        }
        m
    }

    pub fn formats(&self) -> BTreeSet<Format> {
        self.output.formats.iter().copied().collect()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.backend.retries,
            base_delay: Duration::from_millis(self.backend.base_delay_ms),
            max_delay: Duration::from_millis(self.backend.max_delay_ms),
            jitter: self.backend.jitter,
        }
    }

    /// Builds the backend described by the config, without probing it.
    pub fn build_backend(&self) -> Result<Arc<dyn Backend>> {
        match self.backend.kind {
            BackendKind::Mock => {
                let path = self
                    .backend
                    .mock_script
                    .as_deref()
                    .ok_or_else(|| Error::Config("mock backend needs a mock script".into()))?;
                let mut mock = mock_from_script(path)?;
                if let Some(seed) = self.seed {
                    mock = mock.with_seed(seed);
                }
                Ok(Arc::new(mock))
            }
            BackendKind::Live => Ok(Arc::new(LiveBackend::new(
                LiveConfig {
                    base_url: self.backend.base_url.clone(),
                    chat_model: self.backend.chat_model.clone(),
                    embedding_model: self.backend.embedding_model.clone(),
                    api_key: None,
                    timeout: Duration::from_secs(self.backend.timeout_secs),
                }
                .with_env_key(),
            ))),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        Ok(Gateway::new(self.build_backend()?)
            .with_retry(self.retry_policy())
            .with_max_in_flight(self.backend.max_in_flight)
            .with_batch_size(self.backend.batch_size))
    }

    /// Digest of everything that can influence results. Output placement and
    /// worker count are excluded; input files enter by content digest, not
    /// by path.
    pub fn config_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        if let Some(p) = &self.corpus.path {
            canonical.corpus.path = Some(PathBuf::from(file_digest(p)?));
        }
        match (&self.backend.kind, &self.backend.mock_script) {
            (BackendKind::Mock, Some(p)) => {
                canonical.backend.mock_script = Some(PathBuf::from(file_digest(p)?));
            }
            _ => canonical.backend.mock_script = None,
        }
        let json = serde_json::to_string(&canonical)?;
        Ok(sha256_hex(json.as_bytes()))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
