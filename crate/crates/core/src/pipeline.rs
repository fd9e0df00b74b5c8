//! The end-to-end run and its stages. Each stage reads the previous stage's
//! line-delimited JSON from the output directory and writes its own, so a
//! staged execution produces the same files as a full run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::Gateway;
use crate::config::RunConfig;
use crate::corpus::{corpus_digest, load_corpus, Article};
use crate::error::{Error, Result};
use crate::filter::{EmbeddingCache, FilterOutcome};
use crate::metrics::{Evaluator, MetricPrompts, MetricSettings, ScoreCard};
use crate::refine::{PromptCatalog, RefineSettings, RefinementTrace, Refiner};
use crate::report::{build_report, emit, RunReport};
use crate::summarize::{Stage, SummarizeSettings, Summarizer, Summary};

pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const FILTER_FILE: &str = "filter.jsonl";
pub const REFINED_FILE: &str = "refined.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const SCORECARDS_FILE: &str = "scorecards.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub article_id: String,
    #[serde(flatten)]
    pub outcome: FilterOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub article_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub processed: usize,
    pub skipped: Vec<Skip>,
}

/// Provenance of the files in an output directory. Contains no timestamps,
/// so it is as reproducible as the run itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub corpus_digest: Option<String>,
    pub backend: String,
    pub deterministic: bool,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    /// Distinct articles skipped in any stage.
    pub fn skip_count(&self) -> usize {
        self.stages
            .values()
            .flat_map(|s| s.skipped.iter().map(|k| k.article_id.as_str()))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub manifest: Manifest,
}

/// Applies `f` to every item on up to `workers` threads; results keep the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = workers.clamp(1, items.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(rows)
}

fn group_by_article<T: Clone>(rows: &[T], id: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<T>> {
    let mut map: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for row in rows {
        map.entry(id(row).to_string()).or_default().push(row.clone());
    }
    map
}

pub struct Pipeline {
    config: RunConfig,
    config_hash: String,
    gateway: Gateway,
    cache: EmbeddingCache,
    summarize: SummarizeSettings,
    refine: RefineSettings,
    metrics: MetricSettings,
    catalog: PromptCatalog,
    metric_prompts: MetricPrompts,
}

impl Pipeline {
    /// Validates the config, creates the output directory and builds the
    /// backend. The backend is not probed here.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = &config.output.dir;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let gateway = config.build_gateway()?.with_audit_file(&out.join(AUDIT_FILE))?;
        Ok(Pipeline {
            config_hash: config.config_hash()?,
            gateway,
            cache: EmbeddingCache::new(),
            summarize: config.summarize_settings(),
            refine: config.refine_settings(),
            metrics: config.metric_settings(),
            catalog: config.prompt_catalog(),
            metric_prompts: config.metric_prompts(),
            config,
        })
    }

    pub fn probe(&self) -> Result<()> {
        self.gateway.probe()
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output.dir.join(name)
    }

    /// Corpus articles sorted by id.
    pub fn load_articles(&self) -> Result<Vec<Article>> {
        let mut articles = load_corpus(self.config.corpus_path()?, self.config.corpus.limit)?;
        articles.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(articles)
    }

    fn summarize_article(&self, article: &Article) -> Result<(Vec<Summary>, FilterRecord)> {
        let summarizer = Summarizer::new(&self.gateway, &self.summarize, &self.cache);
        let all = summarizer.all(article)?;
        let record = FilterRecord {
            article_id: article.id.clone(),
            outcome: all.filter.clone(),
        };
        Ok((all.into_vec(), record))
    }

    fn refine_article(&self, article: &Article, summaries: &[Summary]) -> Result<(Vec<Summary>, Vec<RefinementTrace>)> {
        let refiner = Refiner::new(&self.gateway, &self.catalog, &self.refine);
        let mut refined = Vec::new();
        let mut traces = Vec::new();
        for s in summaries.iter().filter(|s| s.stage == Stage::Unrefined) {
            let (r, t) = refiner.refine_loop(article, s)?;
            refined.push(r);
            traces.push(t);
        }
        Ok((refined, traces))
    }

    fn evaluate_article(&self, article: &Article, summaries: &[Summary]) -> Result<Vec<ScoreCard>> {
        let refiner = Refiner::new(&self.gateway, &self.catalog, &self.refine);
        let evaluator = Evaluator::new(&self.gateway, &self.metric_prompts, &self.metrics, &refiner);
        let mut ordered: Vec<&Summary> = summaries.iter().collect();
        ordered.sort_by_key(|s| (s.stage, s.method));
        ordered.into_iter().map(|s| evaluator.evaluate(article, s)).collect()
    }

    fn manifest(&self, stages: BTreeMap<String, StageRecord>) -> Result<Manifest> {
        let corpus_digest = match &self.config.corpus.path {
            Some(p) => Some(corpus_digest(p)?),
            None => None,
        };
        Ok(Manifest {
            config_hash: self.config_hash.clone(),
            corpus_digest,
            backend: self.gateway.backend_id(),
            deterministic: self.gateway.is_deterministic(),
            stages,
        })
    }

    /// Merges one stage's record into the manifest on disk. A manifest from
    /// a different configuration is replaced.
    fn record_stage(&self, stage: &str, record: StageRecord) -> Result<Manifest> {
        let path = self.out(MANIFEST_FILE);
        let mut stages = match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<Manifest>(&text) {
                Ok(m) if m.config_hash == self.config_hash => m.stages,
                _ => BTreeMap::new(),
            },
            Err(_) => BTreeMap::new(),
        };
        stages.insert(stage.to_string(), record);
        let manifest = self.manifest(stages)?;
        write_pretty(&path, &manifest)?;
        Ok(manifest)
    }

    fn finish_report(&self, cards: &[ScoreCard]) -> Result<RunReport> {
        if cards.is_empty() {
            return Err(Error::Precondition("no scorecards to report on".into()));
        }
        let report = build_report(cards, self.config.stats.alpha, &self.config_hash, TRACES_FILE)?;
        emit(&report, &self.config.output.dir, &self.config.formats())?;
        Ok(report)
    }

    fn collect<T>(&self, articles: &[&Article], results: Vec<Result<T>>, stage: &str) -> (Vec<T>, StageRecord) {
        let mut ok = Vec::new();
        let mut record = StageRecord::default();
        for (article, r) in articles.iter().zip(results) {
            match r {
                Ok(v) => {
                    ok.push(v);
                    record.processed += 1;
                }
                Err(e) => {
                    log::warn!("{stage}: skipping article {}: {e}", article.id);
                    record.skipped.push(Skip {
                        article_id: article.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        (ok, record)
    }

    fn write_summaries(&self, summaries: &[Summary], filters: &[FilterRecord]) -> Result<()> {
        write_jsonl(&self.out(SUMMARIES_FILE), summaries)?;
        if self.config.output.dump_filter {
            write_jsonl(&self.out(FILTER_FILE), filters)?;
        }
        Ok(())
    }

    /// Summarize, evaluate, refine and evaluate again, article by article,
    /// then compute statistics and emit the report.
    pub fn run(&self) -> Result<RunOutcome> {
        let articles = self.load_articles()?;
        if articles.is_empty() {
            return Err(Error::Validation("corpus has no articles".into()));
        }
        let refs: Vec<&Article> = articles.iter().collect();
        type PerArticle = (Vec<Summary>, FilterRecord, Vec<Summary>, Vec<RefinementTrace>, Vec<ScoreCard>);
        let results = parallel_map(&refs, self.config.output.workers, |a| -> Result<PerArticle> {
            let (unrefined, filter) = self.summarize_article(a)?;
            let mut cards = self.evaluate_article(a, &unrefined)?;
            let (refined, traces) = self.refine_article(a, &unrefined)?;
            cards.extend(self.evaluate_article(a, &refined)?);
            Ok((unrefined, filter, refined, traces, cards))
        });
        let (done, record) = self.collect(&refs, results, "run");

        let mut summaries = Vec::new();
        let mut filters = Vec::new();
        let mut refined = Vec::new();
        let mut traces = Vec::new();
        let mut cards = Vec::new();
        for (s, f, r, t, c) in done {
            summaries.extend(s);
            filters.push(f);
            refined.extend(r);
            traces.extend(t);
            cards.extend(c);
        }
        self.write_summaries(&summaries, &filters)?;
        write_jsonl(&self.out(REFINED_FILE), &refined)?;
        write_jsonl(&self.out(TRACES_FILE), &traces)?;
        write_jsonl(&self.out(SCORECARDS_FILE), &cards)?;

        let manifest = self.manifest(BTreeMap::from([("run".to_string(), record)]))?;
        write_pretty(&self.out(MANIFEST_FILE), &manifest)?;
        let report = self.finish_report(&cards)?;
        Ok(RunOutcome { report, manifest })
    }

    pub fn summarize_stage(&self) -> Result<Manifest> {
        let articles = self.load_articles()?;
        let refs: Vec<&Article> = articles.iter().collect();
        let results = parallel_map(&refs, self.config.output.workers, |a| self.summarize_article(a));
        let (done, record) = self.collect(&refs, results, "summarize");
        let (summaries, filters): (Vec<_>, Vec<_>) = done.into_iter().unzip();
        let summaries: Vec<Summary> = summaries.into_iter().flatten().collect();
        self.write_summaries(&summaries, &filters)?;
        self.record_stage("summarize", record)
    }

    /// Articles that have rows in `by_id`, in id order.
    fn articles_with<'a, T>(&self, articles: &'a [Article], by_id: &BTreeMap<String, T>) -> Vec<&'a Article> {
        articles.iter().filter(|a| by_id.contains_key(&a.id)).collect()
    }

    pub fn refine_stage(&self) -> Result<Manifest> {
        let summaries: Vec<Summary> = read_jsonl(&self.out(SUMMARIES_FILE))?;
        let by_id = group_by_article(&summaries, |s| &s.article_id);
        let articles = self.load_articles()?;
        let refs = self.articles_with(&articles, &by_id);
        let results = parallel_map(&refs, self.config.output.workers, |a| {
            self.refine_article(a, &by_id[&a.id])
        });
        let (done, record) = self.collect(&refs, results, "refine");
        let (refined, traces): (Vec<_>, Vec<_>) = done.into_iter().unzip();
        write_jsonl(&self.out(REFINED_FILE), &refined.concat())?;
        write_jsonl(&self.out(TRACES_FILE), &traces.concat())?;
        self.record_stage("refine", record)
    }

    /// Scores saved summaries. When refined summaries exist, only articles
    /// that made it through refinement are scored, as in a full run.
    pub fn evaluate_stage(&self) -> Result<Manifest> {
        let mut summaries: Vec<Summary> = read_jsonl(&self.out(SUMMARIES_FILE))?;
        let refined_path = self.out(REFINED_FILE);
        if refined_path.exists() {
            let refined: Vec<Summary> = read_jsonl(&refined_path)?;
            let keep: BTreeSet<String> = refined.iter().map(|s| s.article_id.clone()).collect();
            summaries.retain(|s| keep.contains(&s.article_id));
            summaries.extend(refined);
        }
        let by_id = group_by_article(&summaries, |s| &s.article_id);
        let articles = self.load_articles()?;
        let refs = self.articles_with(&articles, &by_id);
        let results = parallel_map(&refs, self.config.output.workers, |a| {
            self.evaluate_article(a, &by_id[&a.id])
        });
        let (done, record) = self.collect(&refs, results, "evaluate");
        write_jsonl(&self.out(SCORECARDS_FILE), &done.concat())?;
        self.record_stage("evaluate", record)
    }

    pub fn stats_stage(&self) -> Result<RunReport> {
        let cards: Vec<ScoreCard> = read_jsonl(&self.out(SCORECARDS_FILE))?;
        self.finish_report(&cards)
    }
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
