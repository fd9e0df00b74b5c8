//! Command-line interface.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{BackendKind, Overrides, RunConfig};
use crate::error::Error;
use crate::metrics::RougeAgainst;
use crate::pipeline::Pipeline;
use crate::report::{emit, load_report, Format};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "summafact", version, about = "Summarize, filter, refine and score news articles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: summarize, evaluate, refine, evaluate, stats, report.
    Run(Shared),
    /// Write unrefined summaries to summaries.jsonl.
    Summarize {
        #[command(flatten)]
        shared: Shared,
        /// Sentences per extractive summary.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Refine saved summaries into refined.jsonl and traces.jsonl.
    Refine(Shared),
    /// Score saved summaries into scorecards.jsonl.
    Evaluate(Shared),
    /// Paired tests over scorecards.jsonl, then emit the report.
    Stats(Shared),
    /// Re-render report.json in the configured formats.
    Report(Shared),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Live,
    Mock,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RougeArg {
    Reference,
    Article,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write per-word filter decisions to filter.jsonl.
    #[arg(long)]
    pub dump_filter: bool,
    #[arg(long, value_enum)]
    pub rouge_against: Option<RougeArg>,
}

impl Shared {
    fn overrides(&self) -> Overrides {
        Overrides {
            corpus: self.corpus.clone(),
            limit: self.limit,
            backend: self.backend.map(|b| match b {
                BackendArg::Live => BackendKind::Live,
                BackendArg::Mock => BackendKind::Mock,
            }),
            mock_script: self.mock_script.clone(),
            out: self.out.clone(),
            workers: self.workers,
            dump_filter: self.dump_filter,
            rouge_against: self.rouge_against.map(|r| match r {
                RougeArg::Reference => RougeAgainst::Reference,
                RougeArg::Article => RougeAgainst::Article,
            }),
            k_sentences: None,
        }
    }

    fn config(&self, k: Option<usize>) -> crate::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut o = self.overrides();
        o.k_sentences = k;
        cfg.apply(&o);
        Ok(cfg)
    }
}

/// Exit code for an error that ended a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Precondition(_) | Error::Corpus { .. } => {
            EXIT_INVALID
        }
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_INVALID,
        _ => EXIT_FAILURE,
    }
}

fn pipeline(shared: &Shared, k: Option<usize>, probe: bool) -> Result<Pipeline, i32> {
    let cfg = shared.config(k).map_err(report_err)?;
    let p = Pipeline::new(cfg).map_err(report_err)?;
    if probe {
        if let Err(e) = p.probe() {
            eprintln!("error: backend unreachable: {e}");
            return Err(EXIT_UNREACHABLE);
        }
    }
    Ok(p)
}

fn report_err(e: Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(&e)
}

fn print_skips(m: &crate::pipeline::Manifest) {
    let n = m.skip_count();
    if n > 0 {
        eprintln!("skipped {n} article(s); see manifest.json");
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(s) => pipeline(s, None, true).and_then(|p| {
            let out = p.run().map_err(report_err)?;
            print_skips(&out.manifest);
            println!("run {} complete", out.report.run_id);
            Ok(())
        }),
        Command::Summarize { shared, k } => pipeline(shared, *k, true).and_then(|p| {
            print_skips(&p.summarize_stage().map_err(report_err)?);
            Ok(())
        }),
        Command::Refine(s) => pipeline(s, None, true).and_then(|p| {
            print_skips(&p.refine_stage().map_err(report_err)?);
            Ok(())
        }),
        Command::Evaluate(s) => pipeline(s, None, true).and_then(|p| {
            print_skips(&p.evaluate_stage().map_err(report_err)?);
            Ok(())
        }),
        Command::Stats(s) => pipeline(s, None, false).and_then(|p| {
            let report = p.stats_stage().map_err(report_err)?;
            println!("run {} complete", report.run_id);
            Ok(())
        }),
        Command::Report(s) => s.config(None).map_err(report_err).and_then(|cfg| {
            let dir = &cfg.output.dir;
            let report = load_report(&dir.join("report.json")).map_err(report_err)?;
            let formats: BTreeSet<Format> = cfg.formats();
            for path in emit(&report, dir, &formats).map_err(report_err)? {
                println!("{}", path.display());
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(code) => code,
    }
}
