//! Aggregation of scorecards into a run report, and emission of that report
//! as JSON, CSV, Markdown and SVG charts.
//!
//! Every float written by this module is rounded or formatted to 4 decimals
//! so identical reports produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{MetricName, ScoreCard};
use crate::stats::{build_table, linear_fit, FitResult, TestResult};
use crate::summarize::{Method, Stage};

pub const CSV_HEADER: &str = "metric,avg_before,avg_after,p_value,ci_low,ci_high,reject_null";

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEntry {
    pub metric: MetricName,
    pub stage: Stage,
    /// `None` for the mean over all methods.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<Method>,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub per_metric_means: Vec<MeanEntry>,
    pub test_table: Vec<TestResult>,
    #[serde(default)]
    pub dropped_pairs: BTreeMap<MetricName, usize>,
    /// Fit of post-refinement means on pre-refinement means, one point per
    /// (metric, method).
    pub correlation: Option<FitResult>,
    pub traces_path: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunReport {
    /// (pre, post) mean pairs per (metric, method), in metric then method order.
    pub fn correlation_points(&self) -> Vec<(MetricName, Method, f64, f64)> {
        let mut by_key: BTreeMap<(MetricName, Method), [Option<f64>; 2]> = BTreeMap::new();
        for e in &self.per_metric_means {
            if let Some(method) = e.method {
                let slot = match e.stage {
                    Stage::Unrefined => 0,
                    Stage::Refined => 1,
                };
                by_key.entry((e.metric, method)).or_default()[slot] = Some(e.mean);
            }
        }
        by_key
            .into_iter()
            .filter_map(|((m, meth), [pre, post])| Some((m, meth, pre?, post?)))
            .collect()
    }

    fn overall_mean(&self, metric: MetricName, stage: Stage) -> Option<f64> {
        self.per_metric_means
            .iter()
            .find(|e| e.metric == metric && e.stage == stage && e.method.is_none())
            .map(|e| e.mean)
    }
}

/// Arithmetic means per (metric, stage, method) and per (metric, stage).
pub fn aggregate(cards: &[ScoreCard]) -> Result<Vec<MeanEntry>> {
    if cards.is_empty() {
        return Err(Error::Precondition("no scorecards to aggregate".into()));
    }
    let mut sums: BTreeMap<(MetricName, Stage, Option<Method>), (f64, usize)> = BTreeMap::new();
    for card in cards {
        for (&metric, &score) in &card.scores {
            for key in [(metric, card.stage, Some(card.method)), (metric, card.stage, None)] {
                let slot = sums.entry(key).or_insert((0.0, 0));
                slot.0 += score;
                slot.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|((metric, stage, method), (sum, n))| MeanEntry {
            metric,
            stage,
            method,
            mean: sum / n as f64,
            n,
        })
        .collect())
}

/// Assembles a report from scorecards. The run id is derived from the
/// config hash and the report content, so reruns of the same configuration
/// get the same id.
pub fn build_report(
    cards: &[ScoreCard],
    alpha: f64,
    config_hash: &str,
    traces_path: &str,
) -> Result<RunReport> {
    let per_metric_means = aggregate(cards)?;
    let table = build_table(cards, alpha);
    let mut report = RunReport {
        run_id: String::new(),
        config_hash: config_hash.to_string(),
        per_metric_means,
        test_table: table.results,
        dropped_pairs: table.dropped,
        correlation: None,
        traces_path: traces_path.to_string(),
        notes: table.notes,
    };
    let points = report.correlation_points();
    let xs: Vec<f64> = points.iter().map(|p| p.2).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.3).collect();
    match linear_fit(&xs, &ys) {
        Ok(fit) => report.correlation = Some(fit),
        Err(e) => report.notes.push(format!("correlation unavailable: {e}")),
    }
    let content = rounded_json(&report)?;
    report.run_id = sha256_hex(format!("{config_hash}\n{content}").as_bytes())[..16].to_string();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Markdown,
    Svg,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Json, Format::Csv, Format::Markdown, Format::Svg];
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            "svg" => Ok(Format::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn round4(v: f64) -> f64 {
    let r = (v * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if n.is_f64() {
                if let Some(f) = n.as_f64().and_then(|f| serde_json::Number::from_f64(round4(f))) {
                    *n = f;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn rounded_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn f4(v: f64) -> String {
    format!("{:.4}", round4(v))
}

pub fn render_csv(results: &[TestResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.metric,
            f4(r.mean_before),
            f4(r.mean_after),
            f4(r.p_value),
            f4(r.ci95.0),
            f4(r.ci95.1),
            r.reject_null
        );
    }
    out
}

/// One parsed row of the CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub metric: MetricName,
    pub avg_before: f64,
    pub avg_after: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reject_null: bool,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("table header mismatch".into()));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("expected 7 fields: {line:?}")));
            }
            Ok(CsvRow {
                metric: f[0].parse()?,
                avg_before: num(f[1])?,
                avg_after: num(f[2])?,
                p_value: num(f[3])?,
                ci_low: num(f[4])?,
                ci_high: num(f[5])?,
                reject_null: f[6]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad bool {:?}", f[6])))?,
            })
        })
        .collect()
}

pub fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run {}\n", report.run_id);
    let _ = writeln!(out, "- config hash: `{}`", report.config_hash);
    let _ = writeln!(out, "- traces: `{}`\n", report.traces_path);

    out.push_str("## Mean scores\n\n");
    if report.per_metric_means.is_empty() {
        out.push_str("_no scores_\n\n");
    } else {
        out.push_str("| metric | method | unrefined | refined |\n|---|---|---|---|\n");
        let mut rows: BTreeMap<(MetricName, Option<Method>), [Option<f64>; 2]> = BTreeMap::new();
        for e in &report.per_metric_means {
            let slot = usize::from(e.stage == Stage::Refined);
            rows.entry((e.metric, e.method)).or_default()[slot] = Some(e.mean);
        }
        let cell = |v: Option<f64>| v.map(f4).unwrap_or_else(|| "-".into());
        for ((metric, method), [pre, post]) in rows {
            let method = method.map_or("all".to_string(), |m| m.to_string());
            let _ = writeln!(out, "| {metric} | {method} | {} | {} |", cell(pre), cell(post));
        }
        out.push('\n');
    }

    out.push_str("## Paired t-tests\n\n");
    if report.test_table.is_empty() {
        out.push_str("_no metric had enough matched pairs_\n\n");
    } else {
        out.push_str(
            "| metric | n | avg before | avg after | t | p (one-sided) | 95% CI (before - after) | reject |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        for r in &report.test_table {
            let t = if r.t_stat.is_finite() {
                f4(r.t_stat)
            } else if r.t_stat > 0.0 {
                "inf".into()
            } else {
                "-inf".into()
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | [{}, {}] | {} |",
                r.metric,
                r.n,
                f4(r.mean_before),
                f4(r.mean_after),
                t,
                f4(r.p_value),
                f4(r.ci95.0),
                f4(r.ci95.1),
                if r.reject_null { "yes" } else { "no" }
            );
        }
        out.push('\n');
    }

    out.push_str("## Pre/post correlation\n\n");
    match &report.correlation {
        Some(fit) => {
            let _ = writeln!(
                out,
                "r = {}, post = {} * pre + {}\n",
                f4(fit.r),
                f4(fit.slope),
                f4(fit.intercept)
            );
        }
        None => out.push_str("_not enough distinct points_\n\n"),
    }

    if !report.notes.is_empty() {
        out.push_str("## Notes\n\n");
        for n in &report.notes {
            let _ = writeln!(out, "- {n}");
        }
    }
    out
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"16\">{title}</text>",
        WIDTH / 2.0
    );
}

/// Grouped bars of overall before/after means, two bars per metric.
pub fn render_bars(report: &RunReport) -> String {
    let metrics: Vec<MetricName> = report
        .per_metric_means
        .iter()
        .filter(|e| e.method.is_none())
        .map(|e| e.metric)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = String::new();
    svg_open(&mut out, "Mean score before and after refinement");
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let base = HEIGHT - MARGIN;
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>",
        WIDTH - MARGIN
    );
    if metrics.is_empty() {
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", WIDTH / 2.0, HEIGHT / 2.0);
    }
    let group_w = (WIDTH - 2.0 * MARGIN) / metrics.len().max(1) as f64;
    let bar_w = group_w * 0.35;
    for (i, &metric) in metrics.iter().enumerate() {
        let x0 = MARGIN + i as f64 * group_w + group_w * 0.15;
        for (j, (stage, color)) in [(Stage::Unrefined, "#9e9e9e"), (Stage::Refined, "#1f77b4")]
            .into_iter()
            .enumerate()
        {
            let mean = report.overall_mean(metric, stage).unwrap_or(0.0).clamp(0.0, 1.0);
            let h = mean * plot_h;
            let _ = writeln!(
                out,
                "<rect class=\"bar\" data-metric=\"{metric}\" data-stage=\"{stage}\" x=\"{:.4}\" y=\"{:.4}\" width=\"{:.4}\" height=\"{:.4}\" fill=\"{color}\"/>",
                x0 + j as f64 * bar_w,
                base - h,
                bar_w,
                h
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.4}\" y=\"{:.4}\" text-anchor=\"middle\" font-size=\"12\">{metric}</text>",
            x0 + bar_w,
            base + 18.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Pre vs post means per (metric, method) with the fitted line.
pub fn render_scatter(report: &RunReport) -> String {
    let mut out = String::new();
    svg_open(&mut out, "Pre- vs post-refinement mean scores");
    let side = HEIGHT - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + x.clamp(0.0, 1.0) * side;
    let py = |y: f64| HEIGHT - MARGIN - y.clamp(0.0, 1.0) * side;
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{side}\" height=\"{side}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (metric, method, pre, post) in report.correlation_points() {
        let _ = writeln!(
            out,
            "<circle class=\"point\" data-metric=\"{metric}\" data-method=\"{method}\" cx=\"{:.4}\" cy=\"{:.4}\" r=\"4\"/>",
            px(pre),
            py(post)
        );
    }
    match &report.correlation {
        Some(fit) => {
            let y = |x: f64| fit.slope * x + fit.intercept;
            let _ = writeln!(
                out,
                "<line class=\"fit\" x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"#d62728\"/>",
                px(0.0),
                py(y(0.0)),
                px(1.0),
                py(y(1.0))
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\">r = {}, slope = {}, intercept = {}</text>",
                MARGIN + side + 10.0,
                MARGIN + 12.0,
                f4(fit.r),
                f4(fit.slope),
                f4(fit.intercept)
            );
        }
        None => {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\">no fit</text>",
                MARGIN + side + 10.0,
                MARGIN + 12.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn write(path: PathBuf, content: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the requested formats into `out_dir` and returns the paths written.
/// Everything is rendered from the 4-decimal form stored in report.json, so
/// re-rendering a saved report reproduces the same files.
pub fn emit(report: &RunReport, out_dir: &Path, formats: &BTreeSet<Format>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = rounded_json(report)?;
    let report: RunReport = serde_json::from_str(&json)?;
    let report = &report;
    let mut written = Vec::new();
    for format in formats {
        match format {
            Format::Json => write(out_dir.join("report.json"), &json, &mut written)?,
            Format::Csv => write(out_dir.join("table.csv"), &render_csv(&report.test_table), &mut written)?,
            Format::Markdown => write(out_dir.join("report.md"), &render_markdown(report), &mut written)?,
            Format::Svg => {
                write(out_dir.join("bars.svg"), &render_bars(report), &mut written)?;
                write(out_dir.join("scatter.svg"), &render_scatter(report), &mut written)?;
            }
        }
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
