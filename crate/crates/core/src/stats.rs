//! Paired one-sided t-tests, confidence intervals, correlation and
//! least-squares fits over before/after refinement scores.
//!
//! Student's t CDF is evaluated through the regularized incomplete beta
//! function (continued fraction, modified Lentz), so there is no dependency
//! on an external statistics library.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricName, ScoreCard};
use crate::summarize::{Method, Stage};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Spread of the differences, relative to the largest score, below which
/// the sample counts as having zero variance.
const DEGENERATE_SPREAD: f64 = 1e-12;

pub fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 1000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// P(T ≤ t) for Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of Student's t by bisection on the CDF.
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile probability must be in (0, 1)");
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -student_t_quantile(1.0 - p, df);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub metric: MetricName,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub pairing: Vec<(String, Method)>,
}

impl PairedSample {
    /// Sample without pairing labels, mainly for tests and ad-hoc use.
    pub fn unlabeled(metric: MetricName, before: Vec<f64>, after: Vec<f64>) -> Self {
        let pairing = (0..before.len())
            .map(|i| (i.to_string(), Method::Extractive))
            .collect();
        PairedSample {
            metric,
            before,
            after,
            pairing,
        }
    }
}

mod signed_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Ok(f64::NAN),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub metric: MetricName,
    pub n: usize,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Infinite when the differences are constant and non-zero.
    #[serde(with = "signed_float")]
    pub t_stat: f64,
    pub df: usize,
    /// One-sided, H1: mean(after) > mean(before).
    pub p_value: f64,
    /// One-sided in the opposite direction; always 1 − p_value.
    pub p_value_reverse: f64,
    /// Two-sided 95% interval for mean(before − after).
    pub ci95: (f64, f64),
    pub reject_null: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn paired_t_test(sample: &PairedSample) -> Result<TestResult> {
    paired_t_test_at(sample, DEFAULT_ALPHA)
}

pub fn paired_t_test_at(sample: &PairedSample, alpha: f64) -> Result<TestResult> {
    let n = sample.before.len();
    if sample.after.len() != n || sample.pairing.len() != n {
        return Err(Error::Validation(format!(
            "paired sample lengths differ: before {}, after {}, pairing {}",
            n,
            sample.after.len(),
            sample.pairing.len()
        )));
    }
    if n < 2 {
        return Err(Error::Precondition(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    if sample.before.iter().chain(&sample.after).any(|v| !v.is_finite()) {
        return Err(Error::Validation("paired sample contains non-finite values".into()));
    }

    let diffs: Vec<f64> = sample
        .before
        .iter()
        .zip(&sample.after)
        .map(|(b, a)| b - a)
        .collect();
    let mean_diff = mean(&diffs);
    let df = n - 1;
    // Tolerances are relative to the magnitude of the scores, so rounding
    // noise in otherwise equal differences does not count as variance.
    let scale = sample
        .before
        .iter()
        .chain(&sample.after)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = DEGENERATE_SPREAD * scale;
    let (lo, hi) = diffs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let degenerate = hi - lo <= tol;

    let (t_stat, p_value, ci95) = if degenerate {
        let (t, p) = if mean_diff.abs() <= tol {
            (0.0, 0.5)
        } else if mean_diff < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (f64::INFINITY, 1.0)
        };
        (t, p, (mean_diff, mean_diff))
    } else {
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / df as f64;
        let se = var.sqrt() / (n as f64).sqrt();
        let t = mean_diff / se;
        let half = student_t_quantile(0.975, df as f64) * se;
        (t, student_t_cdf(t, df as f64), (mean_diff - half, mean_diff + half))
    };

    Ok(TestResult {
        metric: sample.metric,
        n,
        mean_before: mean(&sample.before),
        mean_after: mean(&sample.after),
        t_stat,
        df,
        p_value,
        p_value_reverse: 1.0 - p_value,
        ci95,
        reject_null: p_value < alpha,
        degenerate,
    })
}

fn centered(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Precondition("need at least 2 points".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Computation {
            tag: "constant_series",
            message: "correlation undefined for a constant series".into(),
        });
    }
    Ok((sxx, syy, sxy))
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    let (sxx, syy, sxy) = centered(x, y)?;
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<FitResult> {
    let (sxx, _, sxy) = centered(x, y)?;
    let slope = sxy / sxx;
    Ok(FitResult {
        r: pearson_r(x, y)?,
        slope,
        intercept: mean(y) - slope * mean(x),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsTable {
    pub results: Vec<TestResult>,
    /// Per metric, how many (article, method) rows lacked a complete pair.
    pub dropped: BTreeMap<MetricName, usize>,
    pub notes: Vec<String>,
}

/// Pairs unrefined and refined cards by (article, method) and runs one test
/// per metric across all methods.
pub fn build_table(cards: &[ScoreCard], alpha: f64) -> StatsTable {
    type Key<'a> = (&'a str, Method);
    let mut rows: BTreeMap<Key, [Option<&ScoreCard>; 2]> = BTreeMap::new();
    let mut table = StatsTable::default();
    for card in cards {
        let slot = match card.stage {
            Stage::Unrefined => 0,
            Stage::Refined => 1,
        };
        let entry = rows.entry((card.article_id.as_str(), card.method)).or_default();
        if entry[slot].is_some() {
            table.notes.push(format!(
                "duplicate {} card for {}/{}; keeping the last",
                card.stage, card.article_id, card.method
            ));
        }
        entry[slot] = Some(card);
    }

    for metric in MetricName::ALL {
        let mut before = Vec::new();
        let mut after = Vec::new();
        let mut pairing = Vec::new();
        let mut dropped = 0;
        for (&(article_id, method), pair) in &rows {
            let score = |slot: usize| pair[slot].and_then(|c| c.scores.get(&metric).copied());
            match (score(0), score(1)) {
                (Some(b), Some(a)) => {
                    before.push(b);
                    after.push(a);
                    pairing.push((article_id.to_string(), method));
                }
                (None, None) => {}
                _ => dropped += 1,
            }
        }
        if dropped > 0 {
            table.dropped.insert(metric, dropped);
        }
        if before.len() < 2 {
            if before.len() + dropped > 0 {
                table.notes.push(format!(
                    "{metric}: only {} complete pair(s); omitted",
                    before.len()
                ));
            }
            continue;
        }
        let sample = PairedSample {
            metric,
            before,
            after,
            pairing,
        };
        match paired_t_test_at(&sample, alpha) {
            Ok(result) => table.results.push(result),
            Err(e) => table.notes.push(format!("{metric}: {e}")),
        }
    }
    if table.results.is_empty() {
        table.notes.push("no metric had enough matched pairs".into());
    }
    table
}
