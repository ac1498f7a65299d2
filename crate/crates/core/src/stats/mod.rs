//! Significance tests and report arithmetic.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const DEFAULT_RESAMPLES: usize = 10_000;
/// Largest pair count [`Resampling::Auto`] enumerates exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 20;
const BLOCK: usize = 1000;
const TIE_TOLERANCE: f64 = 1e-12;

/// Per-sequence scores of two models over one test set, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedScores {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Invalid(format!("paired scores differ in length: {} vs {}", a.len(), b.len())));
        }
        if a.is_empty() {
            return Err(Error::Invalid("no paired scores".into()));
        }
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("paired scores must be finite".into()));
        }
        Ok(PairedScores { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }

    /// `|mean(A − B)|`.
    pub fn statistic(&self) -> f64 {
        mean_abs(&self.differences())
    }
}

fn mean_abs(d: &[f64]) -> f64 {
    (d.iter().sum::<f64>() / d.len() as f64).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    MonteCarlo(usize),
    Exhaustive,
    /// Exhaustive up to [`EXHAUSTIVE_LIMIT`] pairs, otherwise Monte Carlo.
    Auto(usize),
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling::Auto(DEFAULT_RESAMPLES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Sign assignments evaluated (2^n when exhaustive).
    pub resamples: u64,
    pub exhaustive: bool,
}

fn at_least(stat: f64, observed: f64) -> bool {
    stat >= observed - TIE_TOLERANCE * observed.abs()
}

/// Two-sided paired permutation test on `|mean(A − B)|`.
///
/// Monte Carlo: each pair's labels are swapped with probability ½ and
/// `p = (1 + #{stat ≥ observed}) / (1 + R)`. Exhaustive: all `2^n` sign
/// assignments, `p = #{stat ≥ observed} / 2^n`. Monte-Carlo draws come in
/// blocks of 1000, block `j` using stream `j` of the generator seeded with
/// `seed`.
pub fn paired_permutation_test(scores: &PairedScores, mode: Resampling, seed: u64) -> Result<PermutationResult> {
    let d = scores.differences();
    let observed = mean_abs(&d);
    let n = d.len();
    let exhaustive = match mode {
        Resampling::Exhaustive => true,
        Resampling::MonteCarlo(_) => false,
        Resampling::Auto(_) => n <= EXHAUSTIVE_LIMIT,
    };
    if exhaustive {
        if n > EXHAUSTIVE_LIMIT + 10 {
            return Err(Error::Invalid(format!("{n} pairs is too many to enumerate")));
        }
        let total = 1u64 << n;
        let mut count = 0u64;
        for mask in 0..total {
            let s: f64 = d
                .iter()
                .enumerate()
                .map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x })
                .sum();
            if at_least((s / n as f64).abs(), observed) {
                count += 1;
            }
        }
        return Ok(PermutationResult {
            statistic: observed,
            p_value: count as f64 / total as f64,
            resamples: total,
            exhaustive: true,
        });
    }
    let r = match mode {
        Resampling::MonteCarlo(r) | Resampling::Auto(r) => r,
        Resampling::Exhaustive => unreachable!(),
    };
    if r == 0 {
        return Err(Error::Invalid("resamples must be at least 1".into()));
    }
    let mut count = 0u64;
    for (block, start) in (0..r).step_by(BLOCK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        for _ in start..(start + BLOCK).min(r) {
            let s: f64 = d.iter().map(|&x| if rng.random::<bool>() { -x } else { x }).sum();
            if at_least((s / n as f64).abs(), observed) {
                count += 1;
            }
        }
    }
    Ok(PermutationResult {
        statistic: observed,
        p_value: (1 + count) as f64 / (1 + r) as f64,
        resamples: r as u64,
        exhaustive: false,
    })
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `values` and Uniform(0, 1).
pub fn ks_statistic_uniform(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max))
}

/// Percent change and its one-decimal display value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentChange {
    pub raw: f64,
    /// `raw` rounded half away from zero to one decimal.
    pub display: f64,
}

impl std::fmt::Display for PercentChange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // keep "-0.0" out of reports
        let v = if self.display == 0.0 { 0.0 } else { self.display };
        write!(f, "{v:.1}%")
    }
}

/// `100 × (new − baseline) / baseline`.
pub fn percent_change(baseline: f64, new: f64) -> Result<PercentChange> {
    if !(baseline > 0.0) || !baseline.is_finite() || !new.is_finite() {
        return Err(Error::Invalid(format!("percent change needs a positive baseline, got {baseline}")));
    }
    let raw = 100.0 * (new - baseline) / baseline;
    Ok(PercentChange {
        raw,
        display: (raw * 10.0).round() / 10.0,
    })
}

/// Four decimals, with `†` appended below 0.05.
pub fn format_p_value(p: f64) -> String {
    if p < 0.05 {
        format!("{p:.4}†")
    } else {
        format!("{p:.4}")
    }
}

/// One exported run; column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub beta: f64,
    pub regularizer: String,
    pub dev_nll: f64,
    pub ppl_seq_avg: f64,
    pub ppl_token: f64,
    pub uid_behavior: f64,
    pub entropy: Option<f64>,
    pub mean_length: Option<f64>,
    pub unique_2grams: Option<f64>,
    pub unique_3grams: Option<f64>,
    pub unique_4grams: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to export".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn export_records(records: &[RunRecord], path: &Path) -> Result<()> {
    write_atomic(path, records_to_csv(records)?.as_bytes())
}

pub fn read_records(text: &str) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
