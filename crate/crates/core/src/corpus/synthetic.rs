//! First-order Markov sources with known entropy rates, used as ground truth
//! for training runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-12;
const MAX_SYMBOLS: usize = 52;

/// A Markov chain over single-letter symbols with per-step termination.
///
/// After each emitted symbol the sequence ends with probability
/// `termination`, or once `max_length` symbols have been emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSourceSpec {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    #[serde(default)]
    pub termination: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
}

/// `a`..`z`, then `A`..`Z`.
pub fn symbol_name(i: usize) -> String {
    let c = if i < 26 {
        (b'a' + i as u8) as char
    } else {
        (b'A' + (i - 26) as u8) as char
    };
    c.to_string()
}

fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).fold(0.0, |h, &p| h - p * p.ln())
}

fn check_distribution(what: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Invalid(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum; take the last
    // symbol with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl MarkovSourceSpec {
    pub fn symbol_count(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.symbol_count();
        if s == 0 || s > MAX_SYMBOLS {
            return Err(Error::Invalid(format!("symbol count {s} outside 1..={MAX_SYMBOLS}")));
        }
        check_distribution("initial distribution", &self.initial)?;
        if self.transition.len() != s {
            return Err(Error::Invalid(format!(
                "transition matrix has {} rows for {s} symbols",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return Err(Error::Invalid(format!("transition row {i} has {} entries", row.len())));
            }
            check_distribution(&format!("transition row {i}"), row)?;
        }
        if !(0.0..=1.0).contains(&self.termination) {
            return Err(Error::Invalid(format!("termination {} outside [0, 1]", self.termination)));
        }
        if self.max_length == Some(0) {
            return Err(Error::Invalid("max_length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Draws `n` sequences, each rendered as space-separated symbol names.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<String>> {
        self.validate()?;
        if self.termination == 0.0 && self.max_length.is_none() {
            return Err(Error::Invalid(
                "termination probability 0 requires a max_length".into(),
            ));
        }
        let names: Vec<String> = (0..self.symbol_count()).map(symbol_name).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lines = Vec::with_capacity(n);
        for _ in 0..n {
            let mut state = draw(&mut rng, &self.initial);
            let mut line = names[state].clone();
            let mut len = 1;
            loop {
                if self.max_length.is_some_and(|m| len >= m) {
                    break;
                }
                if self.termination > 0.0 && rng.random::<f64>() < self.termination {
                    break;
                }
                state = draw(&mut rng, &self.transition[state]);
                line.push(' ');
                line.push_str(&names[state]);
                len += 1;
            }
            lines.push(line);
        }
        Ok(lines)
    }

    /// Row-stochastic matrix over the symbols plus, when `termination > 0`,
    /// one boundary state: a symbol moves to the boundary (EOS) with
    /// probability `termination`, and the boundary restarts through the
    /// initial distribution (the next sequence's first token).
    pub fn augmented_chain(&self) -> Vec<Vec<f64>> {
        let s = self.symbol_count();
        let q = self.termination;
        if q == 0.0 {
            return self.transition.clone();
        }
        let mut rows: Vec<Vec<f64>> = self
            .transition
            .iter()
            .map(|row| {
                let mut r: Vec<f64> = row.iter().map(|p| (1.0 - q) * p).collect();
                r.push(q);
                r
            })
            .collect();
        let mut boundary = self.initial.clone();
        boundary.push(0.0);
        rows.push(boundary);
        debug_assert_eq!(rows.len(), s + 1);
        rows
    }

    /// Stationary distribution of [`augmented_chain`](Self::augmented_chain)
    /// by power iteration on the lazy chain `(I + P) / 2`, which shares P's
    /// fixed point and also converges for periodic chains.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let p = self.augmented_chain();
        let n = p.len();
        let mut mu: Vec<f64> = if self.termination > 0.0 {
            let mut v = vec![0.0; n];
            v[n - 1] = 1.0;
            v
        } else {
            self.initial.clone()
        };
        for _ in 0..10_000_000 {
            let mut next = vec![0.0; n];
            for (i, row) in p.iter().enumerate() {
                for (j, &pij) in row.iter().enumerate() {
                    next[j] += mu[i] * pij;
                }
            }
            for (nx, m) in next.iter_mut().zip(&mu) {
                *nx = 0.5 * (*nx + m);
            }
            let delta: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
            mu = next;
            if delta < STATIONARY_TOL {
                return Ok(mu);
            }
        }
        Err(Error::Invalid("stationary distribution did not converge".into()))
    }

    /// Entropy rate in nats per predicted token: `Σ_i μ_i H(P_i)` over the
    /// augmented chain. With termination this is the per-token cross-entropy
    /// a perfect model reaches on EOS-terminated sequences.
    pub fn entropy_rate(&self) -> Result<f64> {
        let mu = self.stationary_distribution()?;
        Ok(self
            .augmented_chain()
            .iter()
            .zip(&mu)
            .map(|(row, m)| m * row_entropy(row))
            .sum())
    }
}

pub fn generate_synthetic(spec: &MarkovSourceSpec, n_sequences: usize, seed: u64) -> Result<Vec<String>> {
    spec.generate(n_sequences, seed)
}

pub fn analytic_entropy_rate(spec: &MarkovSourceSpec) -> Result<f64> {
    spec.entropy_rate()
}
