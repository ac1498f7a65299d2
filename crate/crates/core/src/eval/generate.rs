use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

/// Generated-token cap (EOS included) when none is given.
pub const DEFAULT_SAMPLE_CAP: usize = 256;

/// One ancestral sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Generated tokens before EOS.
    pub body: Vec<u32>,
    /// log p of everything generated, EOS included when reached.
    pub log_prob: f64,
    /// The cap stopped generation before EOS.
    pub capped: bool,
}

fn draw(rng: &mut ChaCha8Rng, log_probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as u32;
        }
    }
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1) as u32
}

fn sample_with<M: LanguageModel>(model: &M, rng: &mut ChaCha8Rng, cap: usize) -> Result<Sample> {
    let cap = cap.min(model.max_input_len());
    let mut state = model.begin();
    let mut lp = model.advance(&mut state, BOS)?;
    let mut body = Vec::new();
    let mut log_prob = 0.0;
    for generated in 1..=cap {
        let tok = draw(rng, &lp);
        log_prob += lp[tok as usize];
        if tok == EOS {
            return Ok(Sample {
                body,
                log_prob,
                capped: false,
            });
        }
        body.push(tok);
        if generated < cap {
            lp = model.advance(&mut state, tok)?;
        }
    }
    Ok(Sample {
        body,
        log_prob,
        capped: true,
    })
}

/// Draws each token exactly from the model conditional until EOS, or until
/// `cap` tokens (or the model's context) run out.
pub fn ancestral_sample<M: LanguageModel>(model: &M, seed: u64, cap: usize) -> Result<Sample> {
    if cap == 0 {
        return Err(Error::domain("ancestral_sample", "cap must be at least 1"));
    }
    sample_with(model, &mut ChaCha8Rng::seed_from_u64(seed), cap)
}

/// `k` samples; sample `i` uses stream `i` of the generator seeded with
/// `seed`, so each sample is independent of how many others are drawn.
pub fn sample_many<M: LanguageModel>(model: &M, k: usize, seed: u64, cap: usize) -> Result<Vec<Sample>> {
    if cap == 0 {
        return Err(Error::domain("sample_many", "cap must be at least 1"));
    }
    (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_with(model, &mut rng, cap)
        })
        .collect()
}

/// Monte-Carlo sequence entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub entropy: f64,
    pub standard_error: f64,
    pub samples: usize,
    pub capped: usize,
}

impl EntropyEstimate {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let k = samples.len();
        if k < 2 {
            return Err(Error::domain("estimate_entropy_mc", "needs at least two samples"));
        }
        let nll: Vec<f64> = samples.iter().map(|s| -s.log_prob).collect();
        let mean = nll.iter().sum::<f64>() / k as f64;
        let var = nll.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64;
        Ok(EntropyEstimate {
            entropy: mean,
            standard_error: (var / k as f64).sqrt(),
            samples: k,
            capped: samples.iter().filter(|s| s.capped).count(),
        })
    }
}

/// `Ĥ = −(1/K) Σ log p(y⁽ᵏ⁾)` with standard error `sd / √K`. Capped samples
/// contribute their truncated prefix's log-probability.
pub fn estimate_entropy_mc<M: LanguageModel>(model: &M, k: usize, seed: u64, cap: usize) -> Result<EntropyEstimate> {
    if k < 2 {
        return Err(Error::domain("estimate_entropy_mc", "needs at least two samples"));
    }
    EntropyEstimate::from_samples(&sample_many(model, k, seed, cap)?)
}

/// `100 × distinct / total` over n-grams of token ids. Sequences shorter
/// than `n` contribute nothing.
pub fn percent_unique_ngrams<T: AsRef<[u32]>>(samples: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("percent_unique_ngrams", "n must be at least 1"));
    }
    let mut seen: HashSet<&[u32]> = HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for gram in s.as_ref().windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::domain("percent_unique_ngrams", format!("no sample has {n} tokens")));
    }
    Ok(100.0 * seen.len() as f64 / total as f64)
}

pub fn mean_length<T: AsRef<[u32]>>(samples: &[T]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("mean_length", "no samples"));
    }
    Ok(samples.iter().map(|s| s.as_ref().len()).sum::<usize>() as f64 / samples.len() as f64)
}

/// Summary of a batch of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub samples: usize,
    pub capped: usize,
    /// Over samples that reached EOS; absent when every sample was capped.
    pub mean_length: Option<f64>,
    pub entropy_nats: f64,
    /// Absent for a single sample.
    pub entropy_standard_error: Option<f64>,
    /// Keyed by n = 2, 3, 4; absent when no sample has n tokens.
    pub unique_2grams: Option<f64>,
    pub unique_3grams: Option<f64>,
    pub unique_4grams: Option<f64>,
}

pub fn generation_report(samples: &[Sample]) -> Result<GenerationReport> {
    if samples.is_empty() {
        return Err(Error::domain("generation_report", "no samples"));
    }
    let entropy = -samples.iter().map(|s| s.log_prob).sum::<f64>() / samples.len() as f64;
    let finished: Vec<&[u32]> = samples.iter().filter(|s| !s.capped).map(|s| s.body.as_slice()).collect();
    let bodies: Vec<&[u32]> = samples.iter().map(|s| s.body.as_slice()).collect();
    Ok(GenerationReport {
        samples: samples.len(),
        capped: samples.iter().filter(|s| s.capped).count(),
        mean_length: mean_length(&finished).ok(),
        entropy_nats: entropy,
        entropy_standard_error: EntropyEstimate::from_samples(samples).ok().map(|e| e.standard_error),
        unique_2grams: percent_unique_ngrams(&bodies, 2).ok(),
        unique_3grams: percent_unique_ngrams(&bodies, 3).ok(),
        unique_4grams: percent_unique_ngrams(&bodies, 4).ok(),
    })
}
