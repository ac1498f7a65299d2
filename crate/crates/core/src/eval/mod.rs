//! Held-out evaluation and generation analysis.

mod generate;

pub use generate::{
    ancestral_sample, estimate_entropy_mc, generation_report, mean_length, percent_unique_ngrams, sample_many,
    EntropyEstimate, GenerationReport, Sample, DEFAULT_SAMPLE_CAP,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{SurprisalVector, TransformerLm};
use crate::objective::variance_reg;

fn nonempty(op: &'static str, vectors: &[SurprisalVector]) -> Result<()> {
    if vectors.is_empty() || vectors.iter().any(SurprisalVector::is_empty) {
        Err(Error::domain(op, "needs at least one nonempty surprisal vector"))
    } else {
        Ok(())
    }
}

/// `exp(mean over sequences of the per-sequence mean surprisal)`.
pub fn perplexity_seq_avg(vectors: &[SurprisalVector]) -> Result<f64> {
    nonempty("perplexity_seq_avg", vectors)?;
    let mean = vectors.iter().map(SurprisalVector::mean).sum::<f64>() / vectors.len() as f64;
    Ok(mean.exp())
}

/// `exp(Σ u / Σ n)` over every scored token.
pub fn perplexity_token(vectors: &[SurprisalVector]) -> Result<f64> {
    nonempty("perplexity_token", vectors)?;
    let total: f64 = vectors.iter().map(SurprisalVector::total).sum();
    let n: usize = vectors.iter().map(SurprisalVector::len).sum();
    Ok((total / n as f64).exp())
}

/// Mean over sequences of the per-sequence surprisal variance.
pub fn uid_behavior(vectors: &[SurprisalVector]) -> Result<f64> {
    nonempty("uid_behavior", vectors)?;
    let total = vectors.iter().map(|v| variance_reg(&v.values)).sum::<Result<f64>>()?;
    Ok(total / vectors.len() as f64)
}

/// Variance of all surprisals pooled across sequences.
pub fn uid_behavior_pooled(vectors: &[SurprisalVector]) -> Result<f64> {
    nonempty("uid_behavior_pooled", vectors)?;
    let all: Vec<f64> = vectors.iter().flat_map(|v| v.values.iter().copied()).collect();
    variance_reg(&all)
}

/// Held-out metrics; surprisals in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl_seq_avg: f64,
    pub ppl_token: f64,
    pub nll_per_token: f64,
    pub uid_behavior: f64,
    /// Present when pooled variance was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uid_behavior_pooled: Option<f64>,
    pub token_count: usize,
    pub sequence_count: usize,
}

impl EvalReport {
    pub fn from_surprisals(vectors: &[SurprisalVector], pooled: bool) -> Result<Self> {
        let token_count = vectors.iter().map(SurprisalVector::len).sum();
        Ok(EvalReport {
            ppl_seq_avg: perplexity_seq_avg(vectors)?,
            ppl_token: perplexity_token(vectors)?,
            nll_per_token: vectors.iter().map(SurprisalVector::total).sum::<f64>() / token_count as f64,
            uid_behavior: uid_behavior(vectors)?,
            uid_behavior_pooled: if pooled { Some(uid_behavior_pooled(vectors)?) } else { None },
            token_count,
            sequence_count: vectors.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores `seqs` with `model` (dropout off) and summarizes.
pub fn evaluate(model: &TransformerLm<f32>, seqs: &[TokenSequence], max_tokens: usize, pooled: bool) -> Result<EvalReport> {
    let vectors = model.score_all(seqs, max_tokens)?;
    EvalReport::from_surprisals(&vectors, pooled)
}

/// CSV of every surprisal: `sequence_id,position,token,surprisal`.
/// Positions count predicted tokens from 1.
pub fn write_surprisal_csv(path: &Path, vectors: &[SurprisalVector]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["sequence_id", "position", "token", "surprisal"])?;
    for (i, v) in vectors.iter().enumerate() {
        for (t, (u, tok)) in v.values.iter().zip(&v.targets).enumerate() {
            w.write_record([i.to_string(), (t + 1).to_string(), tok.to_string(), u.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}
