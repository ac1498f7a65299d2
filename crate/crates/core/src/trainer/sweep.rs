use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::corpus::{CorpusSplits, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::ModelConfig;
use crate::objective::{ObjectiveConfig, RegularizerKind};
use crate::stats::percent_change;

/// One β of a sweep: dev NLL at the selected update and test metrics of that model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub regularizer: RegularizerKind,
    pub best_update: u64,
    pub dev_nll_per_token: f64,
    pub test: EvalReport,
}

/// Trains one model per β with `kind` as the regularizer, everything else from `base`.
pub fn sweep_beta(
    base: &TrainConfig,
    model_cfg: &ModelConfig,
    kind: RegularizerKind,
    betas: &[f64],
    splits: &CorpusSplits<TokenSequence>,
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::Config("β list is empty".into()));
    }
    if splits.test.is_empty() {
        return Err(Error::Invalid("sweep needs a nonempty test split".into()));
    }
    betas
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig {
                objective: ObjectiveConfig {
                    regularizer: kind,
                    beta,
                    ..base.objective.clone()
                },
                ..base.clone()
            };
            log::info!("sweep: β = {beta}");
            let out = train(&cfg, model_cfg, splits, None)?;
            let best = out.report.best_record();
            let test = evaluate(&out.best_model, &splits.test, cfg.max_tokens, false)?;
            Ok(SweepRow {
                beta,
                regularizer: kind,
                best_update: best.update,
                dev_nll_per_token: best.dev_nll_per_token,
                test,
            })
        })
        .collect()
}

fn kind_name(kind: RegularizerKind) -> &'static str {
    match kind {
        RegularizerKind::None => "none",
        RegularizerKind::Variance => "variance",
        RegularizerKind::LocalConsistency => "local_consistency",
        RegularizerKind::Max => "max",
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "beta",
        "regularizer",
        "best_update",
        "dev_nll_per_token",
        "test_ppl_seq_avg",
        "test_ppl_token",
        "test_uid_behavior",
        "test_tokens",
        "test_sequences",
    ])?;
    for r in rows {
        w.write_record([
            r.beta.to_string(),
            kind_name(r.regularizer).to_string(),
            r.best_update.to_string(),
            r.dev_nll_per_token.to_string(),
            r.test.ppl_seq_avg.to_string(),
            r.test.ppl_token.to_string(),
            r.test.uid_behavior.to_string(),
            r.test.token_count.to_string(),
            r.test.sequence_count.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?).expect("csv is utf-8"))
}

/// Nested training subsets: one seeded shuffle of `train`, then for each size the
/// shortest prefix holding at least that many predicted tokens. Each subset keeps
/// the original corpus order, so the full size reproduces `train` itself.
pub fn nested_subsets(train: &[TokenSequence], sizes: &[usize], seed: u64) -> Result<Vec<Vec<TokenSequence>>> {
    let total: usize = train.iter().map(TokenSequence::predicted_len).sum();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0usize);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + train[i].predicted_len());
    }
    sizes
        .iter()
        .map(|&size| {
            if size == 0 || size > total {
                return Err(Error::Config(format!("subset size {size} must lie in 1..={total} tokens")));
            }
            let count = prefix.partition_point(|&p| p < size);
            let mut chosen = order[..count].to_vec();
            chosen.sort_unstable();
            Ok(chosen.into_iter().map(|i| train[i].clone()).collect())
        })
        .collect()
}

/// A named objective in an ablation; the first variant is the reference for deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVariant {
    pub label: String,
    pub objective: ObjectiveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size_tokens: usize,
    pub train_sequences: usize,
    pub label: String,
    pub regularizer: RegularizerKind,
    pub beta: f64,
    pub dev_nll_per_token: f64,
    pub test_ppl_seq_avg: f64,
    pub test_ppl_token: f64,
    /// Reference perplexity minus this one (positive = better).
    pub improvement: f64,
    pub percent_change: f64,
}

/// Trains every variant on every nested subset of the training split.
pub fn size_ablation(
    base: &TrainConfig,
    model_cfg: &ModelConfig,
    sizes: &[usize],
    variants: &[ObjectiveVariant],
    splits: &CorpusSplits<TokenSequence>,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one size and one objective".into()));
    }
    let subsets = nested_subsets(&splits.train, sizes, seed)?;
    let mut rows = Vec::new();
    for (&size, subset) in sizes.iter().zip(subsets) {
        let data = CorpusSplits {
            train: subset,
            dev: splits.dev.clone(),
            test: splits.test.clone(),
            ..splits.clone()
        };
        let mut reference = None;
        for v in variants {
            let cfg = TrainConfig {
                objective: v.objective.clone(),
                ..base.clone()
            };
            log::info!("ablation: {size} tokens, {}", v.label);
            let out = train(&cfg, model_cfg, &data, None)?;
            let test = evaluate(&out.best_model, &data.test, cfg.max_tokens, false)?;
            let reference_ppl = *reference.get_or_insert(test.ppl_seq_avg);
            rows.push(AblationRow {
                size_tokens: size,
                train_sequences: data.train.len(),
                label: v.label.clone(),
                regularizer: v.objective.regularizer,
                beta: v.objective.beta,
                dev_nll_per_token: out.report.best_record().dev_nll_per_token,
                test_ppl_seq_avg: test.ppl_seq_avg,
                test_ppl_token: test.ppl_token,
                improvement: reference_ppl - test.ppl_seq_avg,
                percent_change: percent_change(reference_ppl, test.ppl_seq_avg)?.raw,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "size_tokens",
        "train_sequences",
        "label",
        "regularizer",
        "beta",
        "dev_nll_per_token",
        "test_ppl_seq_avg",
        "test_ppl_token",
        "improvement",
        "percent_change",
    ])?;
    for r in rows {
        w.write_record([
            r.size_tokens.to_string(),
            r.train_sequences.to_string(),
            r.label.clone(),
            kind_name(r.regularizer).to_string(),
            r.beta.to_string(),
            r.dev_nll_per_token.to_string(),
            r.test_ppl_seq_avg.to_string(),
            r.test_ppl_token.to_string(),
            r.improvement.to_string(),
            r.percent_change.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?).expect("csv is utf-8"))
}
