use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamState, StepOutcome};
use super::{select_best_by, TrainConfig, TrainRecord, TrainReport};
use crate::corpus::{make_batches, Batch, CorpusSplits, TokenSequence};
use crate::diffmath::{Graph, Scalar, StorageMode, Tensor};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, SurprisalVector, TransformerLm};
use crate::objective::{breakdown_from_surprisals, loss_graph, regularizer, ObjectiveConfig};

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Weights at the selected record.
    pub best_model: TransformerLm<f32>,
    pub final_model: TransformerLm<f32>,
}

/// Where interval checkpoints go, and the vocabulary fingerprint they carry.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub vocab_hash: [u8; 32],
}

fn epoch_seed(data_seed: u64, epoch: u64) -> u64 {
    data_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn checkpoint_name(update: u64) -> String {
    format!("checkpoint_{update:07}.ckpt")
}

/// Trains a fresh model (initialized from `cfg.seeds.init`) on `splits.train`,
/// evaluating dev NLL every `eval_interval` updates and after the last one.
///
/// Everything random derives from `cfg.seeds`, so identical inputs give a
/// bit-identical report and weights.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    splits: &CorpusSplits<TokenSequence>,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut mc = model_cfg.clone();
    mc.init_seed = cfg.seeds.init;
    mc.validate()?;
    if splits.train.is_empty() || splits.dev.is_empty() {
        return Err(Error::Invalid("training needs nonempty train and dev splits".into()));
    }
    if let Some(s) = sink {
        std::fs::create_dir_all(s.dir).map_err(|e| Error::io(s.dir, e))?;
    }
    match cfg.storage {
        StorageMode::F32 => run::<f32>(cfg, mc, splits, sink),
        StorageMode::F64 => run::<f64>(cfg, mc, splits, sink),
    }
}

struct DevScores {
    nll_per_token: f64,
    reg_per_sequence: f64,
    combined_per_token: f64,
}

fn dev_scores(vectors: &[SurprisalVector], objective: &ObjectiveConfig) -> Result<DevScores> {
    let unsmoothed = ObjectiveConfig {
        label_smoothing: 0.0,
        ..objective.clone()
    };
    let b = breakdown_from_surprisals(vectors, &unsmoothed)?;
    let reg_total = vectors
        .iter()
        .map(|v| regularizer(objective.regularizer, &v.values))
        .sum::<Result<f64>>()?;
    Ok(DevScores {
        nll_per_token: b.nll_per_token(),
        reg_per_sequence: reg_total / vectors.len() as f64,
        combined_per_token: b.combined_per_token(),
    })
}

fn batch_step<S: Scalar>(
    model: &TransformerLm<S>,
    batch: &Batch,
    objective: &ObjectiveConfig,
    dropout_seed: Option<u64>,
    index: usize,
) -> Result<(Vec<Tensor<S>>, f64, f64)> {
    let mut g = match dropout_seed {
        Some(seed) => Graph::training(seed),
        None => Graph::new(),
    };
    let vars = model.bind(&mut g);
    let lp = model.forward_batch(&mut g, &vars, batch).map_err(|e| match e {
        Error::NonFinite { .. } => Error::LossNotFinite { batch: index },
        e => e,
    })?;
    let nodes = loss_graph(&mut g, lp, batch, objective, index)?;
    let tokens = nodes.token_count as f64;
    let root = g.scale(nodes.combined, 1.0 / tokens)?;
    g.backward(root)?;
    let breakdown = nodes.breakdown(&g);
    let grads = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((grads, breakdown.combined, breakdown.nll_sum))
}

fn run<S: Scalar>(
    cfg: &TrainConfig,
    mc: ModelConfig,
    splits: &CorpusSplits<TokenSequence>,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut model = TransformerLm::<S>::new(mc.clone())?;
    let mut adam = AdamState::new(model.params().tensors());
    let hp = cfg.adam();
    let limit = 2.0 * (mc.vocab_size as f64).ln();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.dropout);
    let dev_budget = cfg.max_tokens.max(mc.max_seq_len + 1);

    let mut epoch = 0u64;
    let mut batches = make_batches(&splits.train, cfg.max_tokens, mc.max_seq_len, epoch_seed(cfg.seeds.data, 0), true)?;
    let mut cursor = 0usize;

    let mut records: Vec<TrainRecord> = Vec::new();
    let mut best_model = model.cast::<f32>();
    let mut best_nll = f64::INFINITY;
    let (mut acc_combined, mut acc_nll, mut acc_tokens, mut skipped) = (0.0, 0.0, 0usize, 0u64);
    let mut lr = 0.0;

    for update in 1..=cfg.max_updates {
        if cursor == batches.len() {
            epoch += 1;
            batches = make_batches(&splits.train, cfg.max_tokens, mc.max_seq_len, epoch_seed(cfg.seeds.data, epoch), true)?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;
        let seed: u64 = dropout_rng.random();
        let dropout = (mc.dropout > 0.0).then_some(seed);
        let (grads, combined, nll) = batch_step(&model, batch, &cfg.objective, dropout, (update - 1) as usize)?;
        acc_combined += combined;
        acc_nll += nll;
        acc_tokens += batch.token_count();
        match adam.step(model.params_mut().tensors_mut(), &grads, &hp) {
            StepOutcome::Applied { lr: l, .. } => lr = l,
            StepOutcome::SkippedNonFinite => {
                skipped += 1;
                log::warn!("update {update}: non-finite gradient, step skipped");
            }
        }

        if update % cfg.eval_interval != 0 && update != cfg.max_updates {
            continue;
        }
        let vectors = model.score_all(&splits.dev, dev_budget)?;
        let dev = dev_scores(&vectors, &cfg.objective)?;
        let checkpoint = match sink {
            Some(s) => {
                let name = checkpoint_name(update);
                Checkpoint::new(model.cast::<f32>(), s.vocab_hash).save(&s.dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        log::info!(
            "update {update} epoch {epoch}: train {:.4} nats/token, dev nll {:.4} nats/token ({:.1}s)",
            acc_combined / acc_tokens as f64,
            dev.nll_per_token,
            started.elapsed().as_secs_f64()
        );
        records.push(TrainRecord {
            update,
            epoch,
            lr,
            train_combined_per_token: acc_combined / acc_tokens as f64,
            train_nll_per_token: acc_nll / acc_tokens as f64,
            dev_nll_per_token: dev.nll_per_token,
            dev_reg_per_sequence: dev.reg_per_sequence,
            dev_combined_per_token: dev.combined_per_token,
            skipped_updates: skipped,
            checkpoint,
        });
        (acc_combined, acc_nll, acc_tokens) = (0.0, 0.0, 0);
        if !(dev.nll_per_token <= limit) {
            return Err(Error::Diverged {
                update,
                dev_nll: dev.nll_per_token,
                limit,
            });
        }
        if dev.nll_per_token < best_nll {
            best_nll = dev.nll_per_token;
            best_model = model.cast::<f32>();
        }
    }

    let best = select_best_by(records.iter().map(|r| r.dev_nll_per_token)).expect("at least one record");
    Ok(TrainOutcome {
        report: TrainReport { records, best },
        best_model,
        final_model: model.cast::<f32>(),
    })
}
