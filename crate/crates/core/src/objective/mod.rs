//! Training losses: token-summed NLL, the surprisal regularizers that push
//! toward uniform information density, label smoothing, and their
//! combination `nll + β·R`.

use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{SurprisalVector, TransformerLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    Variance,
    LocalConsistency,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub regularizer: RegularizerKind,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Average per-sequence penalties over the batch instead of summing them.
    #[serde(default)]
    pub mean_over_sequences: bool,
}

impl ObjectiveConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn regularized(kind: RegularizerKind, beta: f64) -> Self {
        ObjectiveConfig {
            regularizer: kind,
            beta,
            ..Self::default()
        }
    }

    pub fn smoothed(alpha: f64) -> Self {
        ObjectiveConfig {
            label_smoothing: alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} is not finite", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Components of one evaluation of the objective, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_sum: f64,
    /// Aggregated penalty (sum over sequences, or mean when configured); 0 for no regularizer.
    pub reg_sum: f64,
    /// Label-smoothed data term when smoothing is on.
    pub smoothed_nll: Option<f64>,
    /// Data term (`nll_sum` or `smoothed_nll`) + β·`reg_sum`.
    pub combined: f64,
    pub token_count: usize,
    pub sequence_count: usize,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            nll_sum: 0.0,
            reg_sum: 0.0,
            smoothed_nll: None,
            combined: 0.0,
            token_count: 0,
            sequence_count: 0,
        }
    }

    /// Adds another batch's components.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.nll_sum += other.nll_sum;
        self.reg_sum += other.reg_sum;
        self.combined += other.combined;
        self.smoothed_nll = match (self.smoothed_nll, other.smoothed_nll) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
        self.token_count += other.token_count;
        self.sequence_count += other.sequence_count;
    }

    pub fn nll_per_token(&self) -> f64 {
        self.nll_sum / self.token_count as f64
    }

    pub fn combined_per_token(&self) -> f64 {
        self.combined / self.token_count as f64
    }
}

// ---- direct formulas ------------------------------------------------------------

fn nonempty(op: &'static str, u: &[f64]) -> Result<()> {
    if u.is_empty() {
        Err(Error::domain(op, "empty surprisal vector"))
    } else {
        Ok(())
    }
}

/// Σ over sequences of Σ_t u_t.
pub fn nll(vectors: &[SurprisalVector]) -> f64 {
    vectors.iter().map(SurprisalVector::total).sum()
}

/// Population variance `(1/n) Σ (u_t − μ)²`.
pub fn variance_reg(u: &[f64]) -> Result<f64> {
    nonempty("variance_reg", u)?;
    let n = u.len() as f64;
    // deviations from u[0] make constant input exactly 0
    let d: Vec<f64> = u.iter().map(|x| x - u[0]).collect();
    let mu = d.iter().sum::<f64>() / n;
    Ok(d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n)
}

/// Mean squared difference of adjacent surprisals; 0 for a single position.
pub fn local_consistency_reg(u: &[f64]) -> Result<f64> {
    nonempty("local_consistency_reg", u)?;
    if u.len() == 1 {
        return Ok(0.0);
    }
    Ok(u.windows(2).map(|w| (w[0] - w[1]) * (w[0] - w[1])).sum::<f64>() / (u.len() - 1) as f64)
}

pub fn max_reg(u: &[f64]) -> Result<f64> {
    nonempty("max_reg", u)?;
    Ok(u.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn regularizer(kind: RegularizerKind, u: &[f64]) -> Result<f64> {
    match kind {
        RegularizerKind::None => Ok(0.0),
        RegularizerKind::Variance => variance_reg(u),
        RegularizerKind::LocalConsistency => local_consistency_reg(u),
        RegularizerKind::Max => max_reg(u),
    }
}

/// `Σ_rows (1−α)·(−log p(target)) + α·mean_v(−log p(v))` over a row-major
/// `(targets.len(), vocab)` log-probability table. With `α = 0` this is the
/// plain target NLL.
pub fn label_smoothed_nll(log_probs: &[f64], vocab: usize, targets: &[u32], alpha: f64) -> Result<f64> {
    if log_probs.len() != targets.len() * vocab {
        return Err(Error::shape("label_smoothed_nll", &[targets.len(), vocab], &[log_probs.len()]));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::domain("label_smoothed_nll", format!("alpha {alpha} outside [0, 1)")));
    }
    let mut total = 0.0;
    for (row, &t) in log_probs.chunks(vocab).zip(targets) {
        let target = -row[t as usize];
        if alpha == 0.0 {
            total += target;
        } else {
            let uniform = -row.iter().sum::<f64>() / vocab as f64;
            total += (1.0 - alpha) * target + alpha * uniform;
        }
    }
    Ok(total)
}

/// Objective evaluated from per-sequence surprisals; smoothing is not
/// representable here and must be off.
pub fn breakdown_from_surprisals(vectors: &[SurprisalVector], cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    if cfg.label_smoothing != 0.0 {
        return Err(Error::Config("label smoothing needs the full log-probability table".into()));
    }
    let nll_sum = nll(vectors);
    let mut reg_sum = vectors
        .iter()
        .map(|v| regularizer(cfg.regularizer, &v.values))
        .sum::<Result<f64>>()?;
    if cfg.mean_over_sequences && !vectors.is_empty() {
        reg_sum /= vectors.len() as f64;
    }
    let combined = if cfg.regularizer == RegularizerKind::None || cfg.beta == 0.0 {
        nll_sum
    } else {
        nll_sum + cfg.beta * reg_sum
    };
    Ok(LossBreakdown {
        nll_sum,
        reg_sum,
        smoothed_nll: None,
        combined,
        token_count: vectors.iter().map(SurprisalVector::len).sum(),
        sequence_count: vectors.len(),
    })
}

// ---- differentiable objective ---------------------------------------------------

/// Nodes of the objective built on a log-probability table.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub combined: Var,
    pub nll: Var,
    pub reg: Option<Var>,
    pub smoothed: Option<Var>,
    pub token_count: usize,
    pub sequence_count: usize,
}

impl LossNodes {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        let read = |v: Var| g.value(v).item().as_f64();
        LossBreakdown {
            nll_sum: read(self.nll),
            reg_sum: self.reg.map_or(0.0, read),
            smoothed_nll: self.smoothed.map(read),
            combined: read(self.combined),
            token_count: self.token_count,
            sequence_count: self.sequence_count,
        }
    }
}

fn sequence_penalty<S: Scalar>(g: &mut Graph<S>, kind: RegularizerKind, u: Var, n: usize) -> Result<Option<Var>> {
    Ok(match kind {
        RegularizerKind::None => None,
        RegularizerKind::Variance => Some(g.var_axis(u, 0)?),
        RegularizerKind::LocalConsistency if n == 1 => None,
        RegularizerKind::LocalConsistency => {
            let head: Vec<usize> = (0..n - 1).collect();
            let tail: Vec<usize> = (1..n).collect();
            let a = g.gather_rows(u, &head)?;
            let b = g.gather_rows(u, &tail)?;
            let diff = g.sub(a, b)?;
            let sq = g.mul(diff, diff)?;
            Some(g.mean_axis(sq, 0)?)
        }
        RegularizerKind::Max => Some(g.max_axis(u, 0)?),
    })
}

/// Builds `data + β·R` on a `(rows * steps, vocab)` log-probability table for
/// `batch`. Any non-finite intermediate is reported as
/// [`Error::LossNotFinite`] naming `batch_index`.
pub fn loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    log_probs: Var,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    batch_index: usize,
) -> Result<LossNodes> {
    cfg.validate()?;
    build(g, log_probs, batch, cfg).map_err(|e| match e {
        Error::NonFinite { .. } => Error::LossNotFinite { batch: batch_index },
        other => other,
    })
}

fn build<S: Scalar>(g: &mut Graph<S>, log_probs: Var, batch: &Batch, cfg: &ObjectiveConfig) -> Result<LossNodes> {
    let targets: Vec<usize> = batch.targets().iter().map(|&t| t as usize).collect();
    let positions = batch.target_positions();
    let flat: Vec<usize> = positions.concat();
    let picked = g.select_last(log_probs, &targets)?;
    let real = g.gather_rows(picked, &flat)?;
    let u = g.scale(real, -1.0)?;
    let nll = g.sum_all(u)?;

    let mut data = nll;
    let mut smoothed = None;
    if cfg.label_smoothing > 0.0 {
        let alpha = cfg.label_smoothing;
        let rows = g.gather_rows(log_probs, &flat)?;
        let mean_lp = g.mean_axis(rows, 1)?;
        let uniform = g.sum_all(mean_lp)?;
        let a = g.scale(nll, 1.0 - alpha)?;
        let b = g.scale(uniform, -alpha)?;
        let s = g.add(a, b)?;
        smoothed = Some(s);
        data = s;
    }

    let mut reg = None;
    if cfg.regularizer != RegularizerKind::None {
        let mut offset = 0;
        let mut total: Option<Var> = None;
        for p in &positions {
            let n = p.len();
            let idx: Vec<usize> = (offset..offset + n).collect();
            offset += n;
            let ur = g.gather_rows(u, &idx)?;
            if let Some(r) = sequence_penalty(g, cfg.regularizer, ur, n)? {
                total = Some(match total {
                    None => r,
                    Some(t) => g.add(t, r)?,
                });
            }
        }
        let mut r = match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(S::zero())),
        };
        if cfg.mean_over_sequences {
            r = g.scale(r, 1.0 / positions.len() as f64)?;
        }
        reg = Some(r);
    }

    let combined = match reg {
        Some(r) if cfg.beta != 0.0 => {
            let br = g.scale(r, cfg.beta)?;
            g.add(data, br)?
        }
        _ => data,
    };
    Ok(LossNodes {
        combined,
        nll,
        reg,
        smoothed,
        token_count: flat.len(),
        sequence_count: positions.len(),
    })
}

/// Evaluation-mode objective of `model` on one batch.
pub fn combined_loss<S: Scalar>(model: &TransformerLm<S>, batch: &Batch, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = model.bind_constant(&mut g);
    let lp = model.forward_batch(&mut g, &vars, batch)?;
    Ok(loss_graph(&mut g, lp, batch, cfg, 0)?.breakdown(&g))
}
