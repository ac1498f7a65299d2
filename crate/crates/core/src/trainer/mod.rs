//! Optimization loop, dev-based model selection, β sweeps, and the
//! training-set size ablation.

mod optim;
mod run;
mod sweep;

pub use optim::{global_norm, learning_rate, AdamParams, AdamState, StepOutcome};
pub use run::{checkpoint_name, train, CheckpointSink, TrainOutcome};
pub use sweep::{
    ablation_csv, nested_subsets, size_ablation, sweep_beta, sweep_csv, AblationRow, ObjectiveVariant, SweepRow,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::StorageMode;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::objective::ObjectiveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub dropout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data: 2,
            dropout: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::warmup")]
    pub warmup: u64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "defaults::max_updates")]
    pub max_updates: u64,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: u64,
    /// Upper bound on the summed sequence lengths (BOS/EOS included) of a batch.
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub storage: StorageMode,
}

mod defaults {
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn adam_beta1() -> f64 {
        0.9
    }
    pub fn adam_beta2() -> f64 {
        0.98
    }
    pub fn adam_eps() -> f64 {
        1e-9
    }
    pub fn warmup() -> u64 {
        400
    }
    pub fn clip_norm() -> f64 {
        0.5
    }
    pub fn max_updates() -> u64 {
        2000
    }
    pub fn eval_interval() -> u64 {
        200
    }
    pub fn max_tokens() -> usize {
        2048
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            lr: defaults::lr(),
            adam_beta1: defaults::adam_beta1(),
            adam_beta2: defaults::adam_beta2(),
            adam_eps: defaults::adam_eps(),
            warmup: defaults::warmup(),
            clip_norm: defaults::clip_norm(),
            max_updates: defaults::max_updates(),
            eval_interval: defaults::eval_interval(),
            max_tokens: defaults::max_tokens(),
            seeds: Seeds::default(),
            storage: StorageMode::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if self.max_updates == 0 || self.eval_interval == 0 {
            return Err(Error::Config("max_updates and eval_interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("moment decay rates must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            warmup: self.warmup,
            clip_norm: self.clip_norm,
        }
    }
}

/// One dev evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub update: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Training objective per token since the previous record, dropout on.
    pub train_combined_per_token: f64,
    pub train_nll_per_token: f64,
    pub dev_nll_per_token: f64,
    /// Mean per-sequence regularizer value on dev (0 without a regularizer).
    pub dev_reg_per_sequence: f64,
    /// Dev `nll_sum + β·reg_sum`, per token.
    pub dev_combined_per_token: f64,
    pub skipped_updates: u64,
    /// File name of the checkpoint written at this record, if any.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Index into `records` of the selected checkpoint.
    pub best: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Interval(TrainRecord),
    Best { record: usize, update: u64, checkpoint: Option<String> },
}

impl TrainReport {
    pub fn best_record(&self) -> &TrainRecord {
        &self.records[self.best]
    }

    /// One `{"kind":"interval",…}` line per record, then a `{"kind":"best",…}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out += &serde_json::to_string(&ReportLine::Interval(r.clone())).expect("record serializes");
            out.push('\n');
        }
        let best = self.best_record();
        let line = ReportLine::Best {
            record: self.best,
            update: best.update,
            checkpoint: best.checkpoint.clone(),
        };
        out += &serde_json::to_string(&line).expect("record serializes");
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut best = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                ReportLine::Interval(r) => records.push(r),
                ReportLine::Best { record, .. } => best = Some(record),
            }
        }
        let best = best.ok_or_else(|| Error::Invalid("report has no best line".into()))?;
        if best >= records.len() {
            return Err(Error::Invalid(format!("best record {best} out of range")));
        }
        Ok(TrainReport { records, best })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Index of the record with the lowest dev NLL/token; ties go to the earliest.
pub fn select_best(records: &[TrainRecord]) -> Option<usize> {
    select_best_by(records.iter().map(|r| r.dev_nll_per_token))
}

pub(crate) fn select_best_by(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests;
