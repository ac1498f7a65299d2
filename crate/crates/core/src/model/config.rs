use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    #[default]
    Learned,
}

/// Architecture of the causal decoder.
///
/// `max_seq_len` bounds the number of input positions, so the longest
/// scorable sequence has `max_seq_len + 1` ids (BOS through EOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// May be left out of a config file and filled in from the vocabulary.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub positional: PositionalKind,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn n_heads() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        128
    }
    pub fn max_seq_len() -> usize {
        128
    }
    pub fn dropout() -> f64 {
        0.1
    }
}

impl ModelConfig {
    /// Small default: 2 layers, 2 heads, width 64, feed-forward 128, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: defaults::d_model(),
            n_layers: defaults::n_layers(),
            n_heads: defaults::n_heads(),
            d_ff: defaults::d_ff(),
            max_seq_len: defaults::max_seq_len(),
            dropout: defaults::dropout(),
            init_seed: 0,
            positional: PositionalKind::Learned,
        }
    }

    /// Six layers and eight heads at width 512.
    pub fn base_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            max_seq_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
