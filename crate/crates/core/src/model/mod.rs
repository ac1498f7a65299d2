//! Causal transformer language model: parameters, graph forward pass,
//! incremental decoding, and checkpoints.

mod checkpoint;
mod config;
mod decoder;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, PositionalKind};
pub use decoder::DecoderState;
pub use params::{param_ids, param_shapes, LayerParam, ParamId, Parameters, LAYER_PARAMS};
pub use transformer::TransformerLm;

use crate::corpus::{TokenSequence, BOS};
use crate::error::{Error, Result};

/// Per-token surprisals (nats) of one sequence, for every position after BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisalVector {
    pub values: Vec<f64>,
    pub targets: Vec<u32>,
}

impl SurprisalVector {
    pub fn new(values: Vec<f64>, targets: Vec<u32>) -> Self {
        debug_assert_eq!(values.len(), targets.len());
        SurprisalVector { values, targets }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.values.len() as f64
    }
}

/// Anything that yields next-token log-probabilities one step at a time.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Most input positions (BOS included) the model can condition on.
    fn max_input_len(&self) -> usize;

    fn begin(&self) -> Self::State;

    /// Reads `token` and returns log p(· | everything read so far).
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;

    /// Surprisals by stepwise decoding.
    fn score_incremental(&self, seq: &TokenSequence) -> Result<SurprisalVector> {
        if seq.inputs().len() > self.max_input_len() {
            return Err(Error::SequenceTooLong {
                line: 1,
                len: seq.len(),
                max: self.max_input_len() + 1,
            });
        }
        let mut state = self.begin();
        let mut values = Vec::with_capacity(seq.predicted_len());
        debug_assert_eq!(seq.ids()[0], BOS);
        for (&input, &target) in seq.inputs().iter().zip(seq.targets()) {
            let lp = self.advance(&mut state, input)?;
            values.push(-lp[target as usize]);
        }
        Ok(SurprisalVector::new(values, seq.targets().to_vec()))
    }
}
