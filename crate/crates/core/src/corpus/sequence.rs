use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Ids of one sequence: BOS, body, EOS. `len()` counts both markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let n = ids.len();
        if n < 2 || ids[0] != BOS || ids[n - 1] != EOS {
            return Err(Error::MalformedSequence(format!(
                "sequence must begin with BOS and end with EOS: {ids:?}"
            )));
        }
        if ids[1..n - 1].iter().any(|&t| t == BOS || t == EOS || t == PAD) {
            return Err(Error::MalformedSequence(format!(
                "BOS/EOS/PAD inside sequence body: {ids:?}"
            )));
        }
        Ok(TokenSequence(ids))
    }

    /// Wraps a body in BOS/EOS.
    pub fn from_body(body: &[u32]) -> Result<Self> {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens between BOS and EOS.
    pub fn body(&self) -> &[u32] {
        &self.0[1..self.0.len() - 1]
    }

    /// Number of scored positions: every token after BOS, EOS included.
    pub fn predicted_len(&self) -> usize {
        self.0.len() - 1
    }

    /// Model inputs (BOS through the last body token).
    pub fn inputs(&self) -> &[u32] {
        &self.0[..self.0.len() - 1]
    }

    /// Prediction targets (first body token through EOS).
    pub fn targets(&self) -> &[u32] {
        &self.0[1..]
    }
}
