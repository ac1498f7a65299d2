//! Binary checkpoint format.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic          5 bytes  "UIDLM"
//! version        u32      1
//! vocab_size     u32
//! d_model        u32
//! n_layers       u32
//! n_heads        u32
//! d_ff           u32
//! max_seq_len    u32
//! dropout        f64
//! init_seed      u64
//! positional     u8       0 = learned
//! vocab hash     32 bytes SHA-256 of the vocabulary file
//! tensor count   u32
//! per tensor:    rank u32, rank × u32 dims, f32 data
//! ```
//!
//! Tensors follow [`param_ids`](super::param_ids) order.

use std::path::Path;

use super::config::{ModelConfig, PositionalKind};
use super::params::{param_shapes, Parameters};
use super::transformer::TransformerLm;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 5] = b"UIDLM";
pub const FORMAT_VERSION: u32 = 1;

/// A model together with the fingerprint of the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerLm<f32>,
    pub vocab_hash: [u8; 32],
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn extent(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("extent {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(model: TransformerLm<f32>, vocab_hash: [u8; 32]) -> Self {
        Checkpoint { model, vocab_hash }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.model.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len] {
            put_u32(&mut out, v)?;
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        out.push(match c.positional {
            PositionalKind::Learned => 0,
        });
        out.extend_from_slice(&self.vocab_hash);
        let tensors = self.model.params().tensors();
        put_u32(&mut out, tensors.len())?;
        for t in tensors {
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("missing UIDLM magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = ModelConfig {
            vocab_size: r.extent()?,
            d_model: r.extent()?,
            n_layers: r.extent()?,
            n_heads: r.extent()?,
            d_ff: r.extent()?,
            max_seq_len: r.extent()?,
            dropout: r.f64()?,
            init_seed: r.u64()?,
            positional: match r.take(1)?[0] {
                0 => PositionalKind::Learned,
                k => return Err(Error::Checkpoint(format!("unknown positional kind {k}"))),
            },
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
        let vocab_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let expected = param_shapes(&config);
        let count = r.extent()?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, configuration needs {}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (i, shape) in expected.iter().enumerate() {
            let rank = r.extent()?;
            let dims = (0..rank).map(|_| r.extent()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} has shape {dims:?}, configuration needs {shape:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(dims, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let params = Parameters::from_tensors(&config, tensors);
        let model = TransformerLm::from_parameters(config, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint { model, vocab_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
