use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sequence::TokenSequence;
use super::vocab::PAD;
use crate::error::{Error, Result};

/// Padded block of sequences.
///
/// `ids` is `rows × width`, right-padded with PAD. The model reads columns
/// `0..width-1` and predicts columns `1..width`, so `loss_mask` is
/// `rows × (width - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub loss_mask: Vec<bool>,
    /// Position of each row in the slice the batch was built from.
    pub members: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TokenSequence], members: Vec<usize>) -> Self {
        let rows = seqs.len();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * width];
        let mut attention_mask = vec![false; rows * width];
        let steps = width.saturating_sub(1);
        let mut loss_mask = vec![false; rows * steps];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.len()].copy_from_slice(s.ids());
            attention_mask[r * width..r * width + s.len()].fill(true);
            loss_mask[r * steps..r * steps + s.predicted_len()].fill(true);
        }
        Batch {
            ids,
            rows,
            width,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            attention_mask,
            loss_mask,
            members,
        }
    }

    /// Number of input positions per row.
    pub fn steps(&self) -> usize {
        self.width.saturating_sub(1)
    }

    /// Input ids, `rows × steps`.
    pub fn inputs(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows * self.steps());
        for r in 0..self.rows {
            out.extend_from_slice(&self.ids[r * self.width..(r + 1) * self.width - 1]);
        }
        out
    }

    /// Target id at every input position, `rows × steps` (PAD where masked).
    pub fn targets(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.rows * self.steps());
        for r in 0..self.rows {
            out.extend_from_slice(&self.ids[r * self.width + 1..(r + 1) * self.width]);
        }
        out
    }

    /// Flat `(row * steps + t)` indices of real prediction targets, grouped by row.
    pub fn target_positions(&self) -> Vec<Vec<usize>> {
        let steps = self.steps();
        (0..self.rows)
            .map(|r| (0..self.lengths[r] - 1).map(|t| r * steps + t).collect())
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }
}

/// Packs sequences into batches whose summed true lengths stay within
/// `max_tokens`.
///
/// With `shuffle` off, sequence order is preserved. With it on, sequences are
/// shuffled, sorted by length so similar lengths share a batch, and the
/// resulting batches are shuffled again; all randomness comes from `seed`.
/// A sequence whose input length (`len - 1`) exceeds `max_len` is rejected.
pub fn make_batches(
    seqs: &[TokenSequence],
    max_tokens: usize,
    max_len: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    for (line, s) in seqs.iter().enumerate() {
        if s.len() - 1 > max_len {
            return Err(Error::SequenceTooLong {
                line: line + 1,
                len: s.len(),
                max: max_len + 1,
            });
        }
        if s.len() > max_tokens {
            return Err(Error::Config(format!(
                "token budget {max_tokens} is smaller than sequence {} of length {}",
                line + 1,
                s.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if shuffle {
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| seqs[i].len());
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let len = seqs[i].len();
        if used + len > max_tokens && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += len;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    if shuffle {
        groups.shuffle(&mut rng);
    }
    Ok(groups
        .into_iter()
        .map(|g| {
            let members: Vec<&TokenSequence> = g.iter().map(|&i| &seqs[i]).collect();
            Batch::from_sequences(&members, g)
        })
        .collect())
}
