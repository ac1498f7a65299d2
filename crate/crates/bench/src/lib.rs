//! Fixed inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uidlm::corpus::{Batch, TokenSequence};
use uidlm::diffmath::Tensor;
use uidlm::model::{ModelConfig, TransformerLm};
use uidlm::stats::PairedScores;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

pub fn surprisals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..12.0)).collect()
}

pub fn paired(n: usize, seed: u64) -> PairedScores {
    PairedScores::new(surprisals(n, seed), surprisals(n, seed + 1)).expect("equal lengths")
}

/// The default model with a small vocabulary.
pub fn model(vocab: usize) -> TransformerLm<f32> {
    TransformerLm::new(ModelConfig::desk(vocab)).expect("valid config")
}

/// `n` sequences of `len` random body tokens.
pub fn sequences(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let body: Vec<u32> = (0..len).map(|_| rng.random_range(4..vocab as u32)).collect();
            TokenSequence::from_body(&body).expect("nonempty body")
        })
        .collect()
}

pub fn batch(seqs: &[TokenSequence]) -> Batch {
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs, (0..seqs.len()).collect())
}
