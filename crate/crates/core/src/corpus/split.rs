use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Train/dev/test partition of a corpus. `indices` record which input lines
/// went where.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
    pub indices: [Vec<usize>; 3],
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl<T> CorpusSplits<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> CorpusSplits<U> {
        CorpusSplits {
            train: self.train.into_iter().map(&mut f).collect(),
            dev: self.dev.into_iter().map(&mut f).collect(),
            test: self.test.into_iter().map(&mut f).collect(),
            indices: self.indices,
            seed: self.seed,
            ratios: self.ratios,
        }
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(T) -> Result<U, E>) -> Result<CorpusSplits<U>, E> {
        Ok(CorpusSplits {
            train: self.train.into_iter().map(&mut f).collect::<Result<_, _>>()?,
            dev: self.dev.into_iter().map(&mut f).collect::<Result<_, _>>()?,
            test: self.test.into_iter().map(&mut f).collect::<Result<_, _>>()?,
            indices: self.indices,
            seed: self.seed,
            ratios: self.ratios,
        })
    }
}

/// Seeded shuffle followed by a floor-based split; the remainder goes to train.
pub fn split_corpus<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<CorpusSplits<T>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Invalid(format!("need at least 3 lines to split, got {n}")));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    // The epsilon keeps products such as 0.29 * 100 from flooring to 28.
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_dev = floor(ratios[1]);
    let n_test = floor(ratios[2]);
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_idx = order[..n_train].to_vec();
    let dev_idx = order[n_train..n_train + n_dev].to_vec();
    let test_idx = order[n_train + n_dev..].to_vec();
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplits {
        train: pick(&train_idx),
        dev: pick(&dev_idx),
        test: pick(&test_idx),
        indices: [train_idx, dev_idx, test_idx],
        seed,
        ratios,
    })
}
