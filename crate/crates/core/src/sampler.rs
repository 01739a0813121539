//! Minibatch index samplers.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Source of per-epoch minibatch index lists.
pub trait Sampler {
    /// Batches of the next epoch, in order.
    fn next_epoch(&mut self) -> Vec<Vec<usize>>;
}

/// Uniform reshuffle of a fixed pool every epoch; the last batch may be short.
#[derive(Debug, Clone)]
pub struct ShuffledSampler {
    pool: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl ShuffledSampler {
    pub fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidConfig("cannot sample from an empty pool".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(Self {
            pool,
            batch_size,
            rng: seed::rng(seed),
        })
    }
}

impl Sampler for ShuffledSampler {
    fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.pool.shuffle(&mut self.rng);
        self.pool.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Draws equal numbers of bias-confirming and bias-conflicting indices into
/// every batch.
///
/// The larger set is covered exactly once per epoch in shuffled order. The
/// smaller set is read from a shuffled cycle that is reshuffled whenever it
/// cannot supply a whole batch-half, so indices never repeat within a batch.
/// If the smaller set holds fewer than `batch_size / 2` indices, each half is
/// capped at its size; a short final batch keeps both halves equal.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    larger: Vec<usize>,
    smaller: Vec<usize>,
    /// `true` when `larger` is the bias-conflicting set.
    conflicting_is_larger: bool,
    half: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(confirming: &[usize], conflicting: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "balanced sampling needs an even batch size of at least 2, got {batch_size}"
            )));
        }
        if confirming.is_empty() {
            return Err(Error::EmptyConfirming);
        }
        if conflicting.is_empty() {
            return Err(Error::EmptyConflicting);
        }
        let conflicting_is_larger = conflicting.len() > confirming.len();
        let (larger, smaller) = if conflicting_is_larger {
            (conflicting.to_vec(), confirming.to_vec())
        } else {
            (confirming.to_vec(), conflicting.to_vec())
        };
        let half = (batch_size / 2).min(smaller.len());
        Ok(Self {
            larger,
            smaller,
            conflicting_is_larger,
            half,
            // Forces a shuffle on first use.
            cursor: usize::MAX,
            rng: seed::rng(seed),
        })
    }

    /// Batches per epoch: `ceil(larger / half)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.larger.len().div_ceil(self.half)
    }

    fn draw_smaller(&mut self, k: usize) -> Vec<usize> {
        if self.cursor.saturating_add(k) > self.smaller.len() {
            self.smaller.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.smaller[self.cursor..self.cursor + k].to_vec();
        self.cursor += k;
        out
    }
}

impl Sampler for BalancedSampler {
    fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.larger.shuffle(&mut self.rng);
        let larger = self.larger.clone();
        larger
            .chunks(self.half)
            .map(|big| {
                let small = self.draw_smaller(big.len());
                let (b, c) = if self.conflicting_is_larger {
                    (small, big.to_vec())
                } else {
                    (big.to_vec(), small)
                };
                let mut batch = b;
                batch.extend(c);
                batch
            })
            .collect()
    }
}

/// One epoch of balanced batches; see [`BalancedSampler`].
pub fn balanced_batches(
    confirming: &[usize],
    conflicting: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    Ok(BalancedSampler::new(confirming, conflicting, batch_size, seed)?.next_epoch())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn shuffled_epoch_covers_pool_in_ceil_batches() {
        let mut s = ShuffledSampler::new((0..103).collect(), 10, 3).unwrap();
        let epoch = s.next_epoch();
        assert_eq!(epoch.len(), 11);
        let seen: BTreeSet<usize> = epoch.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 103);
        assert_ne!(epoch, s.next_epoch());
    }

    #[test]
    fn balanced_counts_and_cover() {
        let b: Vec<usize> = (0..100).collect();
        let c: Vec<usize> = (100..110).collect();
        let epoch = balanced_batches(&b, &c, 20, 1).unwrap();
        assert_eq!(epoch.len(), 10);
        let mut seen_b: Vec<usize> = Vec::new();
        for batch in &epoch {
            let nb = batch.iter().filter(|&&i| i < 100).count();
            assert_eq!(nb, 10);
            assert_eq!(batch.len() - nb, 10);
            seen_b.extend(batch.iter().filter(|&&i| i < 100));
        }
        seen_b.sort();
        assert_eq!(seen_b, b);
    }

    #[test]
    fn short_last_batch_stays_balanced() {
        let b: Vec<usize> = (0..25).collect();
        let c: Vec<usize> = (25..33).collect();
        let epoch = balanced_batches(&b, &c, 8, 7).unwrap();
        assert_eq!(epoch.len(), 7);
        for batch in &epoch {
            let nb = batch.iter().filter(|&&i| i < 25).count();
            assert_eq!(2 * nb, batch.len());
            let unique: BTreeSet<_> = batch.iter().collect();
            assert_eq!(unique.len(), batch.len());
        }
        assert_eq!(epoch.last().unwrap().len(), 2);
    }

    #[test]
    fn larger_conflicting_set_is_covered() {
        let b: Vec<usize> = (0..4).collect();
        let c: Vec<usize> = (4..20).collect();
        let epoch = balanced_batches(&b, &c, 8, 2).unwrap();
        let mut seen_c: Vec<usize> = epoch.iter().flatten().copied().filter(|&i| i >= 4).collect();
        seen_c.sort();
        assert_eq!(seen_c, c);
    }

    #[test]
    fn tiny_smaller_set_caps_the_half() {
        let b: Vec<usize> = (0..9).collect();
        let c = vec![100, 101, 102];
        let mut s = BalancedSampler::new(&b, &c, 16, 0).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        for batch in s.next_epoch() {
            assert_eq!(batch.len(), 6);
            assert_eq!(batch.iter().filter(|&&i| i >= 100).count(), 3);
        }
    }

    #[test]
    fn rejects_odd_batch_and_empty_sets() {
        assert!(balanced_batches(&[1], &[2], 3, 0).is_err());
        assert!(balanced_batches(&[], &[2], 4, 0).is_err());
        assert!(balanced_batches(&[1], &[], 4, 0).is_err());
    }
}
