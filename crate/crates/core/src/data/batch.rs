use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::SampleManifest;
use crate::error::{CdaError, Result};
use crate::seed::mix;

/// Seeded mini-batch schedule over an active index set.
///
/// The active set is kept sorted, so the batches depend on the set only and
/// not on the order in which the caller listed it. Epoch `e` is the active
/// set shuffled with a generator derived from `(seed, e)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    active: Vec<usize>,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl BatchIterator {
    pub fn new(mut active: Vec<usize>, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if active.is_empty() {
            return Err(CdaError::EmptyActiveSet);
        }
        if batch_size == 0 {
            return Err(CdaError::Validation("batch size must be positive".into()));
        }
        active.sort_unstable();
        active.dedup();
        Ok(Self {
            active,
            batch_size,
            seed,
            drop_last,
        })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.active.len();
        if self.drop_last {
            (n / self.batch_size).max(1)
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    /// Shuffled index order for `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.active.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let order = self.order(epoch);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if self.drop_last && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < self.batch_size) {
            batches.pop();
        }
        batches
    }
}

/// Batches of epoch 0 over the manifest (or the given subset of it).
pub fn iterate_batches(
    manifest: &SampleManifest,
    batch_size: usize,
    seed: u64,
    active_indices: Option<&[usize]>,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    let active = match active_indices {
        Some(a) => {
            if let Some(&bad) = a.iter().find(|&&i| i >= manifest.len()) {
                return Err(CdaError::Validation(format!(
                    "active index {bad} outside manifest of {} samples",
                    manifest.len()
                )));
            }
            a.to_vec()
        }
        None => (0..manifest.len()).collect(),
    };
    Ok(BatchIterator::new(active, batch_size, seed, false)?.epoch(0).into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_by_four() {
        let it = BatchIterator::new((0..10).collect(), 4, 1, false).unwrap();
        let sizes: Vec<usize> = it.epoch(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let dropped = BatchIterator::new((0..10).collect(), 4, 1, true).unwrap();
        assert_eq!(dropped.epoch(0).len(), 2);
    }

    #[test]
    fn small_active_set_single_batch() {
        let it = BatchIterator::new(vec![0, 1, 2], 16, 9, false).unwrap();
        let b = it.epoch(0);
        assert_eq!(b.len(), 1);
        let mut first = b[0].clone();
        first.sort();
        assert_eq!(first, vec![0, 1, 2]);
    }

    #[test]
    fn empty_active_set_is_an_error() {
        assert!(matches!(BatchIterator::new(vec![], 4, 0, false), Err(CdaError::EmptyActiveSet)));
    }

    #[test]
    fn listing_order_does_not_matter() {
        let a = BatchIterator::new(vec![5, 1, 3, 2], 2, 4, false).unwrap();
        let b = BatchIterator::new(vec![1, 2, 3, 5], 2, 4, false).unwrap();
        assert_eq!(a.epoch(3), b.epoch(3));
    }

    proptest! {
        #[test]
        fn epochs_are_permutations(n in 1usize..80, bs in 1usize..20, seed in any::<u64>(), epoch in 0u64..5) {
            let it = BatchIterator::new((0..n).collect(), bs, seed, false).unwrap();
            let mut flat: Vec<usize> = it.epoch(epoch).concat();
            prop_assert_eq!(it.epoch(epoch), it.epoch(epoch));
            flat.sort();
            prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
        }
    }
}
