use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledDataset, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPolicy {
    /// `floor(n_i / 2)` random samples of each class for training.
    RandomHalf,
    /// A fixed number of random samples per class for training.
    PerClassCount(usize),
    /// A circular run of consecutive samples (dataset order) per class for
    /// training, starting at a random offset.
    Consecutive(usize),
}

/// Partitions `dataset` into label-grouped `(train, test)` sets.
///
/// Random selections keep dataset order inside each class; consecutive runs
/// keep run order, so a wrapped run stays contiguous in pose.
pub fn split(dataset: &LabeledDataset, policy: SplitPolicy, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.num_classes() {
        let idx = dataset.class_indices(c);
        let n = idx.len();
        let (mut tr, mut te): (Vec<usize>, Vec<usize>) = match policy {
            SplitPolicy::RandomHalf | SplitPolicy::PerClassCount(_) => {
                let k = match policy {
                    SplitPolicy::PerClassCount(k) => k,
                    _ => n / 2,
                };
                if k > n {
                    return Err(DataError::InfeasibleSplit(format!("class {c} has {n} samples, {k} requested")));
                }
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng);
                let (a, b) = shuffled.split_at(k);
                let (mut a, mut b) = (a.to_vec(), b.to_vec());
                a.sort_unstable();
                b.sort_unstable();
                (a, b)
            }
            SplitPolicy::Consecutive(k) => {
                if k > n || n == 0 {
                    return Err(DataError::InfeasibleSplit(format!("class {c} has {n} samples, run of {k} requested")));
                }
                let start = rng.random_range(0..n);
                let tr = (0..k).map(|i| idx[(start + i) % n]).collect();
                let te = (k..n).map(|i| idx[(start + i) % n]).collect();
                (tr, te)
            }
        };
        train.append(&mut tr);
        test.append(&mut te);
    }
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
