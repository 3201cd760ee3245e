use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmfError, Result};

/// Known cross-graph entity pairs with a train/validation/test partition of
/// their indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSeedSet {
    pub pairs: Vec<(usize, usize)>,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl AlignmentSeedSet {
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train_idx.iter().map(|&i| self.pairs[i]).collect()
    }

    pub fn valid_pairs(&self) -> Vec<(usize, usize)> {
        self.valid_idx.iter().map(|&i| self.pairs[i]).collect()
    }

    pub fn test_pairs(&self) -> Vec<(usize, usize)> {
        self.test_idx.iter().map(|&i| self.pairs[i]).collect()
    }

    /// Checks that the partitions are disjoint and exhaustive and that no
    /// entity repeats on one side.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.pairs.len()];
        for &i in self.train_idx.iter().chain(&self.valid_idx).chain(&self.test_idx) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(PmfError::Data(format!("seed index {i} in two partitions"))),
                None => return Err(PmfError::Data(format!("seed index {i} out of range"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PmfError::Data(format!("seed index {i} in no partition")));
        }
        let mut src = HashSet::new();
        let mut tgt = HashSet::new();
        for &(s, t) in &self.pairs {
            if !src.insert(s) {
                return Err(PmfError::Data(format!("source entity {s} appears in two seed pairs")));
            }
            if !tgt.insert(t) {
                return Err(PmfError::Data(format!("target entity {t} appears in two seed pairs")));
            }
        }
        Ok(())
    }
}

fn count(ratio: f64, n: usize) -> usize {
    // Tolerates representation error such as 0.3 * 15000 = 4499.999…
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Deterministically shuffles `pairs` and splits them into
/// `floor(train_ratio·n)` train, `floor(valid_ratio·n)` validation and the
/// remainder as test.
pub fn split_seeds(
    pairs: Vec<(usize, usize)>,
    train_ratio: f64,
    valid_ratio: f64,
    seed: u64,
) -> Result<AlignmentSeedSet> {
    for (name, r) in [("train_ratio", train_ratio), ("valid_ratio", valid_ratio)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(PmfError::Config(format!("{name} {r} outside [0, 1]")));
        }
    }
    if train_ratio + valid_ratio > 1.0 + 1e-12 {
        return Err(PmfError::Config(format!(
            "train_ratio {train_ratio} + valid_ratio {valid_ratio} exceeds 1"
        )));
    }
    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = count(train_ratio, n);
    let n_valid = count(valid_ratio, n).min(n - n_train);
    let mut train_idx = order[..n_train].to_vec();
    let mut valid_idx = order[n_train..n_train + n_valid].to_vec();
    let mut test_idx = order[n_train + n_valid..].to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    test_idx.sort_unstable();
    let set = AlignmentSeedSet {
        pairs,
        train_idx,
        valid_idx,
        test_idx,
    };
    set.validate()?;
    Ok(set)
}
