use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Data seeds of the low-resource protocol.
pub const DATA_SEEDS: [u64; 5] = [111, 222, 333, 444, 555];

/// Size cap of the low-resource dev split.
pub const LOW_RESOURCE_DEV: usize = 1000;

const KFOLD_STREAM: u64 = 0x6b66;
const LOW_RESOURCE_STREAM: u64 = 0x6c72;

/// Shuffled partition of `0..n` into `folds` folds whose sizes differ by at
/// most one. Returns the member indices of each fold, each sorted.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Split(format!("folds must be >= 2, got {folds}")));
    }
    if n < folds {
        return Err(Error::Split(format!(
            "{n} instances cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed, KFOLD_STREAM).rng().shuffle(&mut order);
    let mut out = vec![Vec::with_capacity(n / folds + 1); folds];
    for (pos, &i) in order.iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Train/dev/test indices of one cross-validation fold: fold `i` tests,
/// fold `(i + 1) % k` is the dev set, the rest train.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_split(folds: &[Vec<usize>], i: usize) -> FoldSplit {
    let k = folds.len();
    let dev_fold = (i + 1) % k;
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i && j != dev_fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    FoldSplit {
        fold: i,
        train,
        dev: folds[dev_fold].clone(),
        test: folds[i].clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowResourceSplit {
    pub k: usize,
    pub data_seed: u64,
    /// Indices into the training pool, in shuffled order.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    /// Indices into the original evaluation set.
    pub test: Vec<usize>,
}

/// Shuffle the pool with `data_seed`, take the first `k` as train and the
/// next `min(1000, rest)` as dev; the original evaluation set is the test.
pub fn low_resource_split(
    pool: usize,
    k: usize,
    data_seed: u64,
    n_test: usize,
) -> Result<LowResourceSplit> {
    if k == 0 {
        return Err(Error::Split("K must be positive".into()));
    }
    if pool < k + 1 {
        return Err(Error::Split(format!(
            "pool of {pool} is too small for K={k} plus a dev set"
        )));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    RngState::new(data_seed, LOW_RESOURCE_STREAM)
        .rng()
        .shuffle(&mut order);
    let dev_n = LOW_RESOURCE_DEV.min(pool - k);
    Ok(LowResourceSplit {
        k,
        data_seed,
        train: order[..k].to_vec(),
        dev: order[k..k + dev_n].to_vec(),
        test: (0..n_test).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn even_folds() {
        let f = kfold(100, 10, 42).unwrap();
        assert!(f.iter().all(|x| x.len() == 10));
    }

    #[test]
    fn uneven_folds() {
        let f = kfold(101, 10, 42).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![10; 9], vec![11]].concat());
    }

    #[test]
    fn fold_errors() {
        assert!(kfold(10, 1, 0).is_err());
        assert!(kfold(3, 5, 0).is_err());
    }

    #[test]
    fn low_resource_protocol() {
        let s = low_resource_split(2000, 200, 111, 500).unwrap();
        assert_eq!(s.train.len(), 200);
        assert_eq!(s.dev.len(), 1000);
        let t: HashSet<_> = s.train.iter().collect();
        assert!(s.dev.iter().all(|d| !t.contains(d)));
        let big = low_resource_split(2000, 500, 111, 500).unwrap();
        assert_eq!(&big.train[..200], &s.train[..]);
        let other = low_resource_split(2000, 200, 222, 500).unwrap();
        assert_ne!(other.train, s.train);
        assert!(low_resource_split(2000, 0, 111, 0).is_err());
        assert!(low_resource_split(200, 200, 111, 0).is_err());
        assert_eq!(low_resource_split(700, 500, 111, 0).unwrap().dev.len(), 200);
    }

    #[test]
    fn crossval_roles_are_disjoint() {
        let f = kfold(53, 10, 1).unwrap();
        for i in 0..10 {
            let s = fold_split(&f, i);
            assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 53);
            let tr: HashSet<_> = s.train.iter().collect();
            assert!(s.dev.iter().chain(&s.test).all(|x| !tr.contains(x)));
            assert_eq!(s.dev, f[(i + 1) % 10]);
        }
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 2usize..300, folds in 2usize..12, seed in any::<u64>()) {
            prop_assume!(n >= folds);
            let f = kfold(n, folds, seed).unwrap();
            let mut all: Vec<usize> = f.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let min = f.iter().map(Vec::len).min().unwrap();
            let max = f.iter().map(Vec::len).max().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(&f, &kfold(n, folds, seed).unwrap());
        }

        #[test]
        fn low_resource_invariants(pool in 2usize..3000, k in 1usize..1500, seed in any::<u64>()) {
            prop_assume!(pool > k);
            let s = low_resource_split(pool, k, seed, 3).unwrap();
            prop_assert_eq!(s.train.len(), k);
            prop_assert_eq!(s.dev.len(), (pool - k).min(1000));
            let t: HashSet<_> = s.train.iter().collect();
            prop_assert!(s.dev.iter().all(|d| !t.contains(d)));
            prop_assert_eq!(s, low_resource_split(pool, k, seed, 3).unwrap());
        }
    }
}
