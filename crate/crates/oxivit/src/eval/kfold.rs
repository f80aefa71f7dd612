//! Seeded k-fold splitting, stratified by class whenever every class holds at
//! least k instances (unstratified shuffle otherwise).

use rand::seq::SliceRandom;

use crate::data::{derive_rng, Dataset, SaO2Class};
use crate::error::{Error, Result};

/// Unstratified partition of `0..n` into k folds with sizes differing by at
/// most one. Deterministic in the seed.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::contract(format!("k must be >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::contract(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, "kfold", 0);
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in order.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    Ok(folds)
}

/// Splits a dataset's instance ids into k folds. When every class has at
/// least k members the split is stratified: each class is shuffled and dealt
/// round-robin, with a rotating start fold so overall sizes stay within one.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::contract(format!("k must be >= 2, got {k}")));
    }
    let n = dataset.len();
    if n < k {
        return Err(Error::contract(format!("cannot split {n} instances into {k} folds")));
    }
    let stratify = dataset.class_counts.iter().all(|&c| c >= k);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    if stratify {
        let mut start = 0usize;
        for class in SaO2Class::ALL {
            let mut members: Vec<&str> = dataset
                .instances
                .iter()
                .filter(|i| i.sao2_class == class)
                .map(|i| i.instance_id.as_str())
                .collect();
            let mut rng = derive_rng(seed, "kfold-class", class.index() as u64);
            members.shuffle(&mut rng);
            for (i, id) in members.iter().enumerate() {
                folds[(start + i) % k].push((*id).to_string());
            }
            start = (start + members.len()) % k;
        }
    } else {
        let by_index = kfold_indices(n, k, seed)?;
        for (fi, idxs) in by_index.into_iter().enumerate() {
            for i in idxs {
                folds[fi].push(dataset.instances[i].instance_id.clone());
            }
        }
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_longtail, SynthSpec};
    use std::collections::HashSet;

    #[test]
    fn partition_properties_hold() {
        for n in [3usize, 4, 7, 19, 57, 101] {
            for k in [2usize, 3, 5] {
                if n < k {
                    continue;
                }
                let folds = kfold_indices(n, k, 42).unwrap();
                assert_eq!(folds.len(), k);
                let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
                assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                let all: HashSet<usize> = folds.iter().flatten().copied().collect();
                assert_eq!(all.len(), n);
                assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), n);
            }
        }
    }

    #[test]
    fn fifty_seven_into_three_is_19_each() {
        let ds = synth_longtail(&SynthSpec {
            counts: [9, 30, 18],
            image_size: 8,
            slices_per_instance: 1,
            seed: 3,
        })
        .unwrap();
        let folds = kfold_split(&ds, 3, 11).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![19, 19, 19]);
        // stratification keeps per-class spread within one
        for class in SaO2Class::ALL {
            let per_fold: Vec<usize> = folds
                .iter()
                .map(|f| {
                    f.iter()
                        .filter(|id| ds.get(id).unwrap().sao2_class == class)
                        .count()
                })
                .collect();
            assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn same_seed_same_folds() {
        let ds = synth_longtail(&SynthSpec {
            counts: [4, 9, 6],
            image_size: 8,
            slices_per_instance: 1,
            seed: 3,
        })
        .unwrap();
        assert_eq!(kfold_split(&ds, 3, 7).unwrap(), kfold_split(&ds, 3, 7).unwrap());
        assert_ne!(kfold_split(&ds, 3, 7).unwrap(), kfold_split(&ds, 3, 8).unwrap());
    }

    #[test]
    fn unstratified_fallback_when_class_too_small() {
        let ds = synth_longtail(&SynthSpec {
            counts: [2, 9, 6], // Low has fewer than k=3 members
            image_size: 8,
            slices_per_instance: 1,
            seed: 3,
        })
        .unwrap();
        let folds = kfold_split(&ds, 3, 7).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 17);
    }

    #[test]
    fn small_n_rejected() {
        assert!(kfold_indices(2, 3, 0).is_err());
        assert!(kfold_indices(5, 1, 0).is_err());
    }
}
