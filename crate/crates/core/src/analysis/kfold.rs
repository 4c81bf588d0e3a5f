//! Class-stratified k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fold index per sample. Samples are shuffled, then dealt round-robin
/// class by class with one counter running across classes, so per-class
/// counts per fold differ by at most one and fold sizes stay balanced.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    if let Some((c, members)) = by_class.iter().find(|(_, m)| m.len() < folds) {
        return Err(Error::invalid(format!(
            "class {c} has {} samples, fewer than {folds} folds",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    let mut counter = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for i in members.iter() {
            out[*i] = counter % folds;
            counter += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_classes_of_four() {
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let f = stratified_kfold(&labels, 4, 3).unwrap();
        for fold in 0..4 {
            for c in 0..2 {
                let n = (0..8).filter(|i| f[*i] == fold && labels[*i] == c).count();
                assert_eq!(n, 1);
            }
        }
    }

    #[test]
    fn paper_shaped_split() {
        let labels: Vec<usize> = [307, 297, 49, 67]
            .iter()
            .enumerate()
            .flat_map(|(c, n)| std::iter::repeat_n(c, *n))
            .collect();
        let f = stratified_kfold(&labels, 4, 0).unwrap();
        for fold in 0..4 {
            assert_eq!(f.iter().filter(|x| **x == fold).count(), 180);
        }
    }

    #[test]
    fn errors() {
        assert!(stratified_kfold(&[0, 0, 1], 2, 0).is_err());
        assert!(stratified_kfold(&[0, 0], 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn balanced_and_deterministic(labels in proptest::collection::vec(0usize..4, 8..200), folds in 2usize..5, seed: u64) {
            match stratified_kfold(&labels, folds, seed) {
                Ok(f) => {
                    prop_assert_eq!(&f, &stratified_kfold(&labels, folds, seed).unwrap());
                    prop_assert!(f.iter().all(|x| *x < folds));
                    for c in 0..4 {
                        let per: Vec<usize> = (0..folds)
                            .map(|k| (0..labels.len()).filter(|i| labels[*i] == c && f[*i] == k).count())
                            .collect();
                        prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
                    }
                }
                Err(_) => {
                    let min = (0..4).filter_map(|c| {
                        let n = labels.iter().filter(|l| **l == c).count();
                        (n > 0).then_some(n)
                    }).min().unwrap();
                    prop_assert!(min < folds);
                }
            }
        }
    }
}
