use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{DataError, DatasetManifest};
use crate::seed::rng_for;

/// Removes `drop_count` images that contain `class`, chosen uniformly.
///
/// Whole images are dropped; every other image is kept unchanged.
pub fn make_imbalanced(
    ds: &DatasetManifest,
    class: &str,
    drop_count: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let mut candidates: Vec<u64> = ds
        .images
        .iter()
        .filter(|i| i.has_class(class))
        .map(|i| i.id)
        .collect();
    if drop_count > candidates.len() {
        return Err(DataError::DropTooLarge {
            class: class.to_string(),
            requested: drop_count,
            available: candidates.len(),
        });
    }
    candidates.shuffle(&mut rng_for(seed, "datakit/imbalance", 0));
    let dropped: BTreeSet<u64> = candidates[..drop_count].iter().copied().collect();
    let keep = ds
        .images
        .iter()
        .map(|i| i.id)
        .filter(|id| !dropped.contains(id))
        .collect();
    Ok(ds.subset(&keep))
}

/// Keeps exactly `keep` images containing `class`, dropping the rest at random.
pub fn retain_class(
    ds: &DatasetManifest,
    class: &str,
    keep: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let available = ds.images.iter().filter(|i| i.has_class(class)).count();
    if keep > available {
        return Err(DataError::DropTooLarge {
            class: class.to_string(),
            requested: keep,
            available,
        });
    }
    make_imbalanced(ds, class, available - keep, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Stratified k-fold partition.
///
/// Images are stratified by the class of their first annotation (images
/// without annotations form their own stratum). Each stratum is shuffled
/// and dealt round-robin, continuing the rotation across strata so fold
/// sizes differ by at most one overall and per class.
pub fn kfold_split(ds: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::InvalidFoldCount(k));
    }
    if ds.len() < k {
        return Err(DataError::TooFewImages { k, n: ds.len() });
    }
    let mut strata: BTreeMap<Option<&str>, Vec<u64>> = BTreeMap::new();
    for img in &ds.images {
        let key = img.annotations.first().map(|a| a.class_label.as_str());
        strata.entry(key).or_default().push(img.id);
    }

    let mut rng = rng_for(seed, "datakit/kfold", 0);
    let mut assignment: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); k];
    let mut next = 0usize;
    for ids in strata.values_mut() {
        ids.shuffle(&mut rng);
        for &id in ids.iter() {
            assignment[next].insert(id);
            next = (next + 1) % k;
        }
    }

    let all: BTreeSet<u64> = ds.images.iter().map(|i| i.id).collect();
    Ok(assignment
        .into_iter()
        .map(|test_ids| {
            let train_ids = all.difference(&test_ids).copied().collect();
            Fold {
                train: ds.subset(&train_ids),
                test: ds.subset(&test_ids),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{AnnotatedImage, Annotation, BoundingBox};
    use proptest::prelude::*;

    fn dataset(per_class: &[(&str, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new(per_class.iter().map(|(c, _)| c.to_string()).collect());
        let mut id = 0;
        for (c, n) in per_class {
            for _ in 0..*n {
                m.images.push(AnnotatedImage {
                    id,
                    file: format!("{id}.png"),
                    width: 8,
                    height: 8,
                    annotations: vec![Annotation {
                        class_label: c.to_string(),
                        bbox: BoundingBox::new(1, 1, 2, 2).unwrap(),
                    }],
                    pixels: None,
                });
                id += 1;
            }
        }
        m
    }

    #[test]
    fn drop_150_of_300() {
        let ds = dataset(&[("inclusion", 300), ("scratches", 300)]);
        let out = make_imbalanced(&ds, "inclusion", 150, 7).unwrap();
        assert_eq!(out.image_counts()["inclusion"], 150);
        assert_eq!(out.image_counts()["scratches"], 300);
    }

    #[test]
    fn drop_zero_is_identity() {
        let ds = dataset(&[("a", 5), ("b", 3)]);
        assert_eq!(make_imbalanced(&ds, "a", 0, 1).unwrap(), ds);
    }

    #[test]
    fn drop_too_many() {
        let ds = dataset(&[("a", 5)]);
        assert!(matches!(
            make_imbalanced(&ds, "a", 6, 1),
            Err(DataError::DropTooLarge { available: 5, .. })
        ));
    }

    #[test]
    fn imbalance_is_seeded() {
        let ds = dataset(&[("a", 40), ("b", 10)]);
        let ids = |s| {
            make_imbalanced(&ds, "a", 25, s)
                .unwrap()
                .images
                .iter()
                .map(|i| i.id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(3), ids(3));
        assert_ne!(ids(3), ids(4));
    }

    #[test]
    fn three_folds_of_300() {
        let ds = dataset(&[("a", 300), ("b", 300), ("c", 300)]);
        let folds = kfold_split(&ds, 3, 7).unwrap();
        assert_eq!(folds.len(), 3);
        for f in &folds {
            for c in ["a", "b", "c"] {
                assert_eq!(f.test.image_counts()[c], 100);
                assert_eq!(f.train.image_counts()[c], 200);
            }
        }
    }

    #[test]
    fn leave_one_out() {
        let ds = dataset(&[("a", 4), ("b", 3)]);
        let folds = kfold_split(&ds, 7, 0).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 6));
    }

    #[test]
    fn split_errors() {
        let ds = dataset(&[("a", 2)]);
        assert!(matches!(kfold_split(&ds, 3, 0), Err(DataError::TooFewImages { .. })));
        assert!(matches!(kfold_split(&ds, 1, 0), Err(DataError::InvalidFoldCount(1))));
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(
            counts in proptest::collection::vec(0usize..20, 1..5),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let names: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
            let spec: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(counts.iter().copied()).collect();
            let ds = dataset(&spec);
            prop_assume!(ds.len() >= k);
            let folds = kfold_split(&ds, k, seed).unwrap();
            let mut seen = BTreeSet::new();
            for f in &folds {
                for img in &f.test.images {
                    prop_assert!(seen.insert(img.id), "image in two test folds");
                }
                prop_assert_eq!(f.train.len() + f.test.len(), ds.len());
            }
            prop_assert_eq!(seen.len(), ds.len());
            for c in &names {
                let per: Vec<usize> = folds.iter().map(|f| f.test.image_counts()[c]).collect();
                let lo = *per.iter().min().unwrap();
                let hi = *per.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
        }

        #[test]
        fn imbalance_touches_only_target(n_a in 0usize..30, n_b in 0usize..30, drop in 0usize..30, seed in any::<u64>()) {
            let ds = dataset(&[("a", n_a), ("b", n_b)]);
            prop_assume!(drop <= n_a);
            let out = make_imbalanced(&ds, "a", drop, seed).unwrap();
            prop_assert_eq!(out.image_counts()["a"], n_a - drop);
            prop_assert_eq!(out.image_counts()["b"], n_b);
            for img in &out.images {
                prop_assert_eq!(Some(img), ds.image(img.id));
            }
        }
    }
}
