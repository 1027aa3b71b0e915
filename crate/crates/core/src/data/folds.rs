//! Leave-one-group-out fold assignment.

use super::fseq::FeatureSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test_group: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `i` tests on every record of group `i` and trains on the rest.
pub fn assign_folds(records: &[FeatureSequence], n_folds: usize) -> Result<Vec<Fold>> {
    if n_folds == 0 {
        return Err(Error::config("folds", "at least one fold is required"));
    }
    if let Some(r) = records.iter().find(|r| r.group as usize >= n_folds) {
        return Err(Error::config(
            "folds",
            format!("group {} has no fold among {n_folds}", r.group),
        ));
    }
    (0..n_folds as u32)
        .map(|g| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..records.len()).partition(|&i| records[i].group == g);
            if test.is_empty() {
                return Err(Error::EmptyInput(format!("fold {g} has no test records")));
            }
            if train.is_empty() {
                return Err(Error::EmptyInput(format!("fold {g} has no training records")));
            }
            Ok(Fold {
                test_group: g,
                train,
                test,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(group: u32) -> FeatureSequence {
        FeatureSequence {
            label: 0,
            group,
            layers: 1,
            frames: 1,
            channels: 1,
            data: vec![0.0],
        }
    }

    #[test]
    fn group_three_only_tests_in_fold_three() {
        let records: Vec<_> = [0, 1, 2, 3, 4, 3, 0].into_iter().map(rec).collect();
        let folds = assign_folds(&records, 5).unwrap();
        assert_eq!(folds.len(), 5);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.test.contains(&3), i == 3);
            assert_eq!(f.train.len() + f.test.len(), records.len());
        }
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..records.len()).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_group_and_empty_fold() {
        let records: Vec<_> = [0, 5].into_iter().map(rec).collect();
        assert!(assign_folds(&records, 5).is_err());
        let records: Vec<_> = [0, 1].into_iter().map(rec).collect();
        assert!(matches!(assign_folds(&records, 3), Err(Error::EmptyInput(_))));
    }
}
