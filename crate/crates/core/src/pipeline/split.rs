use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Participant-level 80/10/10 partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SubjectSplits {
    pub fn split_of(&self, id: u64) -> Option<Split> {
        if self.train.binary_search(&id).is_ok() {
            Some(Split::Train)
        } else if self.val.binary_search(&id).is_ok() {
            Some(Split::Val)
        } else if self.test.binary_search(&id).is_ok() {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// All subjects with their split, sorted by subject id.
    pub fn assignments(&self) -> Vec<(u64, Split)> {
        let mut all: Vec<(u64, Split)> = self
            .train
            .iter()
            .map(|&s| (s, Split::Train))
            .chain(self.val.iter().map(|&s| (s, Split::Val)))
            .chain(self.test.iter().map(|&s| (s, Split::Test)))
            .collect();
        all.sort();
        all
    }

    pub fn from_assignments(rows: &[(u64, Split)]) -> Self {
        let pick = |want: Split| {
            let mut v: Vec<u64> = rows.iter().filter(|r| r.1 == want).map(|r| r.0).collect();
            v.sort_unstable();
            v
        };
        SubjectSplits {
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
        }
    }
}

/// Deterministic shuffled 80/10/10 split of unique ids.
pub fn split_subjects(subject_ids: &[u64], seed: u64) -> Result<SubjectSplits> {
    let unique: BTreeSet<u64> = subject_ids.iter().copied().collect();
    if unique.len() != subject_ids.len() {
        return Err(Error::contract(
            "subject ids passed to split_subjects must be unique",
        ));
    }
    let n = unique.len();
    if n < 10 {
        return Err(Error::config(
            "data.subjects",
            format!("at least 10 subjects are required for an 80/10/10 split, got {n}"),
        ));
    }
    let mut ids: Vec<u64> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (n * 8 + 5) / 10;
    let n_val = (n - n_train) / 2;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SubjectSplits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_subjects_split_exactly() {
        let ids: Vec<u64> = (0..10).collect();
        let s = split_subjects(&ids, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn too_few_subjects_is_a_config_error() {
        assert!(matches!(
            split_subjects(&[1, 2, 3], 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            split_subjects(&[1; 12], 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn same_seed_same_split() {
        let ids: Vec<u64> = (100..250).collect();
        assert_eq!(
            split_subjects(&ids, 9).unwrap(),
            split_subjects(&ids, 9).unwrap()
        );
        assert_ne!(
            split_subjects(&ids, 9).unwrap(),
            split_subjects(&ids, 10).unwrap()
        );
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..400, seed in any::<u64>()) {
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
            let s = split_subjects(&ids, seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            for &id in &ids {
                let hits = [&s.train, &s.val, &s.test].iter().filter(|v| v.contains(&id)).count();
                prop_assert_eq!(hits, 1);
            }
            let exact = n as f64 * 0.8;
            prop_assert!((s.train.len() as f64 - exact).abs() <= 1.0);
            prop_assert!((s.val.len() as f64 - n as f64 * 0.1).abs() <= 1.0);
            prop_assert!((s.test.len() as f64 - n as f64 * 0.1).abs() <= 1.0);
        }
    }
}
