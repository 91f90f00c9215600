use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// How groups are assigned to the train, validation and test partitions.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Random assignment of the given numbers of groups.
    Counts {
        train: usize,
        validate: usize,
        test: usize,
    },
    /// Explicit group ids per partition.
    Lists {
        train: Vec<u64>,
        validate: Vec<u64>,
        test: Vec<u64>,
    },
}

/// Group ids per partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub validate: Vec<u64>,
    pub test: Vec<u64>,
}

/// Partitions `ids` by group. Count-based splits shuffle the sorted ids with
/// a generator seeded from `seed`, so the result depends only on the id set.
pub fn split_groups(ids: &[u64], spec: &SplitSpec, seed: u64) -> Result<Split, DataError> {
    let available: HashSet<u64> = ids.iter().copied().collect();
    match spec {
        SplitSpec::Counts { train, validate, test } => {
            let total = train + validate + test;
            if total > available.len() {
                return Err(DataError::Split(format!(
                    "requested {train}+{validate}+{test}={total} groups but only {} exist",
                    available.len()
                )));
            }
            let mut pool: Vec<u64> = available.into_iter().collect();
            pool.sort_unstable();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(Split {
                train: pool[..*train].to_vec(),
                validate: pool[*train..train + validate].to_vec(),
                test: pool[train + validate..total].to_vec(),
            })
        }
        SplitSpec::Lists { train, validate, test } => {
            let mut seen = HashSet::new();
            for &id in train.iter().chain(validate).chain(test) {
                if !available.contains(&id) {
                    return Err(DataError::UnknownGroup(id));
                }
                if !seen.insert(id) {
                    return Err(DataError::Split(format!("group {id} is assigned to more than one partition")));
                }
            }
            Ok(Split {
                train: train.clone(),
                validate: validate.clone(),
                test: test.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn counts_are_honoured() {
        let ids: Vec<u64> = (1..=10).collect();
        let s = split_groups(&ids, &SplitSpec::Counts { train: 8, validate: 1, test: 1 }, 3).unwrap();
        assert_eq!((s.train.len(), s.validate.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn same_seed_same_partition() {
        let ids: Vec<u64> = (0..50).collect();
        let spec = SplitSpec::Counts { train: 30, validate: 10, test: 10 };
        assert_eq!(split_groups(&ids, &spec, 9).unwrap(), split_groups(&ids, &spec, 9).unwrap());
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(split_groups(&ids, &spec, 9).unwrap(), split_groups(&reversed, &spec, 9).unwrap());
        assert_ne!(split_groups(&ids, &spec, 9).unwrap(), split_groups(&ids, &spec, 10).unwrap());
    }

    #[test]
    fn over_allocation_is_rejected() {
        let ids: Vec<u64> = (0..5).collect();
        let spec = SplitSpec::Counts { train: 4, validate: 1, test: 1 };
        assert!(matches!(split_groups(&ids, &spec, 0), Err(DataError::Split(_))));
    }

    #[test]
    fn explicit_lists_must_be_disjoint_and_known() {
        let ids: Vec<u64> = (0..5).collect();
        let overlap = SplitSpec::Lists { train: vec![0, 1], validate: vec![1], test: vec![] };
        assert!(split_groups(&ids, &overlap, 0).is_err());
        let unknown = SplitSpec::Lists { train: vec![9], validate: vec![], test: vec![] };
        assert!(matches!(split_groups(&ids, &unknown, 0), Err(DataError::UnknownGroup(9))));
        let ok = SplitSpec::Lists { train: vec![3, 0], validate: vec![4], test: vec![1] };
        assert_eq!(split_groups(&ids, &ok, 0).unwrap().train, vec![3, 0]);
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint(n in 1usize..40, a in 0usize..20, b in 0usize..20, c in 0usize..20, seed in any::<u64>()) {
            let ids: Vec<u64> = (0..n as u64).collect();
            let spec = SplitSpec::Counts { train: a, validate: b, test: c };
            match split_groups(&ids, &spec, seed) {
                Ok(s) => {
                    let all: HashSet<u64> = s.train.iter().chain(&s.validate).chain(&s.test).copied().collect();
                    prop_assert_eq!(all.len(), a + b + c);
                }
                Err(_) => prop_assert!(a + b + c > n),
            }
        }
    }
}
