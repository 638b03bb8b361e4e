//! Question-level train/val/test splitting and k-fold assignment.
//!
//! Split sizes use largest-remainder allocation of the requested
//! proportions; shuffling is seeded so plans are reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Mcq};

/// Disjoint train/val/test id sets covering a dataset.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Assignment of every question id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn ids_in_fold(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn ids_not_in_fold(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Largest-remainder allocation of `n` items over `proportions`.
pub fn largest_remainder_sizes(n: usize, proportions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = proportions.iter().map(|p| (n as f64 * p) as usize).collect();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, n as f64 * p - sizes[i] as f64))
        .collect();
    // Stable order: largest fractional remainder first, index breaks ties.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = sizes.iter().sum();
    for (i, _) in remainders.iter().take(n - assigned) {
        sizes[*i] += 1;
    }
    sizes
}

/// Split a dataset into train/val/test by question id.
pub fn split_by_question(
    mcqs: &[Mcq],
    proportions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitPlan, DataError> {
    let (p_train, p_val, p_test) = proportions;
    let sum = p_train + p_val + p_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadProportions(format!(
            "proportions sum to {sum}, expected 1"
        )));
    }
    if p_train < 0.0 || p_val < 0.0 || p_test < 0.0 {
        return Err(DataError::BadProportions("negative proportion".into()));
    }
    if mcqs.len() < 3 {
        return Err(DataError::BadProportions(format!(
            "need at least 3 questions, got {}",
            mcqs.len()
        )));
    }
    let mut ids: Vec<String> = mcqs.iter().map(|m| m.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let sizes = largest_remainder_sizes(ids.len(), &[p_train, p_val, p_test]);
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok(SplitPlan {
        train_ids: ids[..val_start].to_vec(),
        val_ids: ids[val_start..test_start].to_vec(),
        test_ids: ids[test_start..].to_vec(),
        seed,
    })
}

/// Assign questions to `k` folds with sizes differing by at most one.
pub fn make_folds(mcqs: &[Mcq], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 || k > mcqs.len() {
        return Err(DataError::BadFoldCount { k, n: mcqs.len() });
    }
    let mut ids: Vec<String> = mcqs.iter().map(|m| m.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan { k, assignments })
}
