//! Iterative multi-label stratification into k folds.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold of each patient, in label-matrix row order.
    pub folds: Vec<usize>,
}

/// Which folds model `i` trains, validates and tests on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

impl FoldAssignment {
    /// Validation on fold `i`, testing on fold `(i + 1) mod k`.
    pub fn roles(&self, model: usize) -> FoldRoles {
        let val = model % self.k;
        let test = (model + 1) % self.k;
        FoldRoles {
            train: (0..self.k).filter(|&f| f != val && f != test).collect(),
            val,
            test,
        }
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn members_of(&self, folds: &[usize]) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| folds.contains(&self.folds[i]))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Assigns each row of `labels` to one of `k` folds.
///
/// The label with the fewest unassigned positives is handled first; each of
/// its positive rows goes to the fold wanting that label most, ties broken by
/// remaining capacity and then at random. Rows without labels fill the
/// remaining capacity. Fold sizes are `⌊n/k⌋` or `⌈n/k⌉`.
pub fn stratified_folds(labels: &[Vec<u8>], k: usize, seed: u64) -> FoldAssignment {
    let rng = &mut crate::stream_rng!(seed, "folds");
    assert!(k >= 1 && labels.len() >= k, "need at least k patients");
    let n = labels.len();
    let d = labels.first().map_or(0, Vec::len);

    let mut capacity: Vec<i64> = (0..k).map(|f| (n / k + usize::from(f < n % k)) as i64).collect();
    let mut demand: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|j| labels.iter().filter(|r| r[j] == 1).count() as f64 / k as f64)
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut folds = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = order;

    let pick = |candidates: &[usize], rng: &mut dyn rand::RngCore| -> usize {
        candidates[rng.random_range(0..candidates.len())]
    };

    loop {
        let mut counts = vec![0usize; d];
        for &i in &remaining {
            for j in 0..d {
                counts[j] += usize::from(labels[i][j] == 1);
            }
        }
        let Some(label) = (0..d).filter(|&j| counts[j] > 0).min_by_key(|&j| (counts[j], j)) else {
            break;
        };
        let (with, without): (Vec<usize>, Vec<usize>) =
            remaining.iter().partition(|&&i| labels[i][label] == 1);
        for i in with {
            let open: Vec<usize> = (0..k).filter(|&f| capacity[f] > 0).collect();
            let best_demand = open.iter().map(|&f| demand[f][label]).fold(f64::NEG_INFINITY, f64::max);
            let by_demand: Vec<usize> = open.into_iter().filter(|&f| demand[f][label] == best_demand).collect();
            let best_cap = by_demand.iter().map(|&f| capacity[f]).max().unwrap();
            let by_cap: Vec<usize> = by_demand.into_iter().filter(|&f| capacity[f] == best_cap).collect();
            let f = pick(&by_cap, rng);
            folds[i] = f;
            capacity[f] -= 1;
            for j in 0..d {
                if labels[i][j] == 1 {
                    demand[f][j] -= 1.0;
                }
            }
        }
        remaining = without;
    }

    for i in remaining {
        let best = *capacity.iter().max().unwrap();
        let open: Vec<usize> = (0..k).filter(|&f| capacity[f] == best).collect();
        let f = pick(&open, rng);
        folds[i] = f;
        capacity[f] -= 1;
    }
    FoldAssignment { k, folds }
}
