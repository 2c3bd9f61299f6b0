//! Minimum-cost bipartite matching between predictions and ground truth.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

impl MatchAssignment {
    /// Assignment of `n` predictions from its pairs in any order.
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, n: usize) -> Self {
        pairs.sort_unstable();
        let unmatched_predictions = (0..n).filter(|q| pairs.binary_search_by_key(q, |&(p, _)| p).is_err()).collect();
        MatchAssignment { pairs, unmatched_predictions }
    }

    /// Sum of `cost[p][g]` over the pairs, accumulated in ground-truth order.
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        let mut by_gt = self.pairs.clone();
        by_gt.sort_by_key(|&(_, g)| g);
        by_gt.iter().map(|&(p, g)| cost[p][g]).sum()
    }
}

/// Exact assignment for an `N x M` cost matrix (`N` predictions, `M` ground
/// truths, `N >= M`); every ground truth receives exactly one prediction.
///
/// Shortest augmenting paths with dual potentials, run on the transposed
/// `M x N` problem so no padding is needed.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("hungarian", "ragged cost matrix"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    if m == 0 {
        return Ok(MatchAssignment { pairs: vec![], unmatched_predictions: (0..n).collect() });
    }
    if n < m {
        return Err(Error::Contract(format!("{n} predictions cannot cover {m} ground-truth instances")));
    }
    // rows = ground truth (1-based), columns = predictions (1-based)
    let a = |row: usize, col: usize| cost[col - 1][row - 1];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(m);
    let mut unmatched = Vec::with_capacity(n - m);
    for j in 1..=n {
        match owner[j] {
            0 => unmatched.push(j - 1),
            row => pairs.push((j - 1, row - 1)),
        }
    }
    Ok(MatchAssignment { pairs, unmatched_predictions: unmatched })
}
