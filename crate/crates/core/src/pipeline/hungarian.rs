//! Minimum-cost bipartite assignment (Jonker-Volgenant style shortest
//! augmenting paths) for matching decoder queries to ground-truth segments.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Assign every target (column-lean side) a distinct query.
///
/// `cost` is `[num_queries, num_targets]` with `num_targets <=
/// num_queries`. Returns `(query, target)` pairs sorted by target index;
/// unmatched queries are implicitly "no object".
pub fn match_queries(cost: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    let (num_queries, num_targets) = cost.dim();
    if num_targets == 0 {
        return Ok(Vec::new());
    }
    if num_targets > num_queries {
        return Err(Error::invalid(format!(
            "{num_targets} targets exceed {num_queries} queries"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost matrix must be finite"));
    }
    // Rows = targets (n), columns = queries (m), n <= m.
    let n = num_targets;
    let m = num_queries;
    let at = |row: usize, col: usize| cost[[col, row]];

    // Potentials and matching, 1-indexed with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // column -> row (0 = free)
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (j - 1, assigned_row[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, target)| target);
    Ok(pairs)
}

/// Total cost of an assignment, for oracles and diagnostics.
pub fn assignment_cost(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(q, t)| cost[[q, t]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective target -> query maps.
    pub(crate) fn brute_force_min(cost: &Array2<f64>) -> f64 {
        let (m, n) = cost.dim();
        let mut best = f64::INFINITY;
        let mut queries: Vec<usize> = (0..m).collect();
        permute_targets(cost, &mut queries, 0, n, 0.0, &mut best);
        best
    }

    fn permute_targets(
        cost: &Array2<f64>,
        queries: &mut Vec<usize>,
        target: usize,
        n: usize,
        acc: f64,
        best: &mut f64,
    ) {
        if target == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for i in target..queries.len() {
            queries.swap(target, i);
            let add = cost[[queries[target], target]];
            permute_targets(cost, queries, target + 1, n, acc + add, best);
            queries.swap(target, i);
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let cost = arr2(&[[1.0, 2.0], [3.0, 0.0]]);
        let pairs = match_queries(&cost).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, &pairs), 1.0);
    }

    #[test]
    fn single_target_picks_cheapest_query() {
        let cost = arr2(&[[5.0], [4.0], [3.5], [0.25], [9.0]]);
        let pairs = match_queries(&cost).unwrap();
        assert_eq!(pairs, vec![(3, 0)]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..200 {
            let n_targets = rng.gen_range(1..=5);
            let n_queries = rng.gen_range(n_targets..=6);
            let cost =
                Array2::from_shape_fn((n_queries, n_targets), |_| rng.gen_range(-4.0..4.0));
            let pairs = match_queries(&cost).unwrap();
            assert_eq!(pairs.len(), n_targets, "trial {trial}");
            let mut seen = std::collections::HashSet::new();
            for &(q, _) in &pairs {
                assert!(seen.insert(q), "query doubly assigned");
            }
            let got = assignment_cost(&cost, &pairs);
            let want = brute_force_min(&cost);
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: got {got}, brute force {want}"
            );
        }
    }

    #[test]
    fn more_targets_than_queries_is_rejected() {
        let cost = Array2::<f64>::zeros((2, 3));
        assert!(match_queries(&cost).is_err());
    }

    #[test]
    fn empty_targets_are_fine() {
        let cost = Array2::<f64>::zeros((4, 0));
        assert!(match_queries(&cost).unwrap().is_empty());
    }
}
