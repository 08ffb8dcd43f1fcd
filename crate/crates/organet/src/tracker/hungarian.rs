//! Minimum-cost bipartite assignment (Hungarian algorithm with potentials,
//! shortest augmenting paths, O(n^3)).

use ndarray::Array2;

/// Cost used to pad rectangular matrices to square form. Padded pairs carry a
/// constant cost, so they never change which real pairs are optimal, and they
/// always fail any reasonable matching gate.
pub const PAD_COST: f64 = 1e12;

/// Optimal assignment of `min(n, m)` row/column pairs minimizing total cost.
/// Entries must be finite. An empty matrix yields an empty assignment.
pub fn hungarian(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|v| v.is_finite()), "non-finite cost");
    let n = rows.max(cols);

    // 1-based working arrays; column 0 is the virtual start of each path.
    let a = |i: usize, j: usize| -> f64 {
        if i - 1 < rows && j - 1 < cols {
            cost[(i - 1, j - 1)]
        } else {
            PAD_COST
        }
    };
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // per column
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            pairs.push((i - 1, j - 1));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all assignments of min(n, m) pairs.
    pub(crate) fn brute_force_min(cost: &Array2<f64>) -> f64 {
        let (n, m) = cost.dim();
        fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (n, m) = cost.dim();
            if row == n {
                *best = best.min(acc);
                return;
            }
            if n <= m {
                for c in 0..m {
                    if !used[c] {
                        used[c] = true;
                        rec(cost, row + 1, used, acc + cost[(row, c)], best);
                        used[c] = false;
                    }
                }
            } else {
                // more rows than columns: a row may stay unassigned
                rec(cost, row + 1, used, acc, best);
                for c in 0..m {
                    if !used[c] {
                        used[c] = true;
                        rec(cost, row + 1, used, acc + cost[(row, c)], best);
                        used[c] = false;
                    }
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; m];
        rec(cost, 0, &mut used, 0.0, &mut best);
        best
    }

    #[test]
    fn small_examples() {
        let c = ndarray::array![[1.0, 2.0], [2.0, 1.0]];
        let pairs = hungarian(&c.clone().into_dyn().into_dimensionality().unwrap());
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &pairs), 2.0);

        let c = ndarray::array![[5.0]];
        assert_eq!(hungarian(&c), vec![(0, 0)]);

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(hungarian(&empty).is_empty());
    }

    #[test]
    fn ties_still_reach_optimum() {
        let c = ndarray::array![[1.0, 1.0, 2.0], [1.0, 2.0, 1.0], [2.0, 1.0, 1.0]];
        let pairs = hungarian(&c);
        assert_eq!(pairs.len(), 3);
        assert_eq!(assignment_cost(&c, &pairs), 3.0);
    }

    #[test]
    fn matches_brute_force_on_random_square_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = rng.random_range(1..=6);
            let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0..40) as f64);
            let pairs = hungarian(&c);
            assert_eq!(pairs.len(), n);
            let total = assignment_cost(&c, &pairs);
            let best = brute_force_min(&c);
            assert_eq!(total, best, "trial {trial}: {total} vs {best}\n{c:?}");
        }
    }

    #[test]
    fn matches_brute_force_on_rectangular_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let c = Array2::from_shape_fn((n, m), |_| rng.random_range(0..30) as f64);
            let pairs = hungarian(&c);
            assert_eq!(pairs.len(), n.min(m));
            // no row or column reused
            let mut rs: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<_> = pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(rs.len(), pairs.len());
            assert_eq!(cs.len(), pairs.len());
            assert_eq!(assignment_cost(&c, &pairs), brute_force_min(&c));
        }
    }
}
