//! Maximum-weight bipartite matching with a deterministic tie rule.
//!
//! Weights are non-negative; a zero weight marks an inadmissible pair. Among
//! all matchings of maximal total weight the one returned is the
//! lexicographically smallest when read row by row, where for each row a
//! matched column `c` sorts before a smaller-indexed one only by its index,
//! and "unmatched" sorts after every column.

/// Ties closer than this are considered equal.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Returns, for every row, the column it is matched to.
pub fn max_weight_matching(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = weights[0].len();
    let best = best_total(weights, &all(rows), &all(cols));
    let mut result = vec![None; rows];
    let mut free_cols = all(cols);
    let mut acc = 0.0;
    for r in 0..rows {
        let rest_rows: Vec<usize> = ((r + 1)..rows).collect();
        for (k, &c) in free_cols.iter().enumerate() {
            let w = weights[r][c];
            if w <= 0.0 {
                continue;
            }
            let mut remaining = free_cols.clone();
            remaining.remove(k);
            let total = acc + w + best_total(weights, &rest_rows, &remaining);
            if total >= best - TIE_TOLERANCE {
                result[r] = Some(c);
                acc += w;
                free_cols = remaining;
                break;
            }
        }
    }
    result
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Optimal total weight restricted to a sub-matrix.
fn best_total(weights: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| weights[r][c].max(0.0)).collect())
        .collect();
    let matching = hungarian_max(&sub);
    matching
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| sub[r][c]))
        .filter(|w| *w > 0.0)
        .sum()
}

/// Kuhn–Munkres with potentials on the zero-padded square matrix.
fn hungarian_max(w: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n_rows = w.len();
    let n_cols = w[0].len();
    let n = n_rows.max(n_cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < n_rows && j < n_cols {
            -w[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays; p[j] is the row assigned to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n_rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= n_rows && j <= n_cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Total weight of a matching, summed in row order.
pub fn matching_total(weights: &[Vec<f64>], matching: &[Option<usize>]) -> f64 {
    matching
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| weights[r][c]))
        .sum()
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Exhaustive enumeration of all partial matchings.

    use super::TIE_TOLERANCE;

    pub fn brute_force(weights: &[Vec<f64>]) -> (f64, Vec<Option<usize>>) {
        let rows = weights.len();
        let cols = weights.first().map_or(0, |r| r.len());
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut current = vec![None; rows];
        let mut used = vec![false; cols];
        recurse(weights, 0, &mut current, &mut used, &mut best);
        best
    }

    fn key(m: &[Option<usize>]) -> Vec<usize> {
        m.iter().map(|c| c.unwrap_or(usize::MAX)).collect()
    }

    fn recurse(
        w: &[Vec<f64>],
        r: usize,
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if r == w.len() {
            let total: f64 = current
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|c| w[i][c]))
                .sum();
            let better = total > best.0 + TIE_TOLERANCE
                || ((total - best.0).abs() <= TIE_TOLERANCE && key(current) < key(&best.1));
            if better {
                *best = (total, current.clone());
            }
            return;
        }
        current[r] = None;
        recurse(w, r + 1, current, used, best);
        for c in 0..used.len() {
            if !used[c] && w[r][c] > 0.0 {
                used[c] = true;
                current[r] = Some(c);
                recurse(w, r + 1, current, used, best);
                current[r] = None;
                used[c] = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_is_suboptimal_here() {
        // Greedy takes (0,0)=0.9 first and is left with 0.45+0.45;
        // the optimum pairs 0->1 and 1->0.
        let w = vec![
            vec![0.9, 0.85, 0.0],
            vec![0.85, 0.0, 0.0],
            vec![0.0, 0.0, 0.5],
        ];
        let m = max_weight_matching(&w);
        assert_eq!(m, vec![Some(1), Some(0), Some(2)]);
        let (total, bf) = oracle::brute_force(&w);
        assert_eq!(m, bf);
        assert_eq!(matching_total(&w, &m), total);
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(max_weight_matching(&[]).is_empty());
        let w = vec![vec![0.0, 0.0]];
        assert_eq!(max_weight_matching(&w), vec![None]);
        let w = vec![vec![0.5], vec![0.7], vec![0.6]];
        assert_eq!(max_weight_matching(&w), vec![None, Some(0), None]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let w = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(max_weight_matching(&w), vec![Some(0), Some(1)]);
        let w = vec![vec![0.0, 0.6], vec![0.6, 0.6]];
        assert_eq!(max_weight_matching(&w), vec![Some(1), Some(0)]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(1..=6);
            let w: Vec<Vec<f64>> = (0..r)
                .map(|_| {
                    (0..c)
                        .map(|_| {
                            if rng.random_bool(0.4) {
                                0.0
                            } else {
                                // coarse values so exact ties occur
                                (rng.random_range(1..=10) as f64) / 10.0
                            }
                        })
                        .collect()
                })
                .collect();
            let m = max_weight_matching(&w);
            let (total, bf) = oracle::brute_force(&w);
            assert_eq!(m, bf, "weights {w:?}");
            assert_eq!(matching_total(&w, &m), total);
        }
    }
}
