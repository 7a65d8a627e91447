//! Optimal linear assignment (Hungarian algorithm with potentials).
//!
//! Shared by permutation binarization and by channel matching in the
//! correlation metrics. Ties are broken toward the lexicographically
//! smallest row-to-column mapping so results are deterministic.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Maximum-weight perfect assignment on a square weight matrix.
/// Returns (row_to_col, total_weight); among all maximizers the
/// lexicographically smallest row_to_col is chosen.
pub fn max_assignment(weights: &Tensor) -> Result<(Vec<usize>, f64)> {
    let n = weights.rows();
    if weights.cols() != n {
        return Err(CoreError::shape(format!(
            "max_assignment: {}x{} not square",
            weights.rows(),
            weights.cols()
        )));
    }
    if n == 0 {
        return Err(CoreError::shape("max_assignment: empty matrix".to_string()));
    }
    if !weights.all_finite() {
        return Err(CoreError::numerical(
            "max_assignment: non-finite weight".to_string(),
        ));
    }
    let w = weights.data();
    let best_total = hungarian_max(w, n).1;
    let tol = 1e-9 * (1.0 + best_total.abs());

    // Fix rows in order to the smallest column that still allows an
    // optimal completion.
    let mut assigned = vec![usize::MAX; n];
    let mut used_col = vec![false; n];
    let mut fixed_sum = 0.0;
    for row in 0..n {
        let mut chosen = usize::MAX;
        for col in 0..n {
            if used_col[col] {
                continue;
            }
            let cand = fixed_sum + w[row * n + col];
            let rest = if row + 1 == n {
                0.0
            } else {
                let sub = submatrix(w, n, row + 1, &used_col, col);
                let k = n - row - 1;
                hungarian_max(&sub, k).1
            };
            if cand + rest >= best_total - tol {
                chosen = col;
                fixed_sum = cand;
                break;
            }
        }
        debug_assert!(chosen != usize::MAX, "no optimal completion found");
        used_col[chosen] = true;
        assigned[row] = chosen;
    }
    Ok((assigned, best_total))
}

/// Remaining-rows x remaining-cols block after fixing rows < `from_row`
/// and the used columns plus `extra_col`.
fn submatrix(w: &[f64], n: usize, from_row: usize, used_col: &[bool], extra_col: usize) -> Vec<f64> {
    let cols: Vec<usize> = (0..n)
        .filter(|&c| !used_col[c] && c != extra_col)
        .collect();
    let mut out = Vec::with_capacity((n - from_row) * cols.len());
    for r in from_row..n {
        for &c in &cols {
            out.push(w[r * n + c]);
        }
    }
    out
}

/// Classic O(n^3) Hungarian algorithm on a minimization problem; weights
/// are negated to maximize.
fn hungarian_max(w: &[f64], n: usize) -> (Vec<usize>, f64) {
    let cost = |i: usize, j: usize| -w[i * n + j];
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| w[i * n + row_to_col[i]]).sum();
    (row_to_col, total)
}
