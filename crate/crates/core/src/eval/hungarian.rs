use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-to-one matching between predictions (rows) and ground truth (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(pred_index, gt_index)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_iou: f64,
}

/// Minimum-cost assignment of every row of an `n × m` matrix (`n ≤ m`) with
/// the potentials form of the Hungarian algorithm. Returns the column of
/// each row.
fn min_cost_rows(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j]: row (1-based) assigned to column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Best total weight over matchings of size `min(rows, cols)` on the
/// sub-matrix selected by `rows` and `cols`.
fn best_total(w: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let transpose = rows.len() > cols.len();
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |a: usize, b: usize| if transpose { w[b][a] } else { w[a][b] };
    let cost: Vec<Vec<f64>> = r.iter().map(|&a| c.iter().map(|&b| -at(a, b)).collect()).collect();
    let col_of = min_cost_rows(&cost, r.len(), c.len());
    col_of.iter().enumerate().map(|(i, &j)| at(r[i], c[j])).sum()
}

fn validate(w: &[Vec<f64>]) -> Result<usize> {
    let m = w.first().map_or(0, Vec::len);
    for row in w {
        if row.len() != m {
            return Err(Error::Shape("ragged weight matrix".into()));
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
    }
    Ok(m)
}

/// Maximum-total-weight one-to-one assignment of size `min(|P|, |G|)`.
///
/// Among optimal assignments the lexicographically smallest pair list
/// (ordered by prediction index) is returned, so ties are resolved the
/// same way on every platform.
pub fn hungarian_match(weights: &[Vec<f64>]) -> Result<Assignment> {
    let m = validate(weights)?;
    let n = weights.len();
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_iou: 0.0,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let opt = best_total(weights, &all_rows, &all_cols);
    let tol = 1e-12 * opt.abs().max(1.0);
    let target = n.min(m);

    let mut pairs = Vec::with_capacity(target);
    let mut fixed_total = 0.0;
    let mut free_cols = all_cols;
    let mut skipped = 0;
    for i in 0..n {
        if pairs.len() == target {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            // The remaining rows must still be able to fill the assignment.
            if rest_rows.len().min(rest_cols.len()) + pairs.len() + 1 < target {
                continue;
            }
            let total = fixed_total + weights[i][j] + best_total(weights, &rest_rows, &rest_cols);
            if total >= opt - tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let j = free_cols.remove(pos);
                fixed_total += weights[i][j];
                pairs.push((i, j));
            }
            None => {
                skipped += 1;
                debug_assert!(skipped <= n - target);
            }
        }
    }
    Ok(Assignment {
        pairs,
        total_iou: fixed_total,
    })
}
