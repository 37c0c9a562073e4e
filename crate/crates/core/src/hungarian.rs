//! Minimum-cost assignment (shortest augmenting paths with potentials).

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Row-to-column assignment of a possibly rectangular cost matrix.
///
/// Every row is assigned when `rows <= cols`, every column otherwise; the
/// remaining entries are `None`. Total cost is minimal. Costs must be finite.
pub fn hungarian(cost: &Matrix) -> Result<Vec<Option<usize>>> {
    if !cost.is_finite() {
        return Err(Error::Config("assignment costs must be finite".into()));
    }
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Ok(vec![None; n]);
    }
    if n > m {
        let cols = solve(&cost.transpose());
        let mut rows = vec![None; n];
        for (c, r) in cols.into_iter().enumerate() {
            rows[r] = Some(c);
        }
        return Ok(rows);
    }
    Ok(solve(cost).into_iter().map(Some).collect())
}

/// Assumes `rows <= cols`; returns the column of every row.
fn solve(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Sum of the assigned costs.
pub fn assignment_cost(cost: &Matrix, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .sum()
}

/// Hungarian matching that keeps only pairs whose score passes a gate.
///
/// `score` is maximized; pairs below `min_score` are excluded from the
/// optimization rather than filtered afterwards.
pub fn gated_max_matching(score: &Matrix, min_score: f64) -> Result<Vec<(usize, usize)>> {
    let (n, m) = score.shape();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let max = score
        .data()
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(min_score, f64::max);
    // Forbidden pairs cost more than any admissible full assignment can save.
    let forbidden = (max - min_score + 1.0) * (n.max(m) as f64 + 1.0);
    let mut cost = Matrix::zeros(n, m);
    for r in 0..n {
        for c in 0..m {
            let s = score.get(r, c);
            let v = if s.is_finite() && s >= min_score {
                max - s
            } else {
                forbidden
            };
            cost.set(r, c, v);
        }
    }
    let assignment = hungarian(&cost)?;
    Ok(assignment
        .into_iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (r, c)))
        .filter(|&(r, c)| {
            let s = score.get(r, c);
            s.is_finite() && s >= min_score
        })
        .collect())
}
