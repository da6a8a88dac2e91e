//! Driver/order matching for deployment-style dispatch.
//!
//! `hungarian_match` maximizes `Σ Q(i, j)·a_ij` over partial one-to-one
//! assignments: every driver takes at most one order and may instead do
//! nothing (value 0). When all drivers of a grid are interchangeable the
//! problem collapses to picking the `m` best orders, see `top_m_match`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    rows: usize,
    cols: usize,
    a: Vec<bool>,
}

impl AssignmentMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            a: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, driver: usize, order: usize) -> bool {
        self.a[driver * self.cols + order]
    }

    pub fn set(&mut self, driver: usize, order: usize, value: bool) {
        self.a[driver * self.cols + order] = value;
    }

    /// `(driver, order)` pairs, ordered by driver.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .filter(|&k| self.a[k])
            .map(|k| (k / self.cols, k % self.cols))
            .collect()
    }

    /// Every row and every column has at most one assignment.
    pub fn is_valid(&self) -> bool {
        let rows_ok = (0..self.rows).all(|i| (0..self.cols).filter(|&j| self.get(i, j)).count() <= 1);
        let cols_ok = (0..self.cols).all(|j| (0..self.rows).filter(|&i| self.get(i, j)).count() <= 1);
        rows_ok && cols_ok
    }

    pub fn objective(&self, q: &[Vec<f64>]) -> f64 {
        self.pairs().into_iter().map(|(i, j)| q[i][j]).sum()
    }
}

fn check_matrix(q: &[Vec<f64>]) -> Result<usize> {
    let m = q.len();
    let n = q.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::domain("matching needs at least one driver and one order"));
    }
    if q.iter().any(|row| row.len() != n) {
        return Err(Error::Shape("ragged value matrix".into()));
    }
    if q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching values"));
    }
    Ok(n)
}

/// Optimal partial assignment via the O(k³) Hungarian method on the
/// zero-padded square matrix. Pairs worth nothing are left unassigned.
pub fn hungarian_match(q: &[Vec<f64>]) -> Result<AssignmentMatrix> {
    let n = check_matrix(q)?;
    let m = q.len();
    let k = m.max(n);
    // Costs for minimization; doing nothing is worth 0, so negative values
    // never beat it.
    let cost = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            -q[i][j].max(0.0)
        } else {
            0.0
        }
    };

    // Potentials and matching, 1-based with column 0 as the virtual root.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut row_of = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
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
            for j in 0..=k {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = AssignmentMatrix::empty(m, n);
    for j in 1..=k {
        let i = row_of[j];
        if i >= 1 && i <= m && j <= n && q[i - 1][j - 1] > 0.0 {
            out.set(i - 1, j - 1, true);
        }
    }
    Ok(out)
}

/// Indices of the `m` largest values, best first; ties go to the lower
/// index.
pub fn top_m_match(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}
