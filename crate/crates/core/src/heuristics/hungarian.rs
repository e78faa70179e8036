use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("weight matrix is empty")]
    Empty,
    #[error("row {0} has a different length than row 0")]
    Ragged(usize),
    #[error("weight at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

/// Maximum-weight one-to-one partial assignment (Kuhn–Munkres, O(n³)).
///
/// The matrix is padded to a square with zero-weight dummies and negative
/// weights are clamped to zero, which makes leaving a row unmatched as good
/// as any negative pair. Pairs with negative weight are therefore never
/// returned. Pairs are sorted by row.
pub fn hungarian_max_weight(weights: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, AssignmentError> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(AssignmentError::Empty);
    }
    for (i, row) in weights.iter().enumerate() {
        if row.len() != cols {
            return Err(AssignmentError::Ragged(i));
        }
        if let Some(j) = row.iter().position(|w| !w.is_finite()) {
            return Err(AssignmentError::NonFinite { row: i, col: j });
        }
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j].max(0.0)
        } else {
            0.0
        }
    };

    // 1-based potentials; p[j] is the row matched to column j, 0 meaning free.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
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

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .filter(|&(i, j)| i < rows && j < cols && weights[i][j] >= 0.0)
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Sum of the weights selected by `pairs`.
pub fn assignment_weight(weights: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| weights[i][j]).sum()
}
