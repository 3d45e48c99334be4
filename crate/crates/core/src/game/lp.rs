//! Exact minimax solution of a zero-sum matrix game by the simplex method.

use super::GameError;

const PIVOT_EPS: f64 = 1e-12;

/// Equilibrium of the game `u[i][j]`, where the row player maximizes and the
/// column player minimizes.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSolution {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    pub value: f64,
}

/// Largest gain either side could get by deviating to a pure strategy.
pub fn exploitability(u: &[Vec<f64>], row: &[f64], col: &[f64]) -> f64 {
    let value = expected(u, row, col);
    let best_row = u
        .iter()
        .map(|r| r.iter().zip(col).map(|(a, y)| a * y).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    let best_col = (0..col.len())
        .map(|j| u.iter().zip(row).map(|(r, x)| r[j] * x).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    (best_row - value).max(0.0) + (value - best_col).max(0.0)
}

pub fn expected(u: &[Vec<f64>], row: &[f64], col: &[f64]) -> f64 {
    u.iter()
        .zip(row)
        .map(|(r, x)| x * r.iter().zip(col).map(|(a, y)| a * y).sum::<f64>())
        .sum()
}

/// Solves the game through the column player's LP.
///
/// With `b = u - min(u) + 1 > 0`, the column player's problem becomes
/// `max sum(y') s.t. b y' <= 1, y' >= 0`, whose value is `1 / v_b`. The row
/// player's mixture is read off the dual prices of the slack columns.
pub fn solve_matrix(u: &[Vec<f64>]) -> Result<MatrixSolution, GameError> {
    let m = u.len();
    let n = u.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || u.iter().any(|r| r.len() != n) {
        return Err(GameError::Shape(format!("{m} rows with uneven or empty columns")));
    }
    if u.iter().flatten().any(|x| !x.is_finite()) {
        return Err(GameError::NonFinite);
    }
    let lo = u.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - lo;

    // Rows 0..m are constraints, row m is the objective. Columns: n structural
    // variables, m slacks, then the right-hand side.
    let width = n + m + 1;
    let mut t = vec![0.0; (m + 1) * width];
    for i in 0..m {
        for j in 0..n {
            t[i * width + j] = u[i][j] + shift;
        }
        t[i * width + n + i] = 1.0;
        t[i * width + n + m] = 1.0;
    }
    for j in 0..n {
        t[m * width + j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Bland's rule: cannot cycle.
    while let Some(enter) = (0..n + m).find(|&c| t[m * width + c] < -PIVOT_EPS) {
        let mut leave: Option<(f64, usize)> = None;
        for r in 0..m {
            let a = t[r * width + enter];
            if a > PIVOT_EPS {
                let ratio = t[r * width + n + m] / a;
                let better = match leave {
                    None => true,
                    Some((best, lr)) => ratio < best - PIVOT_EPS || (ratio <= best + PIVOT_EPS && basis[r] < basis[lr]),
                };
                if better {
                    leave = Some((ratio, r));
                }
            }
        }
        let Some((_, r)) = leave else {
            return Err(GameError::Lp("unbounded".into()));
        };
        let p = t[r * width + enter];
        for c in 0..width {
            t[r * width + c] /= p;
        }
        for row in 0..=m {
            if row != r {
                let f = t[row * width + enter];
                if f != 0.0 {
                    for c in 0..width {
                        t[row * width + c] -= f * t[r * width + c];
                    }
                }
            }
        }
        basis[r] = enter;
    }

    let mut y = vec![0.0; n];
    for (r, &b) in basis.iter().enumerate() {
        if b < n {
            y[b] = t[r * width + n + m].max(0.0);
        }
    }
    let mut x: Vec<f64> = (0..m).map(|i| t[m * width + n + i].max(0.0)).collect();
    normalize(&mut x)?;
    normalize(&mut y)?;
    let value = expected(u, &x, &y);
    Ok(MatrixSolution { row: x, col: y, value })
}

fn normalize(v: &mut [f64]) -> Result<(), GameError> {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(GameError::Lp("degenerate solution".into()));
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}
