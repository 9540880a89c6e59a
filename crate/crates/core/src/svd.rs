//! One-sided (Hestenes) Jacobi singular values for small dense blocks.

use ndarray::{Array2, ArrayView2};

use crate::error::{FuseError, Result};

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular values of `m`, sorted descending, length `min(rows, cols)`.
pub fn singular_values(m: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    // Orthogonalize the columns of the tall orientation.
    let mut w: Array2<f64> = if m.nrows() >= m.ncols() {
        m.to_owned()
    } else {
        m.t().to_owned()
    };
    let n = w.ncols();
    if n == 0 {
        return Ok(Vec::new());
    }

    // Columns that have collapsed to roundoff are treated as already orthogonal.
    let floor = w.iter().map(|v| v * v).sum::<f64>() * 1e-30;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in w.rows() {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma == 0.0 || alpha.min(beta) <= floor || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mut row in w.rows_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FuseError::SvdNoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut values: Vec<f64> = w
        .columns()
        .into_iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Largest singular value (spectral norm).
pub fn spectral_norm(m: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}
