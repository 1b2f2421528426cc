//! Least squares through the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::TrainError;

pub const DEFAULT_RIDGE_EPS: f64 = 1e-8;

/// Condition number of the Gram matrix above which the ridge term is added.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Condition estimate of the intercept-augmented Gram matrix.
    pub condition: f64,
    /// Ridge term added to the non-intercept diagonal, when the plain
    /// system was numerically singular.
    pub ridge: Option<f64>,
    /// Standard errors for `weights`, from the residual variance. `None`
    /// when there are no residual degrees of freedom.
    pub standard_errors: Option<Vec<f64>>,
}

impl LinearFit {
    pub fn used_fallback(&self) -> bool {
        self.ridge.is_some()
    }
}

fn condition_estimate(gram: &DMatrix<f64>) -> f64 {
    let eigen = SymmetricEigen::new(gram.clone());
    let max = eigen.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eigen.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fits `y ~ intercept + x * weights`.
///
/// Solves `(A'A) b = A'y` where `A` is `x` with a leading column of ones.
/// When the Gram matrix has a condition estimate above [`CONDITION_LIMIT`],
/// `ridge_eps` is added to every diagonal entry except the intercept's and
/// the fallback is recorded in the result.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], ridge_eps: f64) -> Result<LinearFit, TrainError> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "{n} rows but {} targets",
            y.len()
        )));
    }
    if n <= p + 1 {
        return Err(TrainError::DimensionMismatch(format!(
            "{n} rows cannot determine {p} weights and an intercept"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(TrainError::DimensionMismatch("inputs contain non-finite values".into()));
    }
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.view_mut((0, 1), (n, p)).copy_from(x);
    let target = DVector::from_column_slice(y);
    let mut gram = design.transpose() * &design;
    let rhs = design.transpose() * &target;

    let condition = condition_estimate(&gram);
    let ridge = if condition > CONDITION_LIMIT {
        for j in 1..=p {
            gram[(j, j)] += ridge_eps;
        }
        Some(ridge_eps)
    } else {
        None
    };
    let chol = Cholesky::new(gram.clone()).ok_or(TrainError::UnsolvableSystem { condition })?;
    let beta = chol.solve(&rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(TrainError::UnsolvableSystem { condition });
    }

    let dof = n - p - 1;
    let standard_errors = (ridge.is_none() && dof > 0).then(|| {
        let residuals = &target - &design * &beta;
        let sigma2 = residuals.norm_squared() / dof as f64;
        let inverse = chol.inverse();
        (1..=p).map(|j| (sigma2 * inverse[(j, j)]).max(0.0).sqrt()).collect()
    });

    Ok(LinearFit {
        intercept: beta[0],
        weights: beta.iter().skip(1).copied().collect(),
        condition,
        ridge,
        standard_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Solves the 3x3 normal equations for two features by Cramer's rule.
    fn cramer_oracle(rows: &[[f64; 2]], y: &[f64]) -> [f64; 3] {
        let mut g = [[0.0; 3]; 3];
        let mut r = [0.0; 3];
        for (row, &t) in rows.iter().zip(y) {
            let a = [1.0, row[0], row[1]];
            for i in 0..3 {
                r[i] += a[i] * t;
                for j in 0..3 {
                    g[i][j] += a[i] * a[j];
                }
            }
        }
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(g);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let mut m = g;
            for i in 0..3 {
                m[i][k] = r[i];
            }
            out[k] = det(m) / d;
        }
        out
    }

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let fit = fit_linear(&x, &[0.0, 1.0, 2.0], DEFAULT_RIDGE_EPS).unwrap();
        assert!((fit.weights[0] - 1.0).abs() < 1e-9);
        assert!(fit.intercept.abs() < 1e-9);
        assert!(!fit.used_fallback());
    }

    #[test]
    fn constant_target() {
        let x = DMatrix::from_row_slice(5, 2, &[0.3, 1.0, -1.2, 0.5, 2.0, -0.7, 0.1, 0.1, 1.5, -2.0]);
        let fit = fit_linear(&x, &[1.0; 5], DEFAULT_RIDGE_EPS).unwrap();
        assert!(fit.weights.iter().all(|w| w.abs() < 1e-9));
        assert!((fit.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn six_by_two_matches_cramer() {
        // Fixed pseudo-random system, values chosen once and frozen.
        let rows = [
            [0.62, -1.31],
            [-0.48, 0.27],
            [1.93, 0.88],
            [-1.07, -0.54],
            [0.15, 1.72],
            [0.81, -0.09],
        ];
        let y = [0.9, 0.1, 1.4, -0.3, 0.6, 0.7];
        let x = DMatrix::from_fn(6, 2, |i, j| rows[i][j]);
        let fit = fit_linear(&x, &y, DEFAULT_RIDGE_EPS).unwrap();
        let oracle = cramer_oracle(&rows, &y);
        assert!((fit.intercept - oracle[0]).abs() < 1e-8);
        assert!((fit.weights[0] - oracle[1]).abs() < 1e-8);
        assert!((fit.weights[1] - oracle[2]).abs() < 1e-8);
    }

    #[test]
    fn collinear_columns_take_the_ridge_path() {
        let a = [0.1, 0.7, -0.3, 1.2, -0.8, 0.4, 0.0, 0.9];
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { a[i] } else { 2.0 * a[i] });
        let y: Vec<f64> = a.iter().map(|v| 0.5 + v).collect();
        let fit = fit_linear(&x, &y, DEFAULT_RIDGE_EPS).unwrap();
        assert_eq!(fit.ridge, Some(DEFAULT_RIDGE_EPS));
        assert!(fit.condition > CONDITION_LIMIT);
        // The ridge solution splits the effect along the collinear pair.
        assert!((fit.weights[0] + 2.0 * fit.weights[1] - 1.0).abs() < 1e-6);
        assert!(fit.standard_errors.is_none());
    }

    #[test]
    fn dimension_checks() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(matches!(
            fit_linear(&x, &[0.0, 1.0], 1e-8),
            Err(TrainError::DimensionMismatch(_))
        ));
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            fit_linear(&x, &[0.0, 1.0], 1e-8),
            Err(TrainError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn residuals_are_orthogonal_to_columns() {
        let x = DMatrix::from_fn(40, 3, |i, j| {
            (((i * 7 + j * 13) % 11) as f64 - 5.0) / 3.0 + (i as f64 * 0.01)
        });
        let y: Vec<f64> = (0..40).map(|i| ((i * 5) % 7) as f64 / 7.0).collect();
        let fit = fit_linear(&x, &y, 1e-8).unwrap();
        assert!(!fit.used_fallback());
        for j in 0..3 {
            let dot: f64 = (0..40)
                .map(|i| {
                    let pred = fit.intercept + (0..3).map(|k| x[(i, k)] * fit.weights[k]).sum::<f64>();
                    x[(i, j)] * (y[i] - pred)
                })
                .sum();
            assert!(dot.abs() < 1e-6, "column {j}: {dot}");
        }
    }
}
