use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::{invalid, Result};
use crate::models::Regressor;

/// Linear model fit by ridge-penalized least squares. The last weight is the
/// bias, and it is penalized like every other weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeRegressor {
    pub weights: Vec<f64>,
    pub ridge: f64,
}

/// Design matrix with a trailing column of ones.
pub(crate) fn design_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { rows[i][j] } else { 1.0 })
}

/// Returns `(AᵀA + ridge·I, Aᵀy)`.
pub(crate) fn normal_equations(
    rows: &[&[f64]],
    targets: &[f64],
    ridge: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let a = design_matrix(rows);
    let y = DVector::from_column_slice(targets);
    let mut gram = a.transpose() * &a;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let rhs = a.transpose() * y;
    (gram, rhs)
}

pub fn fit_ridge(train: &[Example], ridge: f64) -> Result<RidgeRegressor> {
    if train.is_empty() {
        return Err(invalid("ridge needs at least one training example"));
    }
    if !(ridge.is_finite() && ridge > 0.0) {
        return Err(invalid(format!("ridge must be positive, got {ridge}")));
    }
    let rows: Vec<&[f64]> = train.iter().map(|e| e.x.as_slice()).collect();
    let targets = train
        .iter()
        .map(|e| {
            e.y.as_continuous()
                .ok_or_else(|| invalid("ridge regression needs continuous labels"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (gram, rhs) = normal_equations(&rows, &targets, ridge);
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("normal equations are not positive definite"))?;
    let mut w = chol.solve(&rhs);
    // One step of iterative refinement keeps the residual near machine precision
    // on badly scaled features.
    let residual = &rhs - &gram * &w;
    w += chol.solve(&residual);
    Ok(RidgeRegressor {
        weights: w.iter().copied().collect(),
        ridge,
    })
}

impl RidgeRegressor {
    pub fn dim(&self) -> usize {
        self.weights.len() - 1
    }

    /// `‖(AᵀA + ridge·I)w − Aᵀy‖∞` on the given data.
    pub fn normal_residual(&self, train: &[Example]) -> f64 {
        let rows: Vec<&[f64]> = train.iter().map(|e| e.x.as_slice()).collect();
        let targets: Vec<f64> = train
            .iter()
            .map(|e| e.y.as_continuous().unwrap_or(f64::NAN))
            .collect();
        let (gram, rhs) = normal_equations(&rows, &targets, self.ridge);
        let w = DVector::from_column_slice(&self.weights);
        (gram * w - rhs).amax()
    }
}

impl Regressor for RidgeRegressor {
    fn predict(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        x.iter()
            .zip(&self.weights[..d])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.weights[d]
    }
}
