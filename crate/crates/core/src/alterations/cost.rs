use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::domain::Covariates;
use crate::error::{invalid, Result};
use crate::rng::StreamRng;

/// Relative ridge added to estimated covariances: `1e-6 · trace(Σ)/d · I`.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// A positive-definite covariance `Σ` with its Cholesky factor and inverse.
/// Drives both Gaussian proposals `N(0, scale·Σ)` and the Mahalanobis cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    sigma: DMatrix<f64>,
    lower: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl Covariance {
    pub fn from_matrix(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(invalid("covariance must be a nonempty square matrix"));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(invalid("covariance has non-finite entries"));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(invalid("covariance must be symmetric"));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("covariance is not positive definite"))?;
        let inverse = chol.inverse();
        Ok(Self {
            lower: chol.l(),
            inverse,
            sigma,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_matrix(DMatrix::identity(dim, dim)).expect("identity is positive definite")
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::from_matrix(DMatrix::from_diagonal(&DVector::from_column_slice(
            variances,
        )))
    }

    /// Sample covariance of `points` plus `1e-6 · trace(Σ)/d · I`.
    pub fn estimate(points: &[Covariates]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| invalid("cannot estimate a covariance from no points"))?;
        let d = first.dim();
        let n = points.len();
        let mut mean = DVector::zeros(d);
        for p in points {
            mean += DVector::from_column_slice(p.as_slice());
        }
        mean /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        for p in points {
            let c = DVector::from_column_slice(p.as_slice()) - &mean;
            sigma += &c * c.transpose();
        }
        if n > 1 {
            sigma /= (n - 1) as f64;
        }
        let trace = sigma.trace();
        let base = if trace > 0.0 { trace / d as f64 } else { 1.0 };
        for i in 0..d {
            sigma[(i, i)] += COVARIANCE_RIDGE * base;
        }
        // exact symmetry for the Cholesky check
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        Self::from_matrix(sigma)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// Draws `N(0, scale·Σ)` from `dim()` standard normals, in order.
    pub fn sample(&self, scale: f64, rng: &mut StreamRng) -> Vec<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let v = &self.lower * z * scale.sqrt();
        v.iter().copied().collect()
    }

    /// `(a − b)ᵀ Σ⁻¹ (a − b)`.
    pub fn mahalanobis_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
        (diff.transpose() * &self.inverse * &diff)[(0, 0)]
    }

    pub fn mahalanobis(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mahalanobis_sq(a, b).max(0.0).sqrt()
    }
}

/// Movement cost `c(x, x') = (x − x')ᵀ Σ⁻¹ (x − x')`.
#[derive(Debug, Clone)]
pub struct MahalanobisCost {
    covariance: std::sync::Arc<Covariance>,
}

impl MahalanobisCost {
    pub fn new(covariance: std::sync::Arc<Covariance>) -> Self {
        Self { covariance }
    }

    pub fn cost(&self, from: &Covariates, to: &Covariates) -> f64 {
        self.covariance
            .mahalanobis_sq(from.as_slice(), to.as_slice())
            .max(0.0)
    }

    pub fn covariance(&self) -> &std::sync::Arc<Covariance> {
        &self.covariance
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn c(v: &[f64]) -> Covariates {
        Covariates::new(v.to_vec()).unwrap()
    }

    #[test]
    fn estimate_recovers_sample_covariance() {
        let pts = [c(&[0.0, 0.0]), c(&[2.0, 1.0]), c(&[4.0, 5.0])];
        let cov = Covariance::estimate(&pts).unwrap();
        // unbiased sample covariance: var x = 4, var y = 7, cov = 5
        let m = cov.matrix();
        let ridge = COVARIANCE_RIDGE * 11.0 / 2.0;
        assert!((m[(0, 0)] - 4.0 - ridge).abs() < 1e-12);
        assert!((m[(1, 1)] - 7.0 - ridge).abs() < 1e-12);
        assert!((m[(0, 1)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_points_still_give_positive_definite_estimate() {
        let pts = [c(&[1.0, 2.0]), c(&[1.0, 2.0]), c(&[2.0, 4.0])];
        assert!(Covariance::estimate(&pts).is_ok());
        let same = [c(&[1.0]), c(&[1.0])];
        assert!(Covariance::estimate(&same).is_ok());
    }

    #[test]
    fn non_pd_matrix_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Covariance::from_matrix(m).is_err());
    }

    #[test]
    fn samples_have_requested_covariance() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let cov = Covariance::from_matrix(sigma).unwrap();
        let mut rng = StreamRng::seed_from_u64(4);
        let n = 40_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let v = cov.sample(0.5, &mut rng);
            acc[0] += v[0] * v[0];
            acc[1] += v[1] * v[1];
            acc[2] += v[0] * v[1];
        }
        let est: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
        assert!((est[0] - 1.0).abs() < 0.04, "{est:?}");
        assert!((est[1] - 0.5).abs() < 0.02, "{est:?}");
        assert!((est[2] - 0.3).abs() < 0.02, "{est:?}");
    }

    proptest! {
        #[test]
        fn cost_is_a_proper_cost(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5]);
            let cost = MahalanobisCost::new(Arc::new(Covariance::from_matrix(sigma).unwrap()));
            let (xa, xb) = (c(&a), c(&b));
            prop_assert_eq!(cost.cost(&xa, &xa), 0.0);
            let ab = cost.cost(&xa, &xb);
            prop_assert!((ab - cost.cost(&xb, &xa)).abs() <= 1e-12 * ab.max(1.0));
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }
    }
}
