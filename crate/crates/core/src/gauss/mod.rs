//! Covariance operators, Gaussian sampling and the matrix-free SPD solver.

mod cg;
mod dense;
mod diag;
mod eig;
mod rng;
mod spectral;

pub use cg::{cg_solve, default_max_iter, CgSolution, DEFAULT_CG_TOL};
pub use dense::DenseCovariance;
pub use diag::{DiagonalCovariance, PINV_CUTOFF};
pub use eig::symmetric_eigen;
pub use rng::RngStream;
pub use spectral::{sq_exp_covariance, spectral_covariance, Fft2, SpectralCovariance, SE_JITTER};

use std::sync::Arc;

/// A symmetric positive (semi-)definite covariance known through its actions.
///
/// `sqrt_apply` is the symmetric square root, so it is its own adjoint and
/// `sqrt_apply(sqrt_apply(v)) = apply(v)`.
pub trait CovarianceOp: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn sqrt_apply(&self, x: &[f64]) -> Vec<f64>;
    fn inv_sqrt_apply(&self, x: &[f64]) -> Vec<f64>;
    fn solve(&self, x: &[f64]) -> Vec<f64>;
    fn trace(&self) -> f64;

    /// Fourier-diagonal view, used by fast paths that combine two covariances
    /// on the same grid.
    fn as_spectral(&self) -> Option<&SpectralCovariance> {
        None
    }

    /// Pixel-diagonal view.
    fn diagonal(&self) -> Option<&[f64]> {
        None
    }

    fn name(&self) -> String {
        "covariance".to_string()
    }
}

pub type SharedCov = Arc<dyn CovarianceOp>;

/// One draw from `N(0, cov)`.
pub fn sample_gaussian(cov: &dyn CovarianceOp, rng: &mut RngStream) -> Vec<f64> {
    cov.sqrt_apply(&rng.normals(cov.dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn identity_variance_monte_carlo() {
        let cov = DiagonalCovariance::isotropic(1, 1.0).unwrap();
        let mut rng = RngStream::new(10, 0);
        let n = 100_000;
        let var: f64 = (0..n).map(|_| sample_gaussian(&cov, &mut rng)[0].powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 3.0 * (2.0f64).sqrt() / (n as f64).sqrt(), "{var}");
    }

    #[test]
    fn deterministic_per_stream() {
        let cov = sq_exp_covariance(crate::linop::GridShape::new(4, 4).unwrap(), 0.2, 1.0).unwrap();
        let a = sample_gaussian(&cov, &mut RngStream::new(7, 2));
        let b = sample_gaussian(&cov, &mut RngStream::new(7, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn dense_empirical_covariance_within_standard_errors() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[2.0, 0.6, 0.2, 0.0, 0.6, 1.5, 0.3, 0.1, 0.2, 0.3, 1.0, 0.4, 0.0, 0.1, 0.4, 0.8],
        );
        let cov = DenseCovariance::new(m.clone()).unwrap();
        let mut rng = RngStream::new(11, 0);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_gaussian(&cov, &mut rng)).collect();
        for i in 0..4 {
            for j in 0..4 {
                let emp: f64 = draws.iter().map(|d| d[i] * d[j]).sum::<f64>() / n as f64;
                // Var(x_i x_j) = S_ii S_jj + S_ij^2 for centred Gaussians.
                let se = ((m[(i, i)] * m[(j, j)] + m[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((emp - m[(i, j)]).abs() < 5.0 * se, "({i},{j}): {emp} vs {}", m[(i, j)]);
            }
        }
    }

    #[test]
    fn se_pixel_variance_monte_carlo() {
        let shape = crate::linop::GridShape::new(64, 64).unwrap();
        let cov = sq_exp_covariance(shape, 0.1, 1.0).unwrap();
        let mut rng = RngStream::new(12, 0);
        let n = 10_000;
        let px = shape.index(20, 33);
        let var: f64 =
            (0..n).map(|_| sample_gaussian(&cov, &mut rng)[px].powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn empirical_covariance_error_shrinks_like_root_n() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.1, 0.5, 1.2, 0.3, 0.1, 0.3, 0.7]);
        let cov = DenseCovariance::new(m.clone()).unwrap();
        let frob = |n: usize, seed: u64| {
            let mut rng = RngStream::new(seed, 0);
            let mut acc = DMatrix::<f64>::zeros(3, 3);
            for _ in 0..n {
                let d = nalgebra::DVector::from_vec(sample_gaussian(&cov, &mut rng));
                acc += &d * d.transpose();
            }
            (acc / n as f64 - &m).norm()
        };
        // Average over a few seeds to tame fluctuation.
        let avg = |n: usize| (0..8).map(|s| frob(n, 100 + s)).sum::<f64>() / 8.0;
        let (small, large) = (avg(1_000), avg(16_000));
        let ratio = small / large;
        assert!(ratio > 2.5 && ratio < 6.5, "expected ~4, got {ratio}");
    }
}
