use nalgebra::{DMatrix, DVector};

use super::CovarianceOp;
use crate::error::{Error, Result};

/// Explicit SPD covariance, factored once by a symmetric eigendecomposition.
/// Meant for small instances (tests, custom problems).
#[derive(Debug, Clone)]
pub struct DenseCovariance {
    matrix: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    inv: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl DenseCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-10 * matrix.amax().max(1.0) {
            return Err(Error::InvalidParameter(format!("covariance is not symmetric (defect {asym:.2e})")));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        if let Some(bad) = eig.eigenvalues.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "covariance is not positive definite (eigenvalue {bad:.3e})"
            )));
        }
        let v = &eig.eigenvectors;
        let build = |f: &dyn Fn(f64) -> f64| {
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
            v * d * v.transpose()
        };
        Ok(Self {
            sqrt: build(&|l| l.sqrt()),
            inv: build(&|l| 1.0 / l),
            inv_sqrt: build(&|l| 1.0 / l.sqrt()),
            matrix: sym,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt_matrix(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn inverse_matrix(&self) -> &DMatrix<f64> {
        &self.inv
    }

    fn mul(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        (m * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

impl CovarianceOp for DenseCovariance {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        Self::mul(&self.matrix, x)
    }
    fn sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        Self::mul(&self.sqrt, x)
    }
    fn inv_sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        Self::mul(&self.inv_sqrt, x)
    }
    fn solve(&self, x: &[f64]) -> Vec<f64> {
        Self::mul(&self.inv, x)
    }
    fn trace(&self) -> f64 {
        self.matrix.trace()
    }
    fn name(&self) -> String {
        format!("dense({})", self.matrix.nrows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(DenseCovariance::new(m).is_err());
    }

    #[test]
    fn factors_are_consistent() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = DenseCovariance::new(m.clone()).unwrap();
        assert!((c.sqrt_matrix() * c.sqrt_matrix() - &m).amax() < 1e-12);
        assert!((c.inverse_matrix() * &m - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((c.trace() - 9.0).abs() < 1e-14);
    }
}
