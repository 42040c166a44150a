use super::CovarianceOp;
use crate::error::{Error, Result};

/// Relative cutoff below which a variance is treated as zero by `solve`.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Diagonal covariance. Zero variances are allowed (degenerate noise); the
/// inverse then has pseudoinverse semantics: reciprocals of entries below
/// `PINV_CUTOFF * max` are set to zero.
#[derive(Debug, Clone)]
pub struct DiagonalCovariance {
    var: Vec<f64>,
    inv: Vec<f64>,
}

impl DiagonalCovariance {
    pub fn new(var: Vec<f64>) -> Result<Self> {
        if var.is_empty() {
            return Err(Error::InvalidParameter("diagonal covariance needs at least one entry".into()));
        }
        if let Some(bad) = var.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "diagonal variances must be finite and non-negative, found {bad}"
            )));
        }
        let max = var.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::InvalidParameter("diagonal covariance is identically zero".into()));
        }
        let inv = var
            .iter()
            .map(|&v| if v > PINV_CUTOFF * max { 1.0 / v } else { 0.0 })
            .collect();
        Ok(Self { var, inv })
    }

    /// `variance * I` on `R^n`.
    pub fn isotropic(n: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidParameter(format!("variance must be positive, got {variance}")));
        }
        Self::new(vec![variance; n])
    }

    pub fn variances(&self) -> &[f64] {
        &self.var
    }

    /// The common variance if all entries are equal.
    pub fn isotropic_variance(&self) -> Option<f64> {
        let v0 = self.var[0];
        self.var.iter().all(|&v| v == v0).then_some(v0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.inv.contains(&0.0)
    }
}

impl CovarianceOp for DiagonalCovariance {
    fn dim(&self) -> usize {
        self.var.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.var).map(|(a, v)| a * v).collect()
    }
    fn sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.var).map(|(a, v)| a * v.sqrt()).collect()
    }
    fn inv_sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.inv).map(|(a, v)| a * v.sqrt()).collect()
    }
    fn solve(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.inv).map(|(a, v)| a * v).collect()
    }
    fn trace(&self) -> f64 {
        self.var.iter().sum()
    }
    fn diagonal(&self) -> Option<&[f64]> {
        Some(&self.var)
    }
    fn name(&self) -> String {
        match self.isotropic_variance() {
            Some(v) => format!("{v} * I({})", self.var.len()),
            None => format!("diagonal({})", self.var.len()),
        }
    }
}
