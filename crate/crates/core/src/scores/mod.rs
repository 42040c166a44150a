//! Score-model interfaces and their closed-form Gaussian realizations.
//!
//! Every score in this crate is 𝒞-weighted: `s = 𝒞 ∇ log p_t`. Times passed
//! to `evaluate` are effective times.

mod modal;
mod prior;
mod tabulated;
mod task;

pub use modal::{proportionality, ModalBasis, ModalOptions};
pub use prior::{gaussian_conditional_score_exact, ConditionalExactScore, GaussianPriorScore};
pub use tabulated::TabulatedLinearModel;
pub use task::{GaussianTaskScore, TaskBackend};

use crate::error::{Error, Result};
use crate::gauss::{RngStream, SharedCov};

/// The task-dependent map `r(ζ, t)` that turns into the conditional score via
/// `s = λ(t) (r(ξ_t(x, y), t) - e^{t/2} x)`.
pub trait ScoreModel: Send + Sync {
    fn evaluate(&self, zeta: &[f64], t: f64) -> Result<Vec<f64>>;
    fn name(&self) -> String;
    fn describe(&self) -> String {
        self.name()
    }
}

/// A (weighted) score of a diffused distribution, `s(x, t)`.
pub trait PriorScoreModel: Send + Sync {
    fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn name(&self) -> String;

    /// `(∂s/∂x)ᵀ v` at `x`, when the model can provide it.
    fn vjp(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::InvalidParameter(format!("{} does not provide a Jacobian", self.name())))
    }
}

/// Gaussian prior `N(m0, S0)`.
#[derive(Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub cov: SharedCov,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: SharedCov) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Dimension(format!(
                "prior mean has length {} but the covariance acts on R^{}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: SharedCov) -> Self {
        Self { mean: vec![0.0; cov.dim()], cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_centered(&self) -> bool {
        self.mean.iter().all(|&v| v == 0.0)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = self.cov.sqrt_apply(&rng.normals(self.dim()));
        z.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }
}

/// Denoised estimate `x̂0 = e^{t/2} (x + (1 - e^{-t}) s(x, t))`, i.e. the
/// conditional mean `E[X0 | X_t = x]` recovered from a weighted score.
pub fn x0_hat(score: &dyn PriorScoreModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let s = score.evaluate(x, t)?;
    let h = (0.5 * t).exp();
    let k = -(-t).exp_m1();
    Ok(x.iter().zip(&s).map(|(xi, si)| h * (xi + k * si)).collect())
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn x0_hat_is_gaussian_conditional_mean() {
        let p = dense_problem(5, 2, 3, false);
        let score = GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()).with_cg(1e-14, 500);
        let mut rng = RngStream::new(4, 0);
        let x0 = DVector::from_vec(rng.normals(5));
        for t in [0.05, 0.4, 2.0] {
            let x = &x0 * (-0.5 * t as f64).exp();
            let got = x0_hat(&score, x.as_slice(), t).unwrap();
            let q = &p.s0 * (-t as f64).exp() + &p.c * (-(-t as f64).exp_m1());
            let d = &x - &p.m0 * (-0.5 * t as f64).exp();
            let expected = &p.m0 + &p.s0 * q.lu().solve(&d).unwrap() * (-0.5 * t as f64).exp();
            let err = (DVector::from_vec(got) - &expected).norm() / expected.norm();
            assert!(err < 1e-9, "t = {t}: {err}");
        }
    }

    #[test]
    fn x0_hat_small_time_limit() {
        let p = dense_problem(4, 2, 5, true);
        let score = GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()).with_cg(1e-14, 500);
        let x = [0.3, -0.2, 1.0, 0.5];
        let got = x0_hat(&score, &x, 1e-10).unwrap();
        for (a, b) in got.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn prior_dimension_checked() {
        let p = dense_problem(4, 2, 5, true);
        assert!(GaussianPrior::new(vec![0.0; 3], p.prior.cov.clone()).is_err());
    }
}
