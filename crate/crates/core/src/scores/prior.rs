use std::sync::Arc;

use super::{GaussianPrior, PriorScoreModel};
use crate::error::Result;
use crate::gauss::{cg_solve, default_max_iter, SharedCov, SpectralCovariance, DEFAULT_CG_TOL};
use crate::oracle::{exact_posterior_with, GaussianPosterior};
use crate::ucos::UCoSOperators;

/// Weighted OU score of a Gaussian `N(m, S)` diffused with noising
/// covariance 𝒞: `s(x, t) = -𝒞 Q_t⁻¹ (x - e^{-t/2} m)` with
/// `Q_t = e^{-t} S + (1 - e^{-t}) 𝒞`.
#[derive(Clone)]
pub struct GaussianPriorScore {
    prior: GaussianPrior,
    c: SharedCov,
    cg_tol: f64,
    cg_max_iter: usize,
}

impl GaussianPriorScore {
    pub fn new(prior: GaussianPrior, c: SharedCov) -> Self {
        let n = prior.dim();
        Self { prior, c, cg_tol: DEFAULT_CG_TOL, cg_max_iter: default_max_iter(n) }
    }

    pub fn with_cg(mut self, tol: f64, max_iter: usize) -> Self {
        self.cg_tol = tol;
        self.cg_max_iter = max_iter;
        self
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    // Spectral multipliers of 𝒞 Q_t⁻¹ when the prior is Fourier-diagonal and
    // 𝒞 is either Fourier-diagonal on the same grid or a multiple of I.
    fn spectral_gain(&self, t: f64) -> Option<(&SpectralCovariance, Vec<f64>)> {
        let s = self.prior.cov.as_spectral()?;
        let ch: Vec<f64> = match self.c.as_spectral() {
            Some(c) if c.same_grid(s) => c.half_spectrum().to_vec(),
            Some(_) => return None,
            None => {
                let d = self.c.diagonal()?;
                let v0 = d[0];
                if !d.iter().all(|&v| v == v0) {
                    return None;
                }
                vec![v0; s.half_spectrum().len()]
            }
        };
        let (a, b) = ((-t).exp(), -(-t).exp_m1());
        let mult = ch.iter().zip(s.half_spectrum()).map(|(&ck, &sk)| ck / (a * sk + b * ck)).collect();
        Some((s, mult))
    }

    fn q_solve(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = ((-t).exp(), -(-t).exp_m1());
        let q = |u: &[f64]| {
            let su = self.prior.cov.apply(u);
            let cu = self.c.apply(u);
            su.iter().zip(&cu).map(|(p, r)| a * p + b * r).collect::<Vec<_>>()
        };
        cg_solve(q, v, self.cg_tol, self.cg_max_iter, None)?.into_result()
    }

    /// `𝒞 Q_t⁻¹` applied to `v` (the negated Jacobian of the score).
    pub fn apply_gain(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if let Some((grid, mult)) = self.spectral_gain(t) {
            return Ok(grid.apply_multiplier(v, &mult));
        }
        Ok(self.c.apply(&self.q_solve(t, v)?))
    }

    /// `Q_t⁻¹ 𝒞 v`, the transpose of [`Self::apply_gain`].
    pub fn apply_gain_transpose(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if let Some((grid, mult)) = self.spectral_gain(t) {
            return Ok(grid.apply_multiplier(v, &mult));
        }
        self.q_solve(t, &self.c.apply(v))
    }
}

impl PriorScoreModel for GaussianPriorScore {
    fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let h = (-0.5 * t).exp();
        let d: Vec<f64> = x.iter().zip(&self.prior.mean).map(|(xi, mi)| xi - h * mi).collect();
        let g = self.apply_gain(t, &d)?;
        Ok(g.into_iter().map(|v| -v).collect())
    }

    fn name(&self) -> String {
        "gaussian-prior".into()
    }

    fn vjp(&self, _x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let g = self.apply_gain_transpose(t, v)?;
        Ok(g.into_iter().map(|u| -u).collect())
    }
}

/// Exact conditional score of a linear-Gaussian problem, built from the
/// posterior moments (conjugacy) rather than from the UCoS identity:
/// `s(x, t; y) = -𝒞 Q_t⁻¹ (x - e^{-t/2} μ_y)`,
/// `Q_t = e^{-t} S_y + (1 - e^{-t}) 𝒞`.
pub struct ConditionalExactScore {
    posterior: Arc<GaussianPosterior>,
    c: SharedCov,
    cg_tol: f64,
    cg_max_iter: usize,
}

impl ConditionalExactScore {
    pub fn new(posterior: Arc<GaussianPosterior>, c: SharedCov) -> Self {
        let n = c.dim();
        Self { posterior, c, cg_tol: DEFAULT_CG_TOL, cg_max_iter: default_max_iter(n) }
    }

    pub fn with_cg(mut self, tol: f64, max_iter: usize) -> Self {
        self.cg_tol = tol;
        self.cg_max_iter = max_iter;
        self
    }

    pub fn posterior(&self) -> &GaussianPosterior {
        &self.posterior
    }
}

impl PriorScoreModel for ConditionalExactScore {
    fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (a, b) = ((-t).exp(), -(-t).exp_m1());
        let h = (-0.5 * t).exp();
        let d: Vec<f64> = x.iter().zip(&self.posterior.mean).map(|(xi, mi)| xi - h * mi).collect();
        // The action may fail inside (nested CG); surface the first error.
        let err = std::cell::RefCell::new(None);
        let q = |u: &[f64]| -> Vec<f64> {
            let su = match self.posterior.covariance_apply(u) {
                Ok(v) => v,
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    vec![f64::NAN; u.len()]
                }
            };
            let cu = self.c.apply(u);
            su.iter().zip(&cu).map(|(p, r)| a * p + b * r).collect()
        };
        let sol = cg_solve(q, &d, self.cg_tol, self.cg_max_iter, None);
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        let g = self.c.apply(&sol?.into_result()?);
        Ok(g.into_iter().map(|v| -v).collect())
    }

    fn name(&self) -> String {
        "conditional-exact".into()
    }
}

/// The exact conditional score for measurement `y` (posterior-moment route).
pub fn gaussian_conditional_score_exact(
    ops: &UCoSOperators,
    prior: &GaussianPrior,
    y: &[f64],
) -> Result<ConditionalExactScore> {
    let post = exact_posterior_with(
        prior,
        ops.forward().clone(),
        ops.noise().clone(),
        y,
        ops.cg_tol() * 1e-2,
        ops.cg_max_iter() * 4,
    )?;
    Ok(ConditionalExactScore::new(Arc::new(post), ops.noising().clone())
        .with_cg(ops.cg_tol(), ops.cg_max_iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{sq_exp_covariance, DiagonalCovariance, RngStream};
    use crate::linop::{dot, GridShape};
    use crate::scores::testutil::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn identity_case_is_minus_x() {
        // S0 = 𝒞 = I, m0 = 0: the diffused law stays N(0, I), score -x.
        let n = 3;
        let id: SharedCov = Arc::new(DiagonalCovariance::isotropic(n, 1.0).unwrap());
        let s = GaussianPriorScore::new(GaussianPrior::centered(id.clone()), id);
        let x = [1.0, -2.0, 0.5];
        for t in [0.01, 1.0, 30.0] {
            let got = s.evaluate(&x, t).unwrap();
            for i in 0..n {
                assert!((got[i] + x[i]).abs() < 1e-12);
            }
        }
    }

    fn log_density(q: &DMatrix<f64>, mean: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let d = x - mean;
        -0.5 * d.dot(&q.clone().lu().solve(&d).unwrap())
    }

    #[test]
    fn finite_difference_of_log_density() {
        let p = dense_problem(4, 2, 11, false);
        let score = GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()).with_cg(1e-14, 400);
        let t = 0.6f64;
        let q = &p.s0 * (-t).exp() + &p.c * (-(-t).exp_m1());
        let mean = &p.m0 * (-0.5 * t).exp();
        let x = DVector::from_vec(vec![0.3, -0.7, 1.1, 0.2]);
        let h = 1e-5;
        let mut grad = DVector::zeros(4);
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            grad[i] = (log_density(&q, &mean, &xp) - log_density(&q, &mean, &xm)) / (2.0 * h);
        }
        let expected = &p.c * grad;
        let got = DVector::from_vec(score.evaluate(x.as_slice(), t).unwrap());
        assert!((got - &expected).norm() / expected.norm() < 1e-5);
    }

    #[test]
    fn stationary_limit() {
        let n = 2;
        let c: SharedCov = Arc::new(DiagonalCovariance::isotropic(n, 1.0).unwrap());
        let s0: SharedCov = Arc::new(DiagonalCovariance::new(vec![4.0, 0.25]).unwrap());
        let s = GaussianPriorScore::new(GaussianPrior::new(vec![1.0, 2.0], s0).unwrap(), c).with_cg(1e-14, 50);
        let x = [0.7, -0.4];
        let got = s.evaluate(&x, 40.0).unwrap();
        assert!((got[0] + x[0]).abs() < 1e-8 && (got[1] + x[1]).abs() < 1e-8);
    }

    #[test]
    fn spectral_fast_path_matches_cg() {
        let shape = GridShape::new(6, 6).unwrap();
        let s0: SharedCov = Arc::new(sq_exp_covariance(shape, 0.2, 2.0).unwrap());
        let noisings: [SharedCov; 2] =
            [Arc::new(sq_exp_covariance(shape, 0.3, 1.0).unwrap()), Arc::new(DiagonalCovariance::isotropic(36, 0.7).unwrap())];
        for c in noisings {
            let prior = GaussianPrior::new(RngStream::new(1, 0).normals(36), s0.clone()).unwrap();
            let fast = GaussianPriorScore::new(prior.clone(), c.clone());
            assert!(fast.spectral_gain(0.5).is_some());
            let x = RngStream::new(2, 0).normals(36);
            let t = 0.8;
            let got = fast.evaluate(&x, t).unwrap();
            // Reference by CG through the generic path.
            let (a, b) = ((-t as f64).exp(), -(-t as f64).exp_m1());
            let h = (-0.5 * t as f64).exp();
            let d: Vec<f64> = x.iter().zip(&prior.mean).map(|(xi, mi)| xi - h * mi).collect();
            let q = |u: &[f64]| {
                let su = s0.apply(u);
                let cu = c.apply(u);
                su.iter().zip(&cu).map(|(p, r)| a * p + b * r).collect::<Vec<_>>()
            };
            let sol = cg_solve(q, &d, 1e-13, 2000, None).unwrap().into_result().unwrap();
            let reference: Vec<f64> = c.apply(&sol).into_iter().map(|v| -v).collect();
            let diff: Vec<f64> = got.iter().zip(&reference).map(|(p, q)| p - q).collect();
            assert!(dot(&diff, &diff).sqrt() < 1e-8 * dot(&reference, &reference).sqrt());
        }
    }

    #[test]
    fn vjp_is_transpose() {
        let p = dense_problem(5, 2, 21, true);
        let score = GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()).with_cg(1e-14, 400);
        let mut rng = RngStream::new(3, 0);
        let (u, v) = (rng.normals(5), rng.normals(5));
        let t = 0.3;
        let ju = score.apply_gain(t, &u).unwrap();
        let jtv = score.apply_gain_transpose(t, &v).unwrap();
        assert!((dot(&ju, &v) - dot(&u, &jtv)).abs() < 1e-10);
    }

    #[test]
    fn affine_in_x() {
        let p = dense_problem(5, 2, 22, false);
        let score = GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()).with_cg(1e-14, 400);
        let mut rng = RngStream::new(3, 0);
        let (x1, x2) = (rng.normals(5), rng.normals(5));
        let a = 0.3;
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let s1 = score.evaluate(&x1, 0.5).unwrap();
        let s2 = score.evaluate(&x2, 0.5).unwrap();
        let sm = score.evaluate(&mix, 0.5).unwrap();
        for i in 0..5 {
            assert!((sm[i] - (a * s1[i] + (1.0 - a) * s2[i])).abs() < 1e-10);
        }
    }
}
