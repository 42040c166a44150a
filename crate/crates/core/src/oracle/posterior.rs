use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{cg_solve, default_max_iter, RngStream, SharedCov};
use crate::linop::SharedMap;
use crate::scores::GaussianPrior;

/// Posterior of `x ~ N(m0, S0)`, `y = A x + ε`, `ε ~ N(0, Γ)`:
/// mean `m0 + S0 A* G⁻¹ (y - A m0)`, covariance `S0 - S0 A* G⁻¹ A S0`,
/// with `G = A S0 A* + Γ` inverted by CG on the measurement space.
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    prior: GaussianPrior,
    a: SharedMap,
    gamma: SharedCov,
    tol: f64,
    max_iter: usize,
}

impl std::fmt::Debug for GaussianPosterior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianPosterior").field("n", &self.mean.len()).field("tol", &self.tol).finish()
    }
}

pub fn exact_posterior(prior: &GaussianPrior, a: SharedMap, gamma: SharedCov, y: &[f64]) -> Result<GaussianPosterior> {
    let m = a.codomain_dim();
    exact_posterior_with(prior, a, gamma, y, 1e-10, default_max_iter(m).max(200) * 4)
}

pub fn exact_posterior_with(
    prior: &GaussianPrior,
    a: SharedMap,
    gamma: SharedCov,
    y: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<GaussianPosterior> {
    if a.domain_dim() != prior.dim() || gamma.dim() != a.codomain_dim() || y.len() != a.codomain_dim() {
        return Err(Error::Dimension("posterior: inconsistent prior, operator, noise or data sizes".into()));
    }
    let mut post = GaussianPosterior { mean: prior.mean.clone(), prior: prior.clone(), a, gamma, tol, max_iter };
    let am0 = post.a.apply(&prior.mean);
    let resid: Vec<f64> = y.iter().zip(&am0).map(|(p, q)| p - q).collect();
    let u = post.system_solve(&resid)?;
    let corr = post.prior.cov.apply(&post.a.adjoint_apply(&u));
    for (m, c) in post.mean.iter_mut().zip(&corr) {
        *m += c;
    }
    Ok(post)
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    /// `(A S0 A* + Γ)⁻¹ w`.
    pub fn system_solve(&self, w: &[f64]) -> Result<Vec<f64>> {
        let action = |v: &[f64]| -> Vec<f64> {
            let s = self.a.apply(&self.prior.cov.apply(&self.a.adjoint_apply(v)));
            s.iter().zip(self.gamma.apply(v)).map(|(p, q)| p + q).collect()
        };
        let degenerate = self.gamma.diagonal().is_some_and(|d| d.contains(&0.0));
        let pre = |r: &[f64]| self.gamma.solve(r);
        let precond: Option<&dyn Fn(&[f64]) -> Vec<f64>> = if degenerate { None } else { Some(&pre) };
        cg_solve(action, w, self.tol, self.max_iter, precond)?.into_result()
    }

    /// Posterior covariance action.
    pub fn covariance_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let su = self.prior.cov.apply(u);
        let inner = self.system_solve(&self.a.apply(&su))?;
        let corr = self.prior.cov.apply(&self.a.adjoint_apply(&inner));
        Ok(su.iter().zip(&corr).map(|(p, q)| p - q).collect())
    }

    /// Exact draw by perturbation: `x = μ + x_p - S0 A* G⁻¹ (A x_p + e)` with
    /// `x_p ~ N(0, S0)`, `e ~ N(0, Γ)`.
    pub fn sample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let n = self.dim();
        let xp = self.prior.cov.sqrt_apply(&rng.normals(n));
        let e = self.gamma.sqrt_apply(&rng.normals(self.a.codomain_dim()));
        let axp = self.a.apply(&xp);
        let r: Vec<f64> = axp.iter().zip(&e).map(|(p, q)| -p - q).collect();
        let corr = self.prior.cov.apply(&self.a.adjoint_apply(&self.system_solve(&r)?));
        Ok((0..n).map(|i| self.mean[i] + xp[i] + corr[i]).collect())
    }

    /// Diagonal of the posterior covariance, one measurement-space solve per
    /// coordinate (parallel over coordinates).
    pub fn marginal_variance_exact(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                let s = self.prior.cov.apply(&e);
                let v = self.a.apply(&s);
                let u = self.system_solve(&v)?;
                Ok(s[i] - crate::linop::dot(&v, &u))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{DenseCovariance, DiagonalCovariance};
    use crate::linop::{identity, DenseMap, ZeroMap};
    use crate::scores::testutil::*;
    use nalgebra::DVector;
    use std::sync::Arc;

    #[test]
    fn no_data_gives_prior() {
        let p = dense_problem(4, 3, 1, false);
        let post = exact_posterior(&p.prior, Arc::new(ZeroMap::new(4, 3)), p.ops.noise().clone(), &[1.0, 2.0, 3.0])
            .unwrap();
        assert_eq!(post.mean, p.prior.mean);
        let u = [0.1, -0.3, 0.2, 1.0];
        let got = post.covariance_apply(&u).unwrap();
        let want = p.prior.cov.apply(&u);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_conjugacy() {
        let id: SharedCov = Arc::new(DiagonalCovariance::isotropic(3, 1.0).unwrap());
        let prior = GaussianPrior::centered(id.clone());
        let y = [2.0, -4.0, 1.0];
        let post = exact_posterior(&prior, Arc::new(identity(3)), id, &y).unwrap();
        for (m, yi) in post.mean.iter().zip(&y) {
            assert!((m - yi / 2.0).abs() < 1e-10);
        }
        let c = post.covariance_apply(&[1.0, 0.0, 0.0]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-10 && c[1].abs() < 1e-10);
        let var = post.marginal_variance_exact().unwrap();
        assert!(var.iter().all(|v| (v - 0.5).abs() < 1e-10));
    }

    #[test]
    fn dense_moments() {
        let p = dense_problem(6, 3, 2, false);
        let y = DVector::from_vec(RngStream::new(1, 1).normals(3));
        let post = exact_posterior_with(
            &p.prior,
            Arc::new(DenseMap::new(p.a.clone())),
            Arc::new(DenseCovariance::new(p.g.clone()).unwrap()),
            y.as_slice(),
            1e-14,
            200,
        )
        .unwrap();
        let g = &p.a * &p.s0 * p.a.transpose() + &p.g;
        let gi = g.try_inverse().unwrap();
        let mean = &p.m0 + &p.s0 * p.a.transpose() * &gi * (&y - &p.a * &p.m0);
        let cov = &p.s0 - &p.s0 * p.a.transpose() * &gi * &p.a * &p.s0;
        assert!((DVector::from_vec(post.mean.clone()) - &mean).amax() < 1e-10);
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            let col = post.covariance_apply(&e).unwrap();
            for i in 0..6 {
                assert!((col[i] - cov[(i, j)]).abs() < 1e-10);
            }
        }
        let var = post.marginal_variance_exact().unwrap();
        for i in 0..6 {
            assert!((var[i] - cov[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampler_moments() {
        let p = dense_problem(3, 2, 3, false);
        let y = [0.4, -1.0];
        let post = exact_posterior_with(
            &p.prior,
            Arc::new(DenseMap::new(p.a.clone())),
            Arc::new(DenseCovariance::new(p.g.clone()).unwrap()),
            &y,
            1e-14,
            100,
        )
        .unwrap();
        let var = post.marginal_variance_exact().unwrap();
        let mut rng = RngStream::new(4, 0);
        let n = 20_000;
        let mut acc = vec![0.0; 3];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(post.sample(&mut rng).unwrap()) {
                *a += v / n as f64;
            }
        }
        for i in 0..3 {
            assert!((acc[i] - post.mean[i]).abs() < 4.0 * (var[i] / n as f64).sqrt());
        }
    }
}
