use std::sync::Arc;

use super::{proportionality, GaussianPrior, ModalBasis, ModalOptions, ScoreModel};
use crate::error::{Error, Result};
use crate::gauss::{cg_solve, default_max_iter, SharedCov, DEFAULT_CG_TOL};
use crate::linop::SharedMap;
use crate::ucos::{expm1, UCoSOperators};

/// How the Gaussian task score inverts `M_t`.
#[derive(Clone)]
pub enum TaskBackend {
    /// Whitened CG, one `A` and one `A*` per iteration.
    Cg,
    /// Precomputed eigenbasis of the whitened data term; no operator calls
    /// per evaluation. Needs `𝒞 = κ S0`.
    Modal(Arc<ModalBasis>),
}

/// Closed-form task-dependent score of a Gaussian prior `N(m0, S0)`:
/// `r(ζ, t) = M_t⁻¹ (𝒞⁻¹ ζ + S0⁻¹ m0)`,
/// `M_t = (e^t - 1)⁻¹ 𝒞⁻¹ + A* Γ⁻¹ A + S0⁻¹`.
///
/// The mean term is what makes `r` the task score of the uncentered prior;
/// for `m0 = 0` this is the familiar `M_t⁻¹ 𝒞⁻¹ ζ`.
#[derive(Clone)]
pub struct GaussianTaskScore {
    a: SharedMap,
    c: SharedCov,
    gamma: SharedCov,
    prior: GaussianPrior,
    backend: TaskBackend,
    // 𝒞^{1/2} S0⁻¹ m0, the whitened mean term.
    mean_term: Vec<f64>,
    cg_tol: f64,
    cg_max_iter: usize,
}

impl GaussianTaskScore {
    pub fn new(ops: &UCoSOperators, prior: GaussianPrior) -> Result<Self> {
        if prior.dim() != ops.n() {
            return Err(Error::Dimension(format!(
                "prior acts on R^{} but the operators on R^{}",
                prior.dim(),
                ops.n()
            )));
        }
        let c = ops.noising().clone();
        let mean_term = if prior.is_centered() {
            vec![0.0; prior.dim()]
        } else {
            c.sqrt_apply(&prior.cov.solve(&prior.mean))
        };
        let n = ops.n();
        Ok(Self {
            a: ops.forward().clone(),
            c,
            gamma: ops.noise().clone(),
            prior,
            backend: TaskBackend::Cg,
            mean_term,
            cg_tol: DEFAULT_CG_TOL.min(ops.cg_tol()),
            cg_max_iter: default_max_iter(n).max(ops.cg_max_iter()),
        })
    }

    /// Same model with the eigenbasis backend. Fails unless the prior
    /// covariance is a constant multiple of 𝒞 on a shared Fourier grid.
    pub fn modal(ops: &UCoSOperators, prior: GaussianPrior, opts: &ModalOptions) -> Result<Self> {
        let kappa = proportionality(ops.noising().as_ref(), prior.cov.as_ref()).ok_or_else(|| {
            Error::InvalidParameter("modal backend needs a prior covariance proportional to 𝒞".into())
        })?;
        let basis = ModalBasis::build(
            ops.forward().as_ref(),
            ops.noise().as_ref(),
            ops.noising().clone(),
            kappa,
            opts,
        )?;
        Self::new(ops, prior).map(|s| s.with_basis(Arc::new(basis)))
    }

    pub fn with_basis(mut self, basis: Arc<ModalBasis>) -> Self {
        self.backend = TaskBackend::Modal(basis);
        self
    }

    pub fn with_cg(mut self, tol: f64, max_iter: usize) -> Self {
        self.cg_tol = tol;
        self.cg_max_iter = max_iter;
        self
    }

    pub fn backend(&self) -> &TaskBackend {
        &self.backend
    }

    pub fn basis(&self) -> Option<&Arc<ModalBasis>> {
        match &self.backend {
            TaskBackend::Modal(b) => Some(b),
            TaskBackend::Cg => None,
        }
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    // Spectral diagonal of 𝒞^{1/2} S0⁻¹ 𝒞^{1/2}, when available.
    fn prior_ratio(&self) -> Option<Vec<f64>> {
        let c = self.c.as_spectral()?;
        let s = self.prior.cov.as_spectral()?;
        c.same_grid(s)
            .then(|| c.half_spectrum().iter().zip(s.half_spectrum()).map(|(a, b)| a / b).collect())
    }

    // u ↦ N_t u with N_t = c0 I + 𝒞^{1/2} S0⁻¹ 𝒞^{1/2} + 𝒞^{1/2} A*Γ⁻¹A 𝒞^{1/2}.
    fn whitened_action(&self, c0: f64, u: &[f64]) -> Vec<f64> {
        let cu = self.c.sqrt_apply(u);
        let mut inner = self.a.adjoint_apply(&self.gamma.solve(&self.a.apply(&cu)));
        for (d, p) in inner.iter_mut().zip(self.prior.cov.solve(&cu)) {
            *d += p;
        }
        let mut out = self.c.sqrt_apply(&inner);
        for (o, ui) in out.iter_mut().zip(u) {
            *o += c0 * ui;
        }
        out
    }

    fn evaluate_cg(&self, zeta: &[f64], t: f64) -> Result<Vec<f64>> {
        let c0 = 1.0 / expm1(t);
        if let Some(ratio) = self.prior_ratio() {
            return self.evaluate_split(zeta, c0, &ratio);
        }
        let mut rhs = self.c.inv_sqrt_apply(zeta);
        for (r, m) in rhs.iter_mut().zip(&self.mean_term) {
            *r += m;
        }
        let sol = cg_solve(|u| self.whitened_action(c0, u), &rhs, self.cg_tol, self.cg_max_iter, None)?;
        Ok(self.c.sqrt_apply(&sol.into_result()?))
    }

    // Spectral prior: r solves L r = b with L = D + 𝒞 A*Γ⁻¹A, where
    // D = c0 I + 𝒞^{1/2} S0⁻¹ 𝒞^{1/2} is diagonal in Fourier and
    // b = ζ + 𝒞 S0⁻¹ m0. Nothing here multiplies by 𝒞^{-1/2}, whose
    // jitter-floored spectrum would amplify round-off by orders of magnitude.
    fn evaluate_split(&self, zeta: &[f64], c0: f64, ratio: &[f64]) -> Result<Vec<f64>> {
        let spec = self.c.as_spectral().expect("checked by prior_ratio");
        let d: Vec<f64> = ratio.iter().map(|q| c0 + q).collect();
        let d_inv: Vec<f64> = d.iter().map(|q| 1.0 / q).collect();
        let mut b = zeta.to_vec();
        if !self.prior.is_centered() {
            for (v, m) in b.iter_mut().zip(spec.apply_multiplier(&self.prior.mean, ratio)) {
                *v += m;
            }
        }
        let data = |v: &[f64]| self.a.adjoint_apply(&self.gamma.solve(&self.a.apply(v)));
        // N = D + 𝒞^{1/2} A*Γ⁻¹A 𝒞^{1/2}
        let action = |u: &[f64]| {
            let mut out = spec.apply_multiplier(u, &d);
            for (o, v) in out.iter_mut().zip(self.c.sqrt_apply(&data(&self.c.sqrt_apply(u)))) {
                *o += v;
            }
            out
        };
        let pre = |r: &[f64]| spec.apply_multiplier(r, &d_inv);
        // L⁻¹ v = D⁻¹ v - 𝒞^{1/2} N⁻¹ 𝒞^{1/2} A*Γ⁻¹A D⁻¹ v
        let solve = |v: &[f64]| -> Result<Vec<f64>> {
            let r0 = spec.apply_multiplier(v, &d_inv);
            let rhs = self.c.sqrt_apply(&data(&r0));
            let sol = cg_solve(action, &rhs, self.cg_tol, self.cg_max_iter, Some(&pre))?;
            let corr = self.c.sqrt_apply(&sol.into_result()?);
            Ok(r0.iter().zip(&corr).map(|(a, b)| a - b).collect())
        };
        let mut r = solve(&b)?;
        // The subtraction above cancels heavily when the data dominate
        // (small Γ, large ‖A‖); refine against L directly.
        let b_norm = norm(&b);
        for _ in 0..REFINE_STEPS {
            let lr = spec.apply_multiplier(&r, &d);
            let cr = self.c.apply(&data(&r));
            let res: Vec<f64> = b.iter().zip(lr.iter().zip(&cr)).map(|(bi, (p, q))| bi - p - q).collect();
            if norm(&res) <= self.cg_tol * b_norm {
                break;
            }
            for (ri, di) in r.iter_mut().zip(solve(&res)?) {
                *ri += di;
            }
        }
        Ok(r)
    }
}

const REFINE_STEPS: usize = 3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ScoreModel for GaussianTaskScore {
    fn evaluate(&self, zeta: &[f64], t: f64) -> Result<Vec<f64>> {
        if zeta.len() != self.prior.dim() {
            return Err(Error::Dimension(format!(
                "task score input has length {}, expected {}",
                zeta.len(),
                self.prior.dim()
            )));
        }
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(format!("task score needs t > 0, got {t}")));
        }
        match &self.backend {
            TaskBackend::Cg => self.evaluate_cg(zeta, t),
            TaskBackend::Modal(basis) => {
                let kappa = basis.kappa();
                let z: Vec<f64> = zeta.iter().zip(&self.prior.mean).map(|(a, m)| a + kappa * m).collect();
                Ok(basis.task_score(&z, 1.0 / expm1(t) + kappa))
            }
        }
    }

    fn name(&self) -> String {
        "gaussian-task".into()
    }

    fn describe(&self) -> String {
        match &self.backend {
            TaskBackend::Cg => format!("gaussian-task (cg, tol {:e})", self.cg_tol),
            TaskBackend::Modal(b) => format!(
                "gaussian-task (modal, rank {}, threshold {:.2e}, residual {:.2e})",
                b.rank(),
                b.threshold(),
                b.residual_norm()
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{sq_exp_covariance, DiagonalCovariance, RngStream};
    use crate::linop::{center_hole_mask, GridShape, MaskOperator, ZeroMap};
    use crate::scores::testutil::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn no_data_same_covariance_is_scalar() {
        let shape = GridShape::new(8, 8).unwrap();
        let c: SharedCov = Arc::new(sq_exp_covariance(shape, 0.2, 1.0).unwrap());
        let ops = UCoSOperators::new(
            Arc::new(ZeroMap::new(64, 64)),
            c.clone(),
            Arc::new(DiagonalCovariance::isotropic(64, 1.0).unwrap()),
        )
        .unwrap();
        let r = GaussianTaskScore::new(&ops, GaussianPrior::centered(c)).unwrap().with_cg(1e-13, 200);
        let zeta = RngStream::new(1, 0).normals(64);
        for t in [0.01, 0.5, 3.0] {
            let got = r.evaluate(&zeta, t).unwrap();
            let f = 1.0 / (1.0 / expm1(t) + 1.0);
            for (g, z) in got.iter().zip(&zeta) {
                assert!((g - f * z).abs() < 1e-9 * (1.0 + z.abs()), "t = {t}: {g} vs {}", f * z);
            }
        }
    }

    // r(R_t⁻¹ z) - z = s̃(z) = -Σ_t (Σ_t + S0)⁻¹ z for a centered prior.
    #[test]
    fn matches_task_process_score_densely() {
        for seed in 0..4 {
            let p = dense_problem(6, 3, seed, true);
            let r = GaussianTaskScore::new(&p.ops, p.prior.clone()).unwrap().with_cg(1e-14, 500);
            let z = DVector::from_vec(RngStream::new(seed, 9).normals(6));
            for t in [0.05, 0.7, 2.5] {
                let e = expm1(t);
                let ct = &p.a * &p.c * p.a.transpose() * e + &p.g;
                let ct_inv = ct.try_inverse().unwrap();
                let sigma = &p.c * e - &p.c * p.a.transpose() * &ct_inv * &p.a * &p.c * (e * e);
                let rt = DMatrix::identity(6, 6) * e - &p.c * p.a.transpose() * &ct_inv * &p.a * (e * e);
                let zeta = rt.clone().try_inverse().unwrap() * &z;
                let lhs = DVector::from_vec(r.evaluate(zeta.as_slice(), t).unwrap()) - &z;
                let rhs = -(&sigma * (&sigma + &p.s0).try_inverse().unwrap() * &z);
                let err = (&lhs - &rhs).norm() / rhs.norm();
                assert!(err < 1e-8, "seed {seed}, t {t}: {err}");
            }
        }
    }

    #[test]
    fn uncentered_prior_closed_form() {
        let p = dense_problem(5, 2, 11, false);
        let r = GaussianTaskScore::new(&p.ops, p.prior.clone()).unwrap().with_cg(1e-14, 500);
        let zeta = DVector::from_vec(RngStream::new(3, 3).normals(5));
        let t = 0.4;
        let ginv = p.g.clone().try_inverse().unwrap();
        let s0inv = p.s0.clone().try_inverse().unwrap();
        let cinv = p.c.clone().try_inverse().unwrap();
        let m = &cinv / expm1(t) + p.a.transpose() * &ginv * &p.a + &s0inv;
        let expected = m.lu().solve(&(&cinv * &zeta + &s0inv * &p.m0)).unwrap();
        let got = DVector::from_vec(r.evaluate(zeta.as_slice(), t).unwrap());
        assert!((got - &expected).norm() / expected.norm() < 1e-9);
    }

    #[test]
    fn modal_backend_matches_cg() {
        let shape = GridShape::new(16, 16).unwrap();
        let a = Arc::new(MaskOperator::new(shape, center_hole_mask(shape, 6)).unwrap());
        let c: SharedCov = Arc::new(sq_exp_covariance(shape, 0.15, 1.0).unwrap());
        let s0: SharedCov = Arc::new(sq_exp_covariance(shape, 0.15, 0.5).unwrap());
        let ops = UCoSOperators::new(a, c.clone(), Arc::new(DiagonalCovariance::isotropic(256, 0.0025).unwrap()))
            .unwrap();
        let mut rng = RngStream::new(5, 1);
        let prior = GaussianPrior::new(s0.sqrt_apply(&rng.normals(256)), s0).unwrap();
        let cg = GaussianTaskScore::new(&ops, prior.clone()).unwrap().with_cg(1e-12, 2000);
        let modal = GaussianTaskScore::modal(&ops, prior, &ModalOptions::default()).unwrap();
        let zeta = c.sqrt_apply(&rng.normals(256));
        for t in [5e-3, 0.2, 5.0] {
            let a = cg.evaluate(&zeta, t).unwrap();
            let b = modal.evaluate(&zeta, t).unwrap();
            let err = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
                / a.iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(err < 1e-4, "t = {t}: {err}");
        }
    }

    #[test]
    fn modal_needs_proportional_prior() {
        let p = dense_problem(4, 2, 1, true);
        assert!(GaussianTaskScore::modal(&p.ops, p.prior.clone(), &ModalOptions::default()).is_err());
    }
}
