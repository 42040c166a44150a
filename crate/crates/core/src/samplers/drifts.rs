//! Drift assemblers for the five sampling methods.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::em::Drift;
use crate::error::{Error, Result};
use crate::gauss::{cg_solve, default_max_iter, SharedCov};
use crate::linop::{norm, SharedMap};
use crate::scores::{PriorScoreModel, ScoreModel};
use crate::ucos::UCoSOperators;

/// UCoS: `s = λ(τ)(r(ξ_τ(x), τ) - e^{τ/2} x)`; the measurement enters only
/// through the shift cached in `ops`.
pub struct UCoSDrift {
    ops: UCoSOperators,
    r_model: Arc<dyn ScoreModel>,
}

impl UCoSDrift {
    pub fn new(ops: UCoSOperators, r_model: Arc<dyn ScoreModel>) -> Result<Self> {
        if ops.measurement().is_none() {
            return Err(Error::MissingShift);
        }
        Ok(Self { ops, r_model })
    }
}

impl Drift for UCoSDrift {
    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.ops.conditional_score(tau, x, self.r_model.as_ref())
    }

    fn name(&self) -> String {
        format!("ucos[{}]", self.r_model.name())
    }
}

/// Conditional: a score model of the posterior-initialized diffusion used
/// as-is.
pub struct ConditionalDrift {
    score: Arc<dyn PriorScoreModel>,
}

impl ConditionalDrift {
    pub fn new(score: Arc<dyn PriorScoreModel>) -> Self {
        Self { score }
    }
}

impl Drift for ConditionalDrift {
    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.score.evaluate(x, tau)
    }

    fn name(&self) -> String {
        format!("conditional[{}]", self.score.name())
    }
}

/// How SDE ALD picks `γ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaRule {
    /// Bisect until the guidance norm matches the prior-score norm within
    /// the relative band.
    EqualNorm { band: f64 },
    Fixed { gamma: f64 },
}

impl Default for GammaRule {
    fn default() -> Self {
        GammaRule::EqualNorm { band: 0.05 }
    }
}

const BISECTION_ITERS: usize = 40;

/// Log-space bisection for `γ ∈ [1e-6 σ², 1e6 σ²]` with
/// `norm_at(γ) = target` (`norm_at` decreasing). `None` if the band is
/// never reached.
pub fn bisect_gamma(sigma2: f64, target: f64, band: f64, norm_at: impl Fn(f64) -> f64) -> Option<f64> {
    let (mut lo, mut hi) = ((1e-6 * sigma2).ln(), (1e6 * sigma2).ln());
    let ok = |g: f64| (norm_at(g) / target - 1.0).abs() <= band;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let g = mid.exp();
        if ok(g) {
            return Some(g);
        }
        if norm_at(g) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g = (0.5 * (lo + hi)).exp();
    ok(g).then_some(g)
}

/// SDE ALD: `s(x, τ) + 𝒞 A* (σ² + γ)⁻¹ (y - A x)`.
pub struct SdeAldDrift {
    a: SharedMap,
    c: SharedCov,
    sigma2: f64,
    y: Vec<f64>,
    prior: Arc<dyn PriorScoreModel>,
    rule: GammaRule,
    fallbacks: AtomicU64,
}

impl SdeAldDrift {
    pub fn new(ops: &UCoSOperators, y: Vec<f64>, prior: Arc<dyn PriorScoreModel>, rule: GammaRule) -> Result<Self> {
        let sigma2 = ops.noise().diagonal().and_then(|d| {
            let s = d[0];
            d.iter().all(|&v| v == s).then_some(s)
        });
        let sigma2 = sigma2.ok_or_else(|| {
            Error::InvalidParameter("SDE ALD assumes isotropic measurement noise Γ = σ² I".into())
        })?;
        if y.len() != ops.m() {
            return Err(Error::Dimension(format!("measurement length {} vs codomain {}", y.len(), ops.m())));
        }
        match rule {
            GammaRule::EqualNorm { band } if !(band > 0.0) => {
                return Err(Error::InvalidParameter(format!("γ band must be positive, got {band}")))
            }
            GammaRule::Fixed { gamma } if !(gamma >= 0.0) => {
                return Err(Error::InvalidParameter(format!("γ must be non-negative, got {gamma}")))
            }
            _ => {}
        }
        Ok(Self { a: ops.forward().clone(), c: ops.noising().clone(), sigma2, y, prior, rule, fallbacks: AtomicU64::new(0) })
    }

    /// Steps where bisection missed the band and `γ = σ²` was used.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn gamma(&self, guidance_norm_unit: f64, score_norm: f64) -> f64 {
        match self.rule {
            GammaRule::Fixed { gamma } => gamma,
            GammaRule::EqualNorm { band } => {
                let found = if score_norm > 0.0 {
                    bisect_gamma(self.sigma2, score_norm, band, |g| guidance_norm_unit / (self.sigma2 + g))
                } else {
                    None
                };
                found.unwrap_or_else(|| {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                    self.sigma2
                })
            }
        }
    }
}

impl Drift for SdeAldDrift {
    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let mut s = self.prior.evaluate(x, tau)?;
        let ax = self.a.apply(x);
        let resid: Vec<f64> = self.y.iter().zip(&ax).map(|(y, a)| y - a).collect();
        let g = self.c.apply(&self.a.adjoint_apply(&resid));
        let gn = norm(&g);
        if gn == 0.0 {
            return Ok(s);
        }
        let k = 1.0 / (self.sigma2 + self.gamma(gn, norm(&s)));
        s.iter_mut().zip(&g).for_each(|(si, gi)| *si += k * gi);
        Ok(s)
    }

    fn name(&self) -> String {
        "sde_ald".into()
    }
}

/// DPS: `s - 𝒞 ρ ∇‖y - A x̂0(x)‖²` with `ρ = ξ / ‖y - A x̂0‖` and the
/// gradient through the affine denoiser taken with the score's
/// vector-Jacobian product.
pub struct DpsDrift {
    a: SharedMap,
    c: SharedCov,
    y: Vec<f64>,
    prior: Arc<dyn PriorScoreModel>,
    xi: f64,
}

impl DpsDrift {
    pub fn new(ops: &UCoSOperators, y: Vec<f64>, prior: Arc<dyn PriorScoreModel>, xi: f64) -> Result<Self> {
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::InvalidParameter(format!("DPS step ξ must be non-negative, got {xi}")));
        }
        if y.len() != ops.m() {
            return Err(Error::Dimension(format!("measurement length {} vs codomain {}", y.len(), ops.m())));
        }
        Ok(Self { a: ops.forward().clone(), c: ops.noising().clone(), y, prior, xi })
    }

    /// Guidance term `𝒞 ρ ∇‖y - A x̂0‖²` given the prior score at `x`.
    pub fn guidance(&self, x: &[f64], tau: f64, s: &[f64]) -> Result<Vec<f64>> {
        let h = (0.5 * tau).exp();
        let k = -(-tau).exp_m1();
        let x0: Vec<f64> = x.iter().zip(s).map(|(xi, si)| h * (xi + k * si)).collect();
        let ax0 = self.a.apply(&x0);
        let r: Vec<f64> = ax0.iter().zip(&self.y).map(|(a, y)| a - y).collect();
        let rn = norm(&r);
        if rn == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let rho = self.xi / rn;
        let v = self.a.adjoint_apply(&r);
        let jv = self.prior.vjp(x, tau, &v)?;
        let grad: Vec<f64> = v.iter().zip(&jv).map(|(vi, ji)| 2.0 * rho * h * (vi + k * ji)).collect();
        Ok(self.c.apply(&grad))
    }
}

impl Drift for DpsDrift {
    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let mut s = self.prior.evaluate(x, tau)?;
        let g = self.guidance(x, tau, &s)?;
        s.iter_mut().zip(&g).for_each(|(si, gi)| *si -= gi);
        Ok(s)
    }

    fn name(&self) -> String {
        "dps".into()
    }
}

/// Data-consistency step `(λ A*A + (1-λ) I)⁻¹ ((1-λ) x' + λ A* y_t)` by CG.
///
/// `aty_t` is `A* y_t`. For `λ = 1` the system is singular; the solve then
/// starts from `x'`, so components in the null space of `A` are kept (one
/// extra application of `A*A`). Returns the new state and the CG iteration
/// count.
pub fn proj_step(a: &dyn crate::linop::LinearMap, x_prime: &[f64], aty_t: &[f64], lambda: f64, cg_tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("λ must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok((x_prime.to_vec(), 0));
    }
    let op = |v: &[f64]| -> Vec<f64> {
        let ata = a.adjoint_apply(&a.apply(v));
        v.iter().zip(&ata).map(|(vi, ai)| lambda * ai + (1.0 - lambda) * vi).collect()
    };
    let rhs: Vec<f64> = x_prime.iter().zip(aty_t).map(|(x, b)| (1.0 - lambda) * x + lambda * b).collect();
    if lambda < 1.0 {
        let sol = cg_solve(op, &rhs, cg_tol, max_iter, None)?;
        let it = sol.iterations;
        return Ok((sol.into_result()?, it));
    }
    let mx = op(x_prime);
    let r: Vec<f64> = rhs.iter().zip(&mx).map(|(b, m)| b - m).collect();
    let sol = cg_solve(op, &r, cg_tol, max_iter, None)?;
    let it = sol.iterations;
    let d = sol.into_result()?;
    Ok((x_prime.iter().zip(&d).map(|(x, di)| x + di).collect(), it))
}

/// Proj: prior-score drift preceded by a data-consistency step toward
/// `y_t = e^{-τ/2} y`.
pub struct ProjDrift {
    a: SharedMap,
    aty: Vec<f64>,
    prior: Arc<dyn PriorScoreModel>,
    lambda: f64,
    cg_tol: f64,
    max_iter: usize,
    cg_iterations: AtomicU64,
}

impl ProjDrift {
    /// Precomputes `A* y` (one adjoint application per measurement).
    pub fn new(ops: &UCoSOperators, y: &[f64], prior: Arc<dyn PriorScoreModel>, lambda: f64, cg_tol: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!("λ must lie in [0, 1], got {lambda}")));
        }
        if !(cg_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("CG tolerance must be positive, got {cg_tol}")));
        }
        if y.len() != ops.m() {
            return Err(Error::Dimension(format!("measurement length {} vs codomain {}", y.len(), ops.m())));
        }
        let aty = ops.forward().adjoint_apply(y);
        Ok(Self {
            a: ops.forward().clone(),
            aty,
            prior,
            lambda,
            cg_tol,
            max_iter: default_max_iter(ops.n()),
            cg_iterations: AtomicU64::new(0),
        })
    }

    /// Total CG iterations spent in data-consistency steps.
    pub fn cg_iterations(&self) -> u64 {
        self.cg_iterations.load(Ordering::Relaxed)
    }
}

impl Drift for ProjDrift {
    fn pre_step(&self, x: Vec<f64>, tau: f64) -> Result<Vec<f64>> {
        let h = (-0.5 * tau).exp();
        let aty_t: Vec<f64> = self.aty.iter().map(|v| h * v).collect();
        let (x, it) = proj_step(self.a.as_ref(), &x, &aty_t, self.lambda, self.cg_tol, self.max_iter)?;
        self.cg_iterations.fetch_add(it as u64, Ordering::Relaxed);
        Ok(x)
    }

    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.prior.evaluate(x, tau)
    }

    fn name(&self) -> String {
        "proj".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{DenseCovariance, DiagonalCovariance, RngStream};
    use crate::linop::{CountingMap, DenseMap, GridShape, LinearMap, MaskOperator};
    use crate::scores::testutil::dense_problem;
    use crate::scores::{gaussian_conditional_score_exact, GaussianPrior, GaussianPriorScore, GaussianTaskScore};
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn ucos_drift_matches_exact_conditional_score() {
        let p = dense_problem(6, 3, 21, false);
        let mut rng = RngStream::new(2, 0);
        let y = rng.normals(3);
        let ops = p.ops.with_measurement(&y, &p.prior.mean).unwrap();
        let r = Arc::new(GaussianTaskScore::new(&ops, p.prior.clone()).unwrap().with_cg(1e-14, 500));
        let drift = UCoSDrift::new(ops.clone(), r).unwrap();
        let exact = gaussian_conditional_score_exact(&ops, &p.prior, &y).unwrap().with_cg(1e-14, 500);
        for tau in [0.01, 0.3, 4.0] {
            let x = rng.normals(6);
            let a = DVector::from_vec(drift.score(&x, tau).unwrap());
            let b = DVector::from_vec(exact.evaluate(&x, tau).unwrap());
            assert!((&a - &b).norm() < 1e-6 * b.norm(), "τ {tau}: {}", (&a - &b).norm() / b.norm());
        }
    }

    #[test]
    fn ucos_needs_shift() {
        let p = dense_problem(4, 2, 1, true);
        let r = Arc::new(GaussianTaskScore::new(&p.ops, p.prior.clone()).unwrap());
        assert!(matches!(UCoSDrift::new(p.ops.clone(), r), Err(Error::MissingShift)));
    }

    fn isotropic_ops(n: usize, m: usize, seed: u64) -> (UCoSOperators, Arc<CountingMap>, GaussianPrior) {
        let mut rng = RngStream::new(seed, 0);
        let a = DMatrix::from_vec(m, n, rng.normals(n * m));
        let counted = Arc::new(CountingMap::new(Arc::new(DenseMap::new(a))));
        let c = Arc::new(DiagonalCovariance::isotropic(n, 1.0).unwrap());
        let ops = UCoSOperators::new(counted.clone(), c.clone(), Arc::new(DiagonalCovariance::isotropic(m, 0.01).unwrap())).unwrap();
        (ops, counted, GaussianPrior::centered(c))
    }

    #[test]
    fn sde_ald_consistent_data_leaves_prior_score() {
        let (ops, _, prior) = isotropic_ops(5, 3, 4);
        let x = RngStream::new(5, 0).normals(5);
        let y = ops.forward().apply(&x);
        let ps = Arc::new(GaussianPriorScore::new(prior, ops.noising().clone()));
        let d = SdeAldDrift::new(&ops, y, ps.clone(), GammaRule::default()).unwrap();
        assert_eq!(d.score(&x, 0.4).unwrap(), ps.evaluate(&x, 0.4).unwrap());
    }

    #[test]
    fn sde_ald_equal_norm_and_limits() {
        let (ops, counted, prior) = isotropic_ops(5, 3, 6);
        let mut rng = RngStream::new(7, 0);
        let y = rng.normals(3);
        let x = rng.normals(5);
        let ps = Arc::new(GaussianPriorScore::new(prior, ops.noising().clone()));
        let d = SdeAldDrift::new(&ops, y.clone(), ps.clone(), GammaRule::default()).unwrap();
        counted.counter().reset();
        let s = ps.evaluate(&x, 0.4).unwrap();
        let drift = d.score(&x, 0.4).unwrap();
        assert_eq!((counted.counter().forward(), counted.counter().adjoint()), (1, 1));
        let g: Vec<f64> = drift.iter().zip(&s).map(|(a, b)| a - b).collect();
        let ratio = norm(&g) / norm(&s);
        if d.fallbacks() == 0 {
            assert!((ratio - 1.0).abs() <= 0.05, "{ratio}");
        }
        let big = SdeAldDrift::new(&ops, y, ps.clone(), GammaRule::Fixed { gamma: 1e12 }).unwrap();
        let far = big.score(&x, 0.4).unwrap();
        assert!(far.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn bisection_brackets_and_fails_gracefully() {
        let g = bisect_gamma(0.01, 2.0, 0.05, |g| 1.0 / (0.01 + g)).unwrap();
        assert!(((1.0 / (0.01 + g)) / 2.0 - 1.0).abs() <= 0.05);
        // Target above the reachable maximum.
        assert!(bisect_gamma(0.01, 1e9, 0.05, |g| 1.0 / (0.01 + g)).is_none());
    }

    #[test]
    fn sde_ald_rejects_anisotropic_noise() {
        let p = dense_problem(4, 2, 1, true);
        let ps = Arc::new(GaussianPriorScore::new(p.prior.clone(), p.ops.noising().clone()));
        assert!(SdeAldDrift::new(&p.ops, vec![0.0; 2], ps, GammaRule::default()).is_err());
    }

    #[test]
    fn dps_scalar_hand_derivation() {
        // n = m = 1, A = a, 𝒞 = c, S0 = s0, m0 = 0. Prior score
        // s = -g x with g = c / (e^{-τ} s0 + (1-e^{-τ}) c); x̂0 = e^{τ/2}(1 - k g) x,
        // k = 1 - e^{-τ}. Guidance = c ρ 2 e^{τ/2}(1 - k g) a (a x̂0 - y).
        let (a, c, s0, y, xi, tau, x) = (1.7, 0.8, 1.3, 0.4, 0.3, 0.6f64, 0.9);
        let ops = UCoSOperators::new(
            Arc::new(DenseMap::new(DMatrix::from_element(1, 1, a))),
            Arc::new(DiagonalCovariance::new(vec![c]).unwrap()),
            Arc::new(DiagonalCovariance::new(vec![0.1]).unwrap()),
        )
        .unwrap();
        let prior = GaussianPrior::centered(Arc::new(DenseCovariance::new(DMatrix::from_element(1, 1, s0)).unwrap()));
        let ps = Arc::new(GaussianPriorScore::new(prior, ops.noising().clone()).with_cg(1e-14, 10));
        let d = DpsDrift::new(&ops, vec![y], ps, xi).unwrap();
        let k = -(-tau).exp_m1();
        let g = c / ((-tau).exp() * s0 + k * c);
        let x0 = (0.5 * tau).exp() * (1.0 - k * g) * x;
        let r = a * x0 - y;
        let guidance = c * (xi / r.abs()) * 2.0 * (0.5 * tau).exp() * (1.0 - k * g) * a * r;
        let want = -g * x - guidance;
        let got = d.score(&[x], tau).unwrap()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dps_consistent_data_no_guidance() {
        let (ops, counted, prior) = isotropic_ops(4, 2, 9);
        let ps = Arc::new(GaussianPriorScore::new(prior, ops.noising().clone()));
        let x = RngStream::new(1, 0).normals(4);
        let tau = 0.5;
        let x0 = crate::scores::x0_hat(ps.as_ref(), &x, tau).unwrap();
        let y = ops.forward().apply(&x0);
        let d = DpsDrift::new(&ops, y, ps.clone(), 1.0).unwrap();
        counted.counter().reset();
        let s = d.score(&x, tau).unwrap();
        let want = ps.evaluate(&x, tau).unwrap();
        assert!(s.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(counted.counter().forward(), 1);
    }

    #[test]
    fn proj_limits() {
        let shape = GridShape::new(2, 2).unwrap();
        let mask = MaskOperator::new(shape, vec![true, false, false, true]).unwrap();
        let xp = [1.0, 2.0, 3.0, 4.0];
        let aty = mask.adjoint_apply(&[10.0, 0.0, 0.0, 40.0]);
        assert_eq!(proj_step(&mask, &xp, &aty, 0.0, 1e-12, 10).unwrap().0, xp.to_vec());
        let (x, _) = proj_step(&mask, &xp, &aty, 1.0, 1e-12, 10).unwrap();
        let want = [10.0, 2.0, 3.0, 40.0];
        assert!(x.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), "{x:?}");
        // Intermediate λ: pixelwise convex combination on the support.
        let (x, _) = proj_step(&mask, &xp, &aty, 0.25, 1e-12, 10).unwrap();
        assert!((x[0] - (0.75 * 1.0 + 0.25 * 10.0)).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        assert!(proj_step(&mask, &xp, &aty, 1.5, 1e-12, 10).is_err());
    }

    #[test]
    fn proj_counts_two_per_cg_iteration() {
        let (ops, counted, prior) = isotropic_ops(6, 4, 10);
        let y = RngStream::new(2, 0).normals(4);
        let ps = Arc::new(GaussianPriorScore::new(prior, ops.noising().clone()));
        let d = ProjDrift::new(&ops, &y, ps, 0.5, 1e-10).unwrap();
        counted.counter().reset();
        let x = d.pre_step(RngStream::new(3, 0).normals(6), 0.3).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        let it = d.cg_iterations();
        assert!(it > 0);
        assert_eq!(counted.counter().forward(), it);
        assert_eq!(counted.counter().adjoint(), it);
    }
}
