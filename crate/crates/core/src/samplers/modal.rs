//! Reverse sampling in the eigenbasis of `K = 𝒞^{1/2} A* Γ⁻¹ A 𝒞^{1/2}`.
//!
//! When `𝒞 = κ S0`, the UCoS and Conditional drifts of a Gaussian problem
//! are diagonal in whitened coordinates `w = 𝒞^{-1/2} x`: each retained mode
//! evolves as a scalar linear SDE and the complement as one shared scalar
//! SDE. The Euler–Maruyama chain is then a linear Gaussian recursion, and
//! its output law can be computed exactly and sampled directly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::em::initial_scale;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gauss::RngStream;
use crate::scores::{ModalBasis, PriorScoreModel};
use crate::ucos::{expm1, lambda_weight, UCoSOperators};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalKind {
    Ucos,
    Conditional,
}

/// Whitened drift of one mode with `K`-eigenvalue `mu`: `slope · w + offset · b`.
pub fn mode_coefficients(kind: ModalKind, kappa: f64, mu: f64, tau: f64) -> Result<(f64, f64)> {
    match kind {
        ModalKind::Ucos => {
            let lam = lambda_weight(tau)?;
            let g = 1.0 / (1.0 / expm1(tau) + kappa + mu);
            Ok((lam * (lam * g - (0.5 * tau).exp()), lam * g))
        }
        ModalKind::Conditional => {
            if !(tau > 0.0) {
                return Err(Error::InvalidParameter(format!("time must be positive, got {tau}")));
            }
            let e = (-tau).exp();
            let slope = -1.0 / (e / (kappa + mu) - (-tau).exp_m1());
            Ok((slope, -slope * (-0.5 * tau).exp() / (kappa + mu)))
        }
    }
}

/// `b = 𝒞^{1/2} A* Γ⁻¹ y + κ 𝒞^{-1/2} m0`, the whitened data vector. Uses the
/// cached `A* Γ⁻¹ y`, so no operator calls.
pub fn whitened_data(ops: &UCoSOperators, kappa: f64, prior_mean: &[f64]) -> Result<Vec<f64>> {
    let meas = ops.measurement().ok_or(Error::MissingShift)?;
    let mut b = ops.noising().sqrt_apply(&meas.data_adjoint);
    if prior_mean.iter().any(|&v| v != 0.0) {
        let m = ops.noising().inv_sqrt_apply(prior_mean);
        b.iter_mut().zip(&m).for_each(|(bi, mi)| *bi += kappa * mi);
    }
    Ok(b)
}

/// Per-mode law of the discretized chain's output: `a_i ~ N(gain_i b_i, var_i)`.
#[derive(Debug, Clone)]
pub struct ModalLaw {
    pub gain: Vec<f64>,
    pub var: Vec<f64>,
    pub perp_gain: f64,
    pub perp_var: f64,
}

/// See [`ModalEngine::discrepancy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LawDiscrepancy {
    /// Squared distance between the means.
    pub mean_sq: f64,
    /// Sum of absolute per-mode variance differences.
    pub var_l1: f64,
    /// `tr Cov(chain) - tr Cov(posterior)`.
    pub trace_excess: f64,
}

impl LawDiscrepancy {
    /// `mean_sq + var_l1`: zero iff the laws agree, and first order in
    /// perturbations of either the mean error or the variances.
    pub fn total(&self) -> f64 {
        self.mean_sq + self.var_l1
    }
}

pub struct ModalEngine {
    basis: Arc<ModalBasis>,
    kind: ModalKind,
    sched: Schedule,
    b: Vec<f64>,
    b_modes: Vec<f64>,
    law: ModalLaw,
}

impl ModalEngine {
    pub fn new(basis: Arc<ModalBasis>, kind: ModalKind, ops: &UCoSOperators, prior_mean: &[f64], sched: Schedule) -> Result<Self> {
        sched.validate()?;
        if basis.dim() != ops.n() || prior_mean.len() != ops.n() {
            return Err(Error::Dimension("modal basis, operators and prior mean disagree".into()));
        }
        let b = whitened_data(ops, basis.kappa(), prior_mean)?;
        let b_modes = basis.coefficients(&b);
        let law = Self::compute_law(&basis, kind, &sched)?;
        Ok(Self { basis, kind, sched, b, b_modes, law })
    }

    fn steps(sched: &Schedule) -> impl Iterator<Item = (f64, f64)> + '_ {
        let grid = sched.grid();
        (0..sched.n_steps).map(move |k| {
            let t = grid[sched.n_steps - k];
            let h = t - grid[sched.n_steps - k - 1];
            (sched.tau(t), h * sched.beta(t))
        })
    }

    fn compute_law(basis: &ModalBasis, kind: ModalKind, sched: &Schedule) -> Result<ModalLaw> {
        let v0 = initial_scale(sched).powi(2);
        let r = basis.rank();
        let mut gain = vec![0.0; r];
        let mut var = vec![v0; r];
        let (mut pg, mut pv) = (0.0, v0);
        for (tau, hb) in Self::steps(sched) {
            for i in 0..=r {
                let mu = if i < r { basis.eigenvalues()[i] } else { 0.0 };
                let (slope, off) = mode_coefficients(kind, basis.kappa(), mu, tau)?;
                let alpha = 1.0 + hb * (0.5 + slope);
                let (g, v) = if i < r { (&mut gain[i], &mut var[i]) } else { (&mut pg, &mut pv) };
                *g = alpha * *g + hb * off;
                *v = alpha * alpha * *v + hb;
            }
        }
        Ok(ModalLaw { gain, var, perp_gain: pg, perp_var: pv })
    }

    pub fn law(&self) -> &ModalLaw {
        &self.law
    }

    pub fn kind(&self) -> ModalKind {
        self.kind
    }

    pub fn basis(&self) -> &Arc<ModalBasis> {
        &self.basis
    }

    /// Mean of the chain's output in pixel space.
    pub fn mean(&self) -> Vec<f64> {
        let a: Vec<f64> = self.law.gain.iter().zip(&self.b_modes).map(|(g, b)| g * b).collect();
        let u: Vec<f64> = self.b.iter().map(|v| self.law.perp_gain * v).collect();
        self.basis.synthesize(&a, &u)
    }

    /// Distance between the chain's output law and the exact posterior,
    /// in whitened coordinates where the posterior is `N(b/(κ+μ), 1/(κ+μ))`
    /// mode by mode (`μ = 0` on the complement of the basis).
    pub fn discrepancy(&self) -> LawDiscrepancy {
        let kappa = self.basis.kappa();
        let (mut mean_sq, mut var_l1, mut trace_excess) = (0.0, 0.0, 0.0);
        for i in 0..self.basis.rank() {
            let p = 1.0 / (kappa + self.basis.eigenvalues()[i]);
            mean_sq += ((self.law.gain[i] - p) * self.b_modes[i]).powi(2);
            var_l1 += (self.law.var[i] - p).abs();
            trace_excess += self.law.var[i] - p;
        }
        let perp_b = self.basis.project_out(&self.b);
        let perp_dim = (self.basis.dim() - self.basis.rank()) as f64;
        let p = 1.0 / kappa;
        mean_sq += (self.law.perp_gain - p).powi(2) * perp_b.iter().map(|v| v * v).sum::<f64>();
        var_l1 += perp_dim * (self.law.perp_var - p).abs();
        trace_excess += perp_dim * (self.law.perp_var - p);
        LawDiscrepancy { mean_sq, var_l1, trace_excess }
    }

    /// One draw from the chain's output law (`n` normals from `rng`).
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z = rng.normals(self.basis.dim());
        let zc = self.basis.coefficients(&z);
        let a: Vec<f64> = (0..self.basis.rank())
            .map(|i| self.law.gain[i] * self.b_modes[i] + self.law.var[i].sqrt() * zc[i])
            .collect();
        let ps = self.law.perp_var.sqrt();
        let u: Vec<f64> = self.b.iter().zip(&z).map(|(bi, zi)| self.law.perp_gain * bi + ps * zi).collect();
        self.basis.synthesize(&a, &u)
    }

    /// The Euler–Maruyama recursion stepped explicitly in whitened
    /// coordinates, consuming noise in the same order as
    /// [`super::reverse_em`]; used to cross-check the collapsed law.
    pub fn step_path(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let n = self.basis.dim();
        let r = self.basis.rank();
        let s0 = initial_scale(&self.sched);
        let mut w: Vec<f64> = rng.normals(n).into_iter().map(|v| s0 * v).collect();
        let perp_b = self.basis.project_out(&self.b);
        for (tau, hb) in Self::steps(&self.sched) {
            let a = self.basis.coefficients(&w);
            let u = self.basis.project_out(&w);
            let (ps, po) = mode_coefficients(self.kind, self.basis.kappa(), 0.0, tau)?;
            let mut da = vec![0.0; r];
            for i in 0..r {
                let (slope, off) = mode_coefficients(self.kind, self.basis.kappa(), self.basis.eigenvalues()[i], tau)?;
                da[i] = slope * a[i] + off * self.b_modes[i];
            }
            // Modal part of the score, expressed in whitened pixels.
            let sm: Vec<f64> = self.basis.synthesize_whitened(&da);
            let xi = rng.normals(n);
            let sq = hb.sqrt();
            for j in 0..n {
                let s = sm[j] + ps * u[j] + po * perp_b[j];
                w[j] += hb * (0.5 * w[j] + s) + sq * xi[j];
            }
        }
        Ok(self.basis.noising().sqrt_apply(&w))
    }
}

/// The exact Gaussian conditional score with `𝒞 = κ S0`, evaluated
/// through the modal basis (no operator calls).
pub struct ModalConditionalScore {
    basis: Arc<ModalBasis>,
    b: Vec<f64>,
    b_modes: Vec<f64>,
    perp_b: Vec<f64>,
}

impl ModalConditionalScore {
    pub fn new(basis: Arc<ModalBasis>, ops: &UCoSOperators, prior_mean: &[f64]) -> Result<Self> {
        let b = whitened_data(ops, basis.kappa(), prior_mean)?;
        let b_modes = basis.coefficients(&b);
        let perp_b = basis.project_out(&b);
        Ok(Self { basis, b, b_modes, perp_b })
    }

    pub fn whitened_data(&self) -> &[f64] {
        &self.b
    }
}

impl PriorScoreModel for ModalConditionalScore {
    fn evaluate(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        if x.len() != self.basis.dim() {
            return Err(Error::Dimension(format!("expected length {}, got {}", self.basis.dim(), x.len())));
        }
        let c = self.basis.noising();
        let w = c.inv_sqrt_apply(x);
        let a = self.basis.coefficients(&w);
        let u = self.basis.project_out(&w);
        let kind = ModalKind::Conditional;
        let mut da = vec![0.0; a.len()];
        for (i, d) in da.iter_mut().enumerate() {
            let (slope, off) = mode_coefficients(kind, self.basis.kappa(), self.basis.eigenvalues()[i], tau)?;
            *d = slope * a[i] + off * self.b_modes[i];
        }
        let (ps, po) = mode_coefficients(kind, self.basis.kappa(), 0.0, tau)?;
        let mut s = self.basis.synthesize_whitened(&da);
        for j in 0..s.len() {
            s[j] += ps * u[j] + po * self.perp_b[j];
        }
        Ok(c.sqrt_apply(&s))
    }

    fn name(&self) -> String {
        "conditional-modal".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{sq_exp_covariance, CovarianceOp, DiagonalCovariance};
    use crate::linop::{center_hole_mask, GridShape, MaskOperator};
    use crate::samplers::em::reverse_em;
    use crate::samplers::drifts::{ConditionalDrift, UCoSDrift};
    use crate::scores::{gaussian_conditional_score_exact, GaussianPrior, GaussianTaskScore, ModalOptions};

    struct Setup {
        ops: UCoSOperators,
        prior: GaussianPrior,
        basis: Arc<ModalBasis>,
        task: GaussianTaskScore,
        y: Vec<f64>,
    }

    fn setup(mean: bool) -> Setup {
        let shape = GridShape::new(12, 12).unwrap();
        let c = Arc::new(sq_exp_covariance(shape, 0.2, 1.0).unwrap());
        let mask = MaskOperator::new(shape, center_hole_mask(shape, 5)).unwrap();
        let ops = UCoSOperators::new(Arc::new(mask), c.clone(), Arc::new(DiagonalCovariance::isotropic(shape.len(), 0.01).unwrap()))
            .unwrap()
            .with_cg(1e-12, 2000);
        let mut rng = RngStream::new(31, 0);
        let m0 = if mean { c.sqrt_apply(&rng.normals(shape.len())).iter().map(|v| 0.3 * v).collect() } else { vec![0.0; shape.len()] };
        let prior = GaussianPrior::new(m0, c.clone()).unwrap();
        let truth = prior.sample(&mut rng);
        let y: Vec<f64> = ops.forward().apply(&truth).iter().map(|v| v + 0.1 * rng.normal()).collect();
        let ops = ops.with_measurement(&y, &prior.mean).unwrap();
        let task = GaussianTaskScore::modal(&ops, prior.clone(), &ModalOptions::default()).unwrap();
        let basis = task.basis().unwrap().clone();
        Setup { ops, prior, basis, task, y }
    }

    #[test]
    fn ucos_and_conditional_modes_coincide() {
        for kappa in [0.5, 1.0, 3.0] {
            for mu in [0.0, 1e-3, 2.0, 400.0] {
                for tau in [2.5e-4, 0.05, 1.0, 5.025] {
                    let u = mode_coefficients(ModalKind::Ucos, kappa, mu, tau).unwrap();
                    let c = mode_coefficients(ModalKind::Conditional, kappa, mu, tau).unwrap();
                    let scale = u.0.abs().max(1.0);
                    assert!((u.0 - c.0).abs() < 1e-9 * scale, "{kappa} {mu} {tau}: {u:?} {c:?}");
                    assert!((u.1 - c.1).abs() < 1e-9 * u.1.abs().max(1.0), "{kappa} {mu} {tau}: {u:?} {c:?}");
                }
            }
        }
    }

    #[test]
    fn modal_conditional_score_matches_posterior_route() {
        let s = setup(true);
        let modal = ModalConditionalScore::new(s.basis.clone(), &s.ops, &s.prior.mean).unwrap();
        let exact = gaussian_conditional_score_exact(&s.ops, &s.prior, &s.y).unwrap().with_cg(1e-12, 4000);
        let mut rng = RngStream::new(3, 0);
        for tau in [0.01, 0.5, 5.0] {
            let x = rng.normals(s.ops.n());
            let a = modal.evaluate(&x, tau).unwrap();
            let b = exact.evaluate(&x, tau).unwrap();
            let err = crate::linop::norm(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>()) / crate::linop::norm(&b);
            assert!(err < 1e-3, "τ {tau}: {err}");
        }
    }

    #[test]
    fn step_path_matches_generic_em() {
        let s = setup(true);
        let sched = Schedule { n_steps: 40, ..Schedule::default() };
        let r = Arc::new(s.task.clone());
        let drift = UCoSDrift::new(s.ops.clone(), r).unwrap();
        let engine = ModalEngine::new(s.basis.clone(), ModalKind::Ucos, &s.ops, &s.prior.mean, sched).unwrap();
        let a = reverse_em(&drift, &sched, s.ops.noising().as_ref(), &mut RngStream::new(5, 2)).unwrap();
        let b = engine.step_path(&mut RngStream::new(5, 2)).unwrap();
        let err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");

        let cond = ModalConditionalScore::new(s.basis.clone(), &s.ops, &s.prior.mean).unwrap();
        let cdrift = ConditionalDrift::new(Arc::new(cond));
        let ce = ModalEngine::new(s.basis.clone(), ModalKind::Conditional, &s.ops, &s.prior.mean, sched).unwrap();
        let a = reverse_em(&cdrift, &sched, s.ops.noising().as_ref(), &mut RngStream::new(6, 0)).unwrap();
        let b = ce.step_path(&mut RngStream::new(6, 0)).unwrap();
        let err = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn collapsed_law_matches_stepped_moments() {
        let s = setup(false);
        let sched = Schedule { n_steps: 30, ..Schedule::default() };
        let engine = ModalEngine::new(s.basis.clone(), ModalKind::Ucos, &s.ops, &s.prior.mean, sched).unwrap();
        let n = s.ops.n();
        let paths = 3000;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for p in 0..paths {
            let x = engine.step_path(&mut RngStream::new(8, p)).unwrap();
            for j in 0..n {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        let mean = engine.mean();
        let direct: Vec<Vec<f64>> = (0..paths).map(|p| engine.sample(&mut RngStream::new(9, p))).collect();
        let mut bad = 0;
        for j in 0..n {
            let m = sum[j] / paths as f64;
            let v = sq[j] / paths as f64 - m * m;
            let se = (v / paths as f64).sqrt();
            if (m - mean[j]).abs() > 4.0 * se {
                bad += 1;
            }
            let dv = direct.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / paths as f64;
            assert!((dv / v - 1.0).abs() < 0.15, "pixel {j}: {dv} vs {v}");
        }
        assert!(bad <= n / 50, "{bad} pixels off");
    }

    #[test]
    fn law_approaches_posterior_as_discretization_vanishes() {
        let s = setup(true);
        let post = crate::oracle::exact_posterior(&s.prior, s.ops.forward().clone(), s.ops.noise().clone(), &s.y).unwrap();
        let engine = |sched| ModalEngine::new(s.basis.clone(), ModalKind::Ucos, &s.ops, &s.prior.mean, sched).unwrap();
        let coarse = engine(Schedule { n_steps: 200, ..Schedule::default() });
        let fine = engine(Schedule { n_steps: 20_000, delta: 1e-4, t_final: 1.5, ..Schedule::default() });
        let (dc, df) = (coarse.discrepancy(), fine.discrepancy());
        assert!(df.total() < 0.1 * dc.total(), "{dc:?} {df:?}");
        // Stopping at δ > 0 leaves extra variance, never less.
        assert!(dc.trace_excess > 0.0 && df.trace_excess > 0.0);
        let m = fine.mean();
        let err: f64 = m.iter().zip(&post.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = post.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-2 * scale, "{err} vs {scale}");
    }
}
