//! Forward OU process, the β speed schedule, UCoS training pairs and the
//! DSM / SM objectives.
//!
//! The process is `dX = -½ X dτ + 𝒞^{1/2} dB` in effective time `τ`; a speed
//! schedule `β` runs it at `τ(t) = ∫₀ᵗ β`. Every closed-form identity is
//! evaluated at `τ(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{cg_solve, CovarianceOp, RngStream};
use crate::scores::{GaussianPrior, ScoreModel};
use crate::ucos::{expm1, lambda_weight, UCoSOperators};

/// Time grid and speed function `β(t) = β_min + t (β_max - β_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_final: f64,
    pub delta: f64,
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { t_final: 1.0, delta: 5e-3, n_steps: 1000, beta_min: 0.05, beta_max: 10.0 }
    }
}

impl Schedule {
    pub fn new(t_final: f64, delta: f64, n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        let s = Self { t_final, delta, n_steps, beta_min, beta_max };
        s.validate()?;
        Ok(s)
    }

    /// Unit speed: `τ(t) = t`.
    pub fn unit(t_final: f64, delta: f64, n_steps: usize) -> Result<Self> {
        Self::new(t_final, delta, n_steps, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < self.t_final && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "schedule needs 0 < δ < T, got δ = {}, T = {}",
                self.delta, self.t_final
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_max > 0.0) {
            return Err(Error::InvalidParameter("β must stay positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `τ(t) = β_min t + (β_max - β_min) t² / 2`.
    pub fn effective_time(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_final * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::InvalidParameter(format!("time {t} outside [0, {}]", self.t_final)));
        }
        Ok(self.tau(t))
    }

    #[inline]
    pub(crate) fn tau(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn step(&self) -> f64 {
        (self.t_final - self.delta) / self.n_steps as f64
    }

    /// Uniform grid `δ = t_0 < … < t_n = T`.
    pub fn grid(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.n_steps)
            .map(|i| if i == self.n_steps { self.t_final } else { self.delta + i as f64 * h })
            .collect()
    }

    /// `count` schedule times in `[δ, T]`, one uniform draw per stratum.
    pub fn stratified_times(&self, count: usize, rng: &mut RngStream) -> Vec<f64> {
        let w = (self.t_final - self.delta) / count as f64;
        (0..count).map(|k| self.delta + (k as f64 + rng.uniform()) * w).collect()
    }

    /// `count` i.i.d. uniform schedule times in `[δ, T]`.
    pub fn uniform_times(&self, count: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..count).map(|_| self.delta + rng.uniform() * (self.t_final - self.delta)).collect()
    }
}

/// `X_t | X_0 = x0`: `e^{-t/2} x0 + √(1 - e^{-t}) 𝒞^{1/2} z`.
pub fn ou_transition_sample(x0: &[f64], t: f64, c: &dyn CovarianceOp, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("transition time must be ≥ 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    let h = (-0.5 * t).exp();
    let s = (-(-t).exp_m1()).sqrt();
    let z = c.sqrt_apply(&rng.normals(x0.len()));
    Ok(x0.iter().zip(&z).map(|(x, zi)| h * x + s * zi).collect())
}

/// One training pair: a prior draw `x0` and `ζ = R_t⁻¹ X̃_t` at effective
/// time `tau` (schedule time `t`).
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x0: Vec<f64>,
    pub zeta: Vec<f64>,
    pub t: f64,
    pub tau: f64,
}

/// Draws `ζ = (c0 I + 𝒞A*Γ⁻¹A) x0 + √c0 𝒞^{1/2} z1 + 𝒞 A* Γ^{-1/2} z2`,
/// `c0 = 1/(e^τ - 1)`. One `A` and one `A*`; never touches `R_t`, `Σ_t`
/// or `C_t⁻¹`.
pub fn training_pair_from(ops: &UCoSOperators, x0: Vec<f64>, tau: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("training pairs need t > 0, got {tau}")));
    }
    let (n, m) = (ops.n(), ops.m());
    if x0.len() != n {
        return Err(Error::Dimension(format!("prior draw has length {}, expected {n}", x0.len())));
    }
    let c0 = 1.0 / expm1(tau);
    let z1 = rng.normals(n);
    let z2 = rng.normals(m);
    let gamma = ops.noise();
    let mut w = gamma.solve(&ops.forward().apply(&x0));
    for (wi, gi) in w.iter_mut().zip(gamma.inv_sqrt_apply(&z2)) {
        *wi += gi;
    }
    let data = ops.noising().apply(&ops.forward().adjoint_apply(&w));
    let noise = ops.noising().sqrt_apply(&z1);
    let s = c0.sqrt();
    Ok((0..n).map(|i| c0 * x0[i] + s * noise[i] + data[i]).collect())
}

pub fn training_pair_sample(
    ops: &UCoSOperators,
    prior_sampler: &dyn Fn(&mut RngStream) -> Vec<f64>,
    sched: &Schedule,
    t: f64,
    rng: &mut RngStream,
) -> Result<TrainingPair> {
    let tau = sched.effective_time(t)?;
    let x0 = prior_sampler(rng);
    let zeta = training_pair_from(ops, x0.clone(), tau, rng)?;
    Ok(TrainingPair { x0, zeta, t, tau })
}

/// Draw from `N(0, Σ_t)` by perturbation: `w - (e^t-1) 𝒞 A* C_t⁻¹ (A w + ε)`
/// with `w ~ N(0, (e^t-1) 𝒞)`, `ε ~ N(0, Γ)`. Uses a `C_t⁻¹` solve; this is
/// the direct reference construction the training-pair identity avoids.
pub fn sigma_t_sample(ops: &UCoSOperators, tau: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let e = expm1(tau);
    let w: Vec<f64> = ops.noising().sqrt_apply(&rng.normals(ops.n())).iter().map(|v| e.sqrt() * v).collect();
    let eps = ops.noise().sqrt_apply(&rng.normals(ops.m()));
    let aw: Vec<f64> = ops.forward().apply(&w).iter().zip(&eps).map(|(a, b)| a + b).collect();
    let inner = ops.apply_ct_inverse(tau, &aw)?;
    let corr = ops.noising().apply(&ops.forward().adjoint_apply(&inner));
    Ok(w.iter().zip(&corr).map(|(a, b)| a - e * b).collect())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std_error: (var / n).sqrt(), samples: v.len() }
    }
}

fn dsm_term(r_model: &dyn ScoreModel, pair: &TrainingPair) -> Result<f64> {
    let lam = lambda_weight(pair.tau)?;
    let r = r_model.evaluate(&pair.zeta, pair.tau)?;
    Ok(lam * lam * r.iter().zip(&pair.x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

/// Batch average of `λ(t)² ‖r(ζ, t) - x0‖²`.
pub fn dsm_loss(r_model: &dyn ScoreModel, pairs: &[TrainingPair], sched: &Schedule) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    let lo = sched.tau(sched.delta) * (1.0 - 1e-12);
    let hi = sched.tau(sched.t_final) * (1.0 + 1e-12);
    let mut total = 0.0;
    for p in pairs {
        if !(lo..=hi).contains(&p.tau) {
            return Err(Error::InvalidParameter(format!("pair time {} outside [δ, T]", p.t)));
        }
        total += dsm_term(r_model, p)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Time sampling for the Monte Carlo losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSampling {
    Stratified,
    Uniform,
}

/// Sample of the task process: prior draw, `X̃_t = x0 + Z_t`, and the exact
/// `s̃(X̃_t) + X̃_t = E[X̃_0 | X̃_t]`.
struct TaskSample {
    pair: TrainingPair,
    target: Vec<f64>,
}

fn task_sample(ops: &UCoSOperators, prior: &GaussianPrior, t: f64, tau: f64, rng: &mut RngStream) -> Result<TaskSample> {
    let x0 = prior.sample(rng);
    let z = sigma_t_sample(ops, tau, rng)?;
    let xt: Vec<f64> = x0.iter().zip(&z).map(|(a, b)| a + b).collect();
    let zeta = ops.apply_rt_inverse(tau, &xt)?;
    // E[x0 | x̃_t] = m0 + S0 (Σ_t + S0)⁻¹ (x̃_t - m0)
    let d: Vec<f64> = xt.iter().zip(&prior.mean).map(|(a, b)| a - b).collect();
    let err = std::cell::RefCell::new(None);
    let action = |v: &[f64]| -> Vec<f64> {
        let sv = match ops.apply_sigma_t(tau, v) {
            Ok(sv) => sv,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                vec![f64::NAN; v.len()]
            }
        };
        sv.iter().zip(prior.cov.apply(v)).map(|(a, b)| a + b).collect()
    };
    let sol = cg_solve(action, &d, ops.cg_tol(), ops.cg_max_iter().max(50), None);
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    let u = sol?.into_result()?;
    let target: Vec<f64> = prior.cov.apply(&u).iter().zip(&prior.mean).map(|(a, b)| a + b).collect();
    Ok(TaskSample { pair: TrainingPair { x0, zeta, t, tau }, target })
}

fn loss_times(sched: &Schedule, n: usize, sampling: TimeSampling, rng: &mut RngStream) -> Vec<f64> {
    match sampling {
        TimeSampling::Stratified => sched.stratified_times(n, rng),
        TimeSampling::Uniform => sched.uniform_times(n, rng),
    }
}

/// Monte Carlo score-matching loss
/// `E λ(t)² ‖s̃(X̃_t) + X̃_t - r(R_t⁻¹ X̃_t, t)‖²`, computable in closed form
/// for a Gaussian prior.
pub fn sm_loss_gaussian(
    r_model: &dyn ScoreModel,
    ops: &UCoSOperators,
    prior: &GaussianPrior,
    n_mc: usize,
    sched: &Schedule,
    sampling: TimeSampling,
    rng: &mut RngStream,
) -> Result<Estimate> {
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be positive".into()));
    }
    let mut terms = Vec::with_capacity(n_mc);
    for t in loss_times(sched, n_mc, sampling, rng) {
        let tau = sched.tau(t);
        let s = task_sample(ops, prior, t, tau, rng)?;
        let lam = lambda_weight(tau)?;
        let r = r_model.evaluate(&s.pair.zeta, tau)?;
        terms.push(lam * lam * r.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    }
    Ok(Estimate::from_samples(&terms))
}

/// Paired comparison of two models under both objectives on shared samples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairedLossDifference {
    /// `DSM(r1) - DSM(r2)`.
    pub dsm: Estimate,
    /// `SM(r1) - SM(r2)`.
    pub sm: Estimate,
    /// `(DSM(r1) - DSM(r2)) - (SM(r1) - SM(r2))`; zero in expectation.
    pub gap: Estimate,
}

pub fn dsm_sm_paired(
    r1: &dyn ScoreModel,
    r2: &dyn ScoreModel,
    ops: &UCoSOperators,
    prior: &GaussianPrior,
    n_mc: usize,
    sched: &Schedule,
    sampling: TimeSampling,
    rng: &mut RngStream,
) -> Result<PairedLossDifference> {
    if n_mc < 2 {
        return Err(Error::InvalidParameter("paired estimate needs at least two samples".into()));
    }
    let (mut dd, mut ds, mut gap) = (Vec::new(), Vec::new(), Vec::new());
    for t in loss_times(sched, n_mc, sampling, rng) {
        let tau = sched.tau(t);
        let s = task_sample(ops, prior, t, tau, rng)?;
        let lam2 = lambda_weight(tau)?.powi(2);
        let a = r1.evaluate(&s.pair.zeta, tau)?;
        let b = r2.evaluate(&s.pair.zeta, tau)?;
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let d = lam2 * (sq(&a, &s.pair.x0) - sq(&b, &s.pair.x0));
        let m = lam2 * (sq(&a, &s.target) - sq(&b, &s.target));
        dd.push(d);
        ds.push(m);
        gap.push(d - m);
    }
    Ok(PairedLossDifference {
        dsm: Estimate::from_samples(&dd),
        sm: Estimate::from_samples(&ds),
        gap: Estimate::from_samples(&gap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{DiagonalCovariance, SharedCov};
    use crate::linop::dot;
    use crate::linop::{CountingMap, DenseMap, SharedMap, ZeroMap};
    use crate::scores::testutil::*;
    use crate::scores::GaussianTaskScore;
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    #[test]
    fn effective_time_values() {
        let unit = Schedule::unit(1.0, 1e-3, 10).unwrap();
        assert_eq!(unit.effective_time(0.7).unwrap(), 0.7);
        let s = Schedule::default();
        assert!((s.effective_time(1.0).unwrap() - 5.025).abs() < 1e-14);
        assert_eq!(s.effective_time(0.0).unwrap(), 0.0);
        assert!(s.effective_time(1.5).is_err());
        assert!(Schedule::new(1.0, 2.0, 10, 0.05, 10.0).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let s = Schedule::default();
        let g = s.grid();
        assert_eq!(g.len(), 1001);
        assert_eq!(g[0], s.delta);
        assert_eq!(g[1000], 1.0);
    }

    #[test]
    fn transition_identity_and_variance() {
        let c = DiagonalCovariance::isotropic(1, 1.0).unwrap();
        let mut rng = RngStream::new(3, 0);
        assert_eq!(ou_transition_sample(&[2.5], 0.0, &c, &mut rng).unwrap(), vec![2.5]);
        let t = 2f64.ln();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| ou_transition_sample(&[1.0], t, &c, &mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance for a normal: 2σ⁴/(n-1).
        let se = (2.0 * 0.25 / (n - 1) as f64).sqrt();
        assert!((var - 0.5).abs() < 3.0 * se, "{var}");
        assert!((mean - 0.5f64.sqrt()).abs() < 3.0 * (0.5 / n as f64).sqrt());
    }

    #[test]
    fn long_time_transition_forgets_start() {
        let n = 3;
        let c = DiagonalCovariance::new(vec![1.0, 0.5, 2.0]).unwrap();
        let mut rng = RngStream::new(9, 0);
        let draws = 10_000;
        let mut mean = vec![0.0; n];
        for _ in 0..draws {
            let x = ou_transition_sample(&[50.0, -50.0, 10.0], 20.0, &c, &mut rng).unwrap();
            for i in 0..n {
                mean[i] += x[i] / draws as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 3.0 * (3.5f64 / draws as f64).sqrt(), "{norm}");
    }

    #[test]
    fn semigroup_property() {
        // X_t then X_s from it has the law of the (t + s) transition.
        let c = DiagonalCovariance::new(vec![1.0, 0.3]).unwrap();
        let mut rng = RngStream::new(12, 0);
        let (t, s) = (0.3, 0.5);
        let n = 40_000;
        let mut acc = [0.0; 2];
        let mut acc2 = [0.0; 2];
        for _ in 0..n {
            let a = ou_transition_sample(&[1.0, -2.0], t, &c, &mut rng).unwrap();
            let b = ou_transition_sample(&a, s, &c, &mut rng).unwrap();
            for i in 0..2 {
                acc[i] += b[i];
                acc2[i] += b[i] * b[i];
            }
        }
        let x0 = [1.0, -2.0];
        let var = [1.0, 0.3];
        for i in 0..2 {
            let m = acc[i] / n as f64;
            let v = acc2[i] / n as f64 - m * m;
            let want_m = (-(t + s) / 2.0f64).exp() * x0[i];
            let want_v = (1.0 - (-(t + s) as f64).exp()) * var[i];
            assert!((m - want_m).abs() < 4.0 * (want_v / n as f64).sqrt());
            assert!((v - want_v).abs() < 4.0 * want_v * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn training_pair_without_data_reduces() {
        let id: SharedCov = Arc::new(DiagonalCovariance::isotropic(1, 1.0).unwrap());
        let ops = UCoSOperators::new(Arc::new(ZeroMap::new(1, 1)), id.clone(), id).unwrap();
        let tau = 0.8;
        let mut rng = RngStream::new(1, 0);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| training_pair_from(&ops, vec![2.0], tau, &mut rng).unwrap()[0]).collect();
        let c0 = 1.0 / expm1(tau);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0 * c0).abs() < 4.0 * (c0 / n as f64).sqrt());
        assert!((var - c0).abs() < 4.0 * c0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn training_pair_operator_budget() {
        let p = dense_problem(4, 2, 0, true);
        let counted = Arc::new(CountingMap::new(Arc::new(DenseMap::new(p.a.clone())) as SharedMap));
        let counter = counted.counter();
        let ops = UCoSOperators::new(counted, p.ops.noising().clone(), p.ops.noise().clone()).unwrap();
        let mut rng = RngStream::new(0, 0);
        let sched = Schedule::default();
        let prior = p.prior.clone();
        training_pair_sample(&ops, &|r| prior.sample(r), &sched, 0.3, &mut rng).unwrap();
        assert_eq!((counter.forward(), counter.adjoint()), (1, 1));
    }

    #[test]
    fn sigma_sampler_covariance() {
        let p = dense_problem(3, 2, 4, true);
        let tau = 0.6;
        let mut rng = RngStream::new(2, 0);
        let n = 40_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let z = DVector::from_vec(sigma_t_sample(&p.ops, tau, &mut rng).unwrap());
            cov += &z * z.transpose() / n as f64;
        }
        let e = expm1(tau);
        let ct = &p.a * &p.c * p.a.transpose() * e + &p.g;
        let sigma = &p.c * e - &p.c * p.a.transpose() * ct.try_inverse().unwrap() * &p.a * &p.c * (e * e);
        for i in 0..3 {
            for j in 0..3 {
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - sigma[(i, j)]).abs() < 5.0 * se, "({i},{j})");
            }
        }
    }

    struct Zero;
    impl ScoreModel for Zero {
        fn evaluate(&self, z: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![0.0; z.len()])
        }
        fn name(&self) -> String {
            "zero".into()
        }
    }

    #[test]
    fn dsm_plug_in_values() {
        let sched = Schedule::default();
        let pairs = vec![
            TrainingPair { x0: vec![1.0, 2.0], zeta: vec![0.0, 0.0], t: 0.5, tau: sched.tau(0.5) },
            TrainingPair { x0: vec![0.0, 3.0], zeta: vec![1.0, 1.0], t: 0.9, tau: sched.tau(0.9) },
        ];
        let got = dsm_loss(&Zero, &pairs, &sched).unwrap();
        let want = pairs.iter().map(|p| lambda_weight(p.tau).unwrap().powi(2) * dot(&p.x0, &p.x0)).sum::<f64>() / 2.0;
        assert!((got - want).abs() < 1e-12 * want);
        assert!(dsm_loss(&Zero, &[], &sched).is_err());
    }

    #[test]
    fn sm_loss_vanishes_at_closed_form() {
        let p = dense_problem(4, 2, 6, false);
        let r = GaussianTaskScore::new(&p.ops, p.prior.clone()).unwrap().with_cg(1e-14, 500);
        let sched = Schedule::default();
        let mut rng = RngStream::new(7, 0);
        let est = sm_loss_gaussian(&r, &p.ops, &p.prior, 50, &sched, TimeSampling::Stratified, &mut rng).unwrap();
        assert!(est.mean < 1e-6, "{est:?}");
    }
}
