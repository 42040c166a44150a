use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gauss::{CovarianceOp, RngStream};

/// The score part of a reverse-time drift, plus an optional state correction
/// applied before each step (used by projection methods).
pub trait Drift: Send + Sync {
    /// Weighted score `s(x, τ)` at effective time `τ`.
    fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>>;

    fn pre_step(&self, x: Vec<f64>, _tau: f64) -> Result<Vec<f64>> {
        Ok(x)
    }

    fn name(&self) -> String;
}

/// Standard deviation factor of the marginal-consistent initial state,
/// `√(1 - e^{-τ(T)})`.
pub fn initial_scale(sched: &Schedule) -> f64 {
    (-(-sched.tau(sched.t_final)).exp_m1()).sqrt()
}

fn check_finite(x: &[f64], what: &str, t: f64) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Sampling(format!("{what} became non-finite at t = {t:.4} (component {i})")));
    }
    Ok(())
}

/// Reverse Euler–Maruyama from `T` down to `δ` with caller-supplied noise.
///
/// `z0` is the standard-normal vector behind the initial state and
/// `noise(k)` the one for step `k` (step 0 starts at `T`). Each step is
/// `x ← x + hβ(t)(½x + s(x, τ(t))) + √(hβ(t)) 𝒞^{1/2} ξ`, with the drift
/// frozen at the upper end of the step.
pub fn reverse_em_with<N>(drift: &dyn Drift, sched: &Schedule, c: &dyn CovarianceOp, z0: &[f64], mut noise: N) -> Result<Vec<f64>>
where
    N: FnMut(usize) -> Vec<f64>,
{
    sched.validate()?;
    let n = c.dim();
    if z0.len() != n {
        return Err(Error::Dimension(format!("initial noise has length {}, expected {n}", z0.len())));
    }
    let grid = sched.grid();
    let s0 = initial_scale(sched);
    let mut x: Vec<f64> = c.sqrt_apply(z0).into_iter().map(|v| s0 * v).collect();
    for k in 0..sched.n_steps {
        let t = grid[sched.n_steps - k];
        let h = t - grid[sched.n_steps - k - 1];
        let tau = sched.tau(t);
        let hb = h * sched.beta(t);
        x = drift.pre_step(x, tau)?;
        let s = drift.score(&x, tau)?;
        let xi = noise(k);
        if xi.len() != n {
            return Err(Error::Dimension(format!("step noise has length {}, expected {n}", xi.len())));
        }
        let dw = c.sqrt_apply(&xi);
        let sq = hb.sqrt();
        for ((xi, si), di) in x.iter_mut().zip(&s).zip(&dw) {
            *xi += hb * (0.5 * *xi + si) + sq * di;
        }
        check_finite(&x, &drift.name(), t)?;
    }
    Ok(x)
}

/// One reverse path with noise drawn from `rng`: first the initial vector,
/// then one vector per step.
pub fn reverse_em(drift: &dyn Drift, sched: &Schedule, c: &dyn CovarianceOp, rng: &mut RngStream) -> Result<Vec<f64>> {
    let n = c.dim();
    let z0 = rng.normals(n);
    reverse_em_with(drift, sched, c, &z0, |_| rng.normals(n))
}

/// Brownian increments for a fine grid and their coarsenings, so that
/// paths at several step sizes share one noise realization.
#[derive(Debug, Clone)]
pub struct CoupledNoise {
    pub z0: Vec<f64>,
    fine: Vec<Vec<f64>>,
}

impl CoupledNoise {
    pub fn draw(n: usize, fine_steps: usize, rng: &mut RngStream) -> Self {
        let z0 = rng.normals(n);
        let fine = (0..fine_steps).map(|_| rng.normals(n)).collect();
        Self { z0, fine }
    }

    pub fn fine_steps(&self) -> usize {
        self.fine.len()
    }

    /// Normalized increment for step `k` of a grid with `steps` steps:
    /// the sum of the covered fine increments over `√factor`.
    pub fn increment(&self, steps: usize, k: usize) -> Result<Vec<f64>> {
        if steps == 0 || !self.fine.len().is_multiple_of(steps) {
            return Err(Error::InvalidParameter(format!(
                "{steps} steps do not divide the {} fine steps",
                self.fine.len()
            )));
        }
        let f = self.fine.len() / steps;
        let mut out = vec![0.0; self.z0.len()];
        for v in &self.fine[k * f..(k + 1) * f] {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
        let s = 1.0 / (f as f64).sqrt();
        out.iter_mut().for_each(|o| *o *= s);
        Ok(out)
    }
}

/// Reverse path on `sched` driven by a shared fine-grid noise realization.
pub fn reverse_em_coupled(drift: &dyn Drift, sched: &Schedule, c: &dyn CovarianceOp, noise: &CoupledNoise) -> Result<Vec<f64>> {
    let mut err = None;
    let steps = sched.n_steps;
    let out = reverse_em_with(drift, sched, c, &noise.z0, |k| match noise.increment(steps, k) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            vec![0.0; noise.z0.len()]
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    out
}
