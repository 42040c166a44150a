//! Empirical convergence studies: strong error over a step-size ladder
//! with coupled noise, and sweeps over the terminal time `T` and the early
//! stopping time `δ` using the exact law of the discretized chain.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gauss::{CovarianceOp, RngStream};
use crate::samplers::{reverse_em_coupled, CoupledNoise, Drift, LawDiscrepancy, ModalEngine, ModalKind};
use crate::scores::ModalBasis;
use crate::ucos::UCoSOperators;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LadderPoint {
    pub n_steps: usize,
    pub dt: f64,
    /// Mean over paths of the per-pixel RMS distance to the reference path.
    pub strong_error: f64,
    pub std_error: f64,
}

/// Strong error of each grid in `ladder` against a `reference_steps` grid
/// driven by the same Brownian path. Every ladder entry must divide
/// `reference_steps`.
pub fn strong_error_ladder(
    drift: &dyn Drift,
    c: &dyn CovarianceOp,
    base: Schedule,
    ladder: &[usize],
    reference_steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<LadderPoint>> {
    if ladder.is_empty() || paths == 0 {
        return Err(Error::InvalidParameter("need at least one ladder entry and one path".into()));
    }
    if let Some(bad) = ladder.iter().find(|&&s| s == 0 || !reference_steps.is_multiple_of(s) || s >= reference_steps) {
        return Err(Error::InvalidParameter(format!("ladder entry {bad} must be a proper divisor of {reference_steps}")));
    }
    let n = c.dim();
    let reference = Schedule { n_steps: reference_steps, ..base };
    let per_path: Vec<Result<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let noise = CoupledNoise::draw(n, reference_steps, &mut RngStream::new(seed, p as u64));
            let xr = reverse_em_coupled(drift, &reference, c, &noise)?;
            ladder
                .iter()
                .map(|&steps| {
                    let x = reverse_em_coupled(drift, &Schedule { n_steps: steps, ..base }, c, &noise)?;
                    let d2: f64 = x.iter().zip(&xr).map(|(a, b)| (a - b).powi(2)).sum();
                    Ok((d2 / n as f64).sqrt())
                })
                .collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0); ladder.len()];
    for r in per_path {
        for (s, e) in sums.iter_mut().zip(r?) {
            s.0 += e;
            s.1 += e * e;
        }
    }
    let p = paths as f64;
    Ok(ladder
        .iter()
        .zip(sums)
        .map(|(&steps, (s, ss))| {
            let mean = s / p;
            let var = (ss / p - mean * mean).max(0.0) * p / (p - 1.0).max(1.0);
            LadderPoint { n_steps: steps, dt: base.step() * base.n_steps as f64 / steps as f64, strong_error: mean, std_error: (var / p).sqrt() }
        })
        .collect())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    /// The swept time (`T` or `δ`).
    pub value: f64,
    /// The same time on the effective clock `τ`.
    pub effective: f64,
    pub discrepancy: LawDiscrepancy,
    /// Per-pixel RMS distance between an ensemble mean and the exact
    /// posterior mean.
    pub mc_mean_error: f64,
}

/// Exact-law studies on a modal problem.
pub struct LawSweep<'a> {
    pub basis: Arc<ModalBasis>,
    pub ops: &'a UCoSOperators,
    pub prior_mean: &'a [f64],
    pub posterior_mean: &'a [f64],
    pub kind: ModalKind,
    /// Fine schedule; its step count keeps discretization error negligible.
    pub base: Schedule,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl LawSweep<'_> {
    fn point(&self, sched: Schedule, value: f64, effective: f64) -> Result<SweepPoint> {
        let engine = ModalEngine::new(self.basis.clone(), self.kind, self.ops, self.prior_mean, sched)?;
        let n = self.prior_mean.len();
        let samples: Vec<Vec<f64>> =
            (0..self.ensemble_size).into_par_iter().map(|i| engine.sample(&mut RngStream::new(self.seed, i as u64))).collect();
        let mut mean = vec![0.0; n];
        for s in &samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
        }
        let k = self.ensemble_size as f64;
        let err: f64 = mean.iter().zip(self.posterior_mean).map(|(m, p)| (m / k - p).powi(2)).sum::<f64>() / n as f64;
        Ok(SweepPoint { value, effective, discrepancy: engine.discrepancy(), mc_mean_error: err.sqrt() })
    }

    /// Varies `T`; the initialization error should decay like `e^{-τ(T)}`.
    pub fn terminal_times(&self, values: &[f64]) -> Result<Vec<SweepPoint>> {
        values
            .iter()
            .map(|&t| {
                let s = Schedule { t_final: t, ..self.base };
                s.validate()?;
                self.point(s, t, s.effective_time(t)?)
            })
            .collect()
    }

    /// Varies `δ`; stopping early leaves an error of first order in `τ(δ)`.
    pub fn stopping_times(&self, values: &[f64]) -> Result<Vec<SweepPoint>> {
        values
            .iter()
            .map(|&d| {
                let s = Schedule { delta: d, ..self.base };
                s.validate()?;
                self.point(s, d, s.effective_time(d)?)
            })
            .collect()
    }
}
