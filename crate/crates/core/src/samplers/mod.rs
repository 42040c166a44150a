//! Reverse-time Euler–Maruyama sampling with the UCoS, Conditional,
//! SDE ALD, DPS and Proj drifts, and the parallel ensemble driver.

mod drifts;
mod em;
mod modal;

pub use drifts::{bisect_gamma, proj_step, ConditionalDrift, DpsDrift, GammaRule, ProjDrift, SdeAldDrift, UCoSDrift};
pub use em::{initial_scale, reverse_em, reverse_em_coupled, reverse_em_with, CoupledNoise, Drift};
pub use modal::{mode_coefficients, whitened_data, LawDiscrepancy, ModalConditionalScore, ModalEngine, ModalKind, ModalLaw};

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gauss::RngStream;
use crate::scores::{
    gaussian_conditional_score_exact, proportionality, GaussianPrior, GaussianPriorScore, GaussianTaskScore, ModalBasis,
    ModalOptions, PriorScoreModel, ScoreModel,
};
use crate::ucos::UCoSOperators;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ucos,
    Conditional,
    SdeAld,
    Dps,
    Proj,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::SdeAld, Method::Dps, Method::Proj, Method::Conditional, Method::Ucos];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ucos => "ucos",
            Method::Conditional => "conditional",
            Method::SdeAld => "sde_ald",
            Method::Dps => "dps",
            Method::Proj => "proj",
        }
    }

    /// Whether the forward operator is applied while stepping.
    pub fn uses_forward_online(&self) -> bool {
        matches!(self, Method::SdeAld | Method::Dps | Method::Proj)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?} (ucos, conditional, sde_ald, dps, proj)")))
    }
}

/// The method together with exactly the hyper-parameters it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodParams {
    Ucos,
    Conditional,
    SdeAld { gamma_rule: GammaRule },
    Dps { xi: f64 },
    Proj { lambda_mix: f64, cg_tol: f64 },
}

impl MethodParams {
    pub fn method(&self) -> Method {
        match self {
            MethodParams::Ucos => Method::Ucos,
            MethodParams::Conditional => Method::Conditional,
            MethodParams::SdeAld { .. } => Method::SdeAld,
            MethodParams::Dps { .. } => Method::Dps,
            MethodParams::Proj { .. } => Method::Proj,
        }
    }

    /// Defaults for methods whose tuning parameter is normally grid-searched.
    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Ucos => MethodParams::Ucos,
            Method::Conditional => MethodParams::Conditional,
            Method::SdeAld => MethodParams::SdeAld { gamma_rule: GammaRule::default() },
            Method::Dps => MethodParams::Dps { xi: 1.0 },
            Method::Proj => MethodParams::Proj { lambda_mix: 0.5, cg_tol: 1e-8 },
        }
    }
}

/// How paths are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Explicit Euler–Maruyama stepping.
    #[default]
    Stepwise,
    /// Direct draws from the exact output law of the same Euler–Maruyama
    /// chain (UCoS and Conditional with a modal basis only).
    ModalLaw,
    /// `ModalLaw` when available, otherwise `Stepwise`.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub params: MethodParams,
    pub schedule: Schedule,
    pub ensemble_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub engine: Engine,
}

impl SamplerConfig {
    pub fn new(params: MethodParams, schedule: Schedule, ensemble_size: usize, seed: u64) -> Self {
        Self { params, schedule, ensemble_size, seed, engine: Engine::Stepwise }
    }

    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        self
    }

    pub fn method(&self) -> Method {
        self.params.method()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.ensemble_size == 0 {
            return Err(Error::InvalidParameter("ensemble_size must be at least 1".into()));
        }
        match self.params {
            MethodParams::Dps { xi } if !(xi >= 0.0 && xi.is_finite()) => {
                Err(Error::InvalidParameter(format!("DPS ξ must be non-negative, got {xi}")))
            }
            MethodParams::Proj { lambda_mix, cg_tol } if !((0.0..=1.0).contains(&lambda_mix) && cg_tol > 0.0) => Err(
                Error::InvalidParameter(format!("Proj needs λ ∈ [0, 1] and a positive CG tolerance, got {lambda_mix}, {cg_tol}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Posterior samples from one method.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub samples: Vec<Vec<f64>>,
    pub method: Method,
    pub wall_time: f64,
    /// Paths that blew up and were redrawn from a fresh stream.
    pub redrawn: usize,
    pub engine: Engine,
}

/// A measured linear-Gaussian problem: operators with the cached shift and
/// the prior.
#[derive(Clone)]
pub struct SamplingProblem {
    pub ops: UCoSOperators,
    pub prior: GaussianPrior,
}

impl SamplingProblem {
    /// Registers `y`; costs one forward and one adjoint application.
    pub fn new(ops: &UCoSOperators, prior: GaussianPrior, y: &[f64]) -> Result<Self> {
        if prior.dim() != ops.n() {
            return Err(Error::Dimension(format!("prior dimension {} vs operator domain {}", prior.dim(), ops.n())));
        }
        let ops = ops.with_measurement(y, &prior.mean)?;
        Ok(Self { ops, prior })
    }

    pub fn y(&self) -> &[f64] {
        &self.ops.measurement().expect("registered at construction").y
    }
}

/// Score models available to the drifts. Anything missing makes the
/// methods that need it fail with a clear error.
#[derive(Clone, Default)]
pub struct ScoreModels {
    /// Task-dependent `r(ζ, t)` for UCoS.
    pub task: Option<Arc<dyn ScoreModel>>,
    /// Unconditional prior score for SDE ALD, DPS and Proj.
    pub prior_score: Option<Arc<dyn PriorScoreModel>>,
    /// Conditional score for the Conditional method.
    pub conditional: Option<Arc<dyn PriorScoreModel>>,
    /// Modal basis enabling the exact-law engine.
    pub modal: Option<Arc<ModalBasis>>,
}

impl ScoreModels {
    /// Closed-form Gaussian models. With `𝒞 ∝ S0` the task and conditional
    /// scores go through a modal basis (built here, offline), so sampling
    /// needs no operator calls; otherwise they fall back to CG solves that
    /// apply `A` at every evaluation.
    pub fn gaussian(problem: &SamplingProblem, opts: &ModalOptions) -> Result<Self> {
        Self::gaussian_with(problem, Some(opts))
    }

    /// As [`ScoreModels::gaussian`]; `None` skips the modal basis.
    pub fn gaussian_with(problem: &SamplingProblem, opts: Option<&ModalOptions>) -> Result<Self> {
        let ops = &problem.ops;
        let prior_score: Arc<dyn PriorScoreModel> =
            Arc::new(GaussianPriorScore::new(problem.prior.clone(), ops.noising().clone()).with_cg(ops.cg_tol(), ops.cg_max_iter()));
        let modal = opts.filter(|_| proportionality(ops.noising().as_ref(), problem.prior.cov.as_ref()).is_some());
        if let Some(opts) = modal {
            let task = GaussianTaskScore::modal(ops, problem.prior.clone(), opts)?;
            let basis = task.basis().expect("modal backend").clone();
            let cond = ModalConditionalScore::new(basis.clone(), ops, &problem.prior.mean)?;
            Ok(Self { task: Some(Arc::new(task)), prior_score: Some(prior_score), conditional: Some(Arc::new(cond)), modal: Some(basis) })
        } else {
            let task = GaussianTaskScore::new(ops, problem.prior.clone())?.with_cg(ops.cg_tol(), ops.cg_max_iter());
            let cond = gaussian_conditional_score_exact(ops, &problem.prior, problem.y())?;
            Ok(Self { task: Some(Arc::new(task)), prior_score: Some(prior_score), conditional: Some(Arc::new(cond)), modal: None })
        }
    }
}

fn need<T: Clone>(v: &Option<T>, what: &str, method: Method) -> Result<T> {
    v.clone().ok_or_else(|| Error::InvalidParameter(format!("method {method} needs a {what} model")))
}

/// Assembles the drift for `params`.
pub fn build_drift(params: &MethodParams, problem: &SamplingProblem, models: &ScoreModels) -> Result<Box<dyn Drift>> {
    let m = params.method();
    let ops = &problem.ops;
    let y = problem.y().to_vec();
    Ok(match *params {
        MethodParams::Ucos => Box::new(UCoSDrift::new(ops.clone(), need(&models.task, "task score", m)?)?),
        MethodParams::Conditional => Box::new(ConditionalDrift::new(need(&models.conditional, "conditional score", m)?)),
        MethodParams::SdeAld { gamma_rule } => {
            Box::new(SdeAldDrift::new(ops, y, need(&models.prior_score, "prior score", m)?, gamma_rule)?)
        }
        MethodParams::Dps { xi } => Box::new(DpsDrift::new(ops, y, need(&models.prior_score, "prior score", m)?, xi)?),
        MethodParams::Proj { lambda_mix, cg_tol } => {
            Box::new(ProjDrift::new(ops, &y, need(&models.prior_score, "prior score", m)?, lambda_mix, cg_tol)?)
        }
    })
}

const MAX_ATTEMPTS: u64 = 4;

/// Stream id of attempt `k` of path `i`; attempt 0 uses stream `i`.
fn stream_id(i: usize, attempt: u64) -> u64 {
    (attempt << 40) | i as u64
}

fn is_path_failure(e: &Error) -> bool {
    matches!(e, Error::Sampling(_) | Error::Breakdown(_))
}

/// Runs `count` independent paths on the current rayon pool. Path `i` owns
/// stream `i` of `seed`; a path that blows up is redrawn from a fresh,
/// deterministic stream. Fails if more than 1% of paths blew up.
pub fn run_paths<F>(count: usize, seed: u64, path: F) -> Result<(Vec<Vec<f64>>, usize)>
where
    F: Fn(&mut RngStream) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Result<(Vec<f64>, bool)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                match path(&mut RngStream::new(seed, stream_id(i, attempt))) {
                    Ok(x) => return Ok((x, attempt > 0)),
                    Err(e) if is_path_failure(&e) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect();
    let mut samples = Vec::with_capacity(count);
    let mut failed = 0usize;
    let mut first_failure = None;
    for r in results {
        match r {
            Ok((x, redrawn)) => {
                failed += redrawn as usize;
                samples.push(x);
            }
            Err(e) if is_path_failure(&e) => {
                failed += 1;
                first_failure.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    if failed as f64 > 0.01 * count as f64 || first_failure.is_some() {
        let why = first_failure.map(|e| format!("; first unrecovered failure: {e}")).unwrap_or_default();
        return Err(Error::Sampling(format!("{failed} of {count} paths blew up{why}")));
    }
    Ok((samples, failed))
}

fn resolve_engine(cfg: &SamplerConfig, models: &ScoreModels) -> Result<Engine> {
    let modal_ok = models.modal.is_some() && matches!(cfg.method(), Method::Ucos | Method::Conditional);
    match cfg.engine {
        Engine::Auto => Ok(if modal_ok { Engine::ModalLaw } else { Engine::Stepwise }),
        Engine::ModalLaw if !modal_ok => Err(Error::InvalidParameter(format!(
            "the modal-law engine needs a modal basis and the ucos or conditional method (got {})",
            cfg.method()
        ))),
        e => Ok(e),
    }
}

/// `ensemble_size` independent posterior samples. Deterministic in
/// `(seed, config)` regardless of the number of worker threads.
pub fn run_ensemble(cfg: &SamplerConfig, problem: &SamplingProblem, models: &ScoreModels) -> Result<Ensemble> {
    cfg.validate()?;
    let start = Instant::now();
    let engine = resolve_engine(cfg, models)?;
    let (samples, redrawn) = match engine {
        Engine::ModalLaw => {
            let kind = if cfg.method() == Method::Ucos { ModalKind::Ucos } else { ModalKind::Conditional };
            let basis = models.modal.clone().expect("checked by resolve_engine");
            let eng = ModalEngine::new(basis, kind, &problem.ops, &problem.prior.mean, cfg.schedule)?;
            run_paths(cfg.ensemble_size, cfg.seed, |rng| Ok(eng.sample(rng)))?
        }
        _ => {
            let drift = build_drift(&cfg.params, problem, models)?;
            let c = problem.ops.noising().clone();
            run_paths(cfg.ensemble_size, cfg.seed, |rng| reverse_em(drift.as_ref(), &cfg.schedule, c.as_ref(), rng))?
        }
    };
    Ok(Ensemble { samples, method: cfg.method(), wall_time: start.elapsed().as_secs_f64(), redrawn, engine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{sq_exp_covariance, DiagonalCovariance};
    use crate::linop::{center_hole_mask, CountingMap, GridShape, MaskOperator};
    use crate::oracle::exact_posterior;

    fn inpainting(side: usize, hole: usize, seed: u64) -> (SamplingProblem, Arc<CountingMap>, Vec<f64>) {
        let shape = GridShape::new(side, side).unwrap();
        let c = Arc::new(sq_exp_covariance(shape, 0.15, 1.0).unwrap());
        let mask = Arc::new(CountingMap::new(Arc::new(MaskOperator::new(shape, center_hole_mask(shape, hole)).unwrap())));
        let sigma = 0.05;
        let ops = UCoSOperators::new(mask.clone(), c.clone(), Arc::new(DiagonalCovariance::isotropic(shape.len(), sigma * sigma).unwrap()))
            .unwrap()
            .with_cg(1e-10, 2000);
        let prior = GaussianPrior::centered(c);
        let mut rng = RngStream::new(seed, 1 << 50);
        let truth = prior.sample(&mut rng);
        let y: Vec<f64> = ops.forward().apply(&truth).iter().map(|v| v + sigma * rng.normal()).collect();
        (SamplingProblem::new(&ops, prior, &y).unwrap(), mask, truth)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("langevin".parse::<Method>().is_err());
        assert_eq!("sde-ald".parse::<Method>().unwrap(), Method::SdeAld);
    }

    #[test]
    fn config_validation() {
        let ok = SamplerConfig::new(MethodParams::Ucos, Schedule::default(), 4, 0);
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { ensemble_size: 0, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig { params: MethodParams::Proj { lambda_mix: 1.2, cg_tol: 1e-8 }, ..ok.clone() }.validate().is_err());
        let text = serde_json::to_string(&SamplerConfig { params: MethodParams::Dps { xi: 0.3 }, ..ok }).unwrap();
        assert!(text.contains("\"method\":\"dps\"") && text.contains("\"xi\":0.3"), "{text}");
    }

    #[test]
    fn single_path_equals_reverse_em_stream_zero() {
        let (p, _, _) = inpainting(8, 3, 1);
        let models = ScoreModels::gaussian(&p, &ModalOptions::default()).unwrap();
        let sched = Schedule { n_steps: 20, ..Schedule::default() };
        let cfg = SamplerConfig::new(MethodParams::Ucos, sched, 1, 42);
        let ens = run_ensemble(&cfg, &p, &models).unwrap();
        let drift = build_drift(&cfg.params, &p, &models).unwrap();
        let direct = reverse_em(drift.as_ref(), &sched, p.ops.noising().as_ref(), &mut RngStream::new(42, 0)).unwrap();
        assert_eq!(ens.samples, vec![direct]);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (p, _, _) = inpainting(8, 3, 2);
        let models = ScoreModels::gaussian(&p, &ModalOptions::default()).unwrap();
        let sched = Schedule { n_steps: 10, ..Schedule::default() };
        for params in [MethodParams::Ucos, MethodParams::default_for(Method::SdeAld)] {
            let cfg = SamplerConfig::new(params, sched, 12, 5);
            let run = |threads| {
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_ensemble(&cfg, &p, &models).unwrap())
            };
            assert_eq!(run(1).samples, run(4).samples);
        }
    }

    #[test]
    fn operator_calls_per_method() {
        let (p, counter, _) = inpainting(8, 3, 3);
        let models = ScoreModels::gaussian(&p, &ModalOptions::default()).unwrap();
        let steps = 12;
        let sched = Schedule { n_steps: steps, ..Schedule::default() };
        for method in Method::ALL {
            counter.counter().reset();
            let cfg = SamplerConfig::new(MethodParams::default_for(method), sched, 3, 1);
            // Drift construction is per-measurement work; count stepping only.
            let drift = build_drift(&cfg.params, &p, &models).unwrap();
            counter.counter().reset();
            let c = p.ops.noising().clone();
            run_paths(3, 1, |rng| reverse_em(drift.as_ref(), &sched, c.as_ref(), rng)).unwrap();
            let (f, a) = (counter.counter().forward(), counter.counter().adjoint());
            match method {
                Method::Ucos | Method::Conditional => assert_eq!((f, a), (0, 0), "{method}"),
                Method::SdeAld | Method::Dps => assert_eq!((f, a), (3 * steps as u64, 3 * steps as u64), "{method}"),
                Method::Proj => {
                    assert!(f >= 3 * steps as u64 && f == a, "{method}: {f} {a}");
                }
            }
        }
    }

    #[test]
    fn modal_law_engine_requires_basis() {
        let (p, _, _) = inpainting(8, 3, 4);
        let cfg = SamplerConfig::new(MethodParams::Ucos, Schedule::default(), 2, 0).with_engine(Engine::ModalLaw);
        let err = run_ensemble(&cfg, &p, &ScoreModels::default());
        assert!(err.is_err());
    }

    #[test]
    fn failures_beyond_one_percent_abort() {
        let r = run_paths(50, 0, |rng| {
            if rng.stream_id() % 10 == 0 {
                Err(Error::Sampling("nan".into()))
            } else {
                Ok(vec![1.0])
            }
        });
        // Streams 0, 10, ... fail on the first attempt but are redrawn
        // from other streams; five redraws exceed 1% of 50.
        assert!(matches!(r, Err(Error::Sampling(ref m)) if m.contains("5 of 50")), "{r:?}");
        let (s, redrawn) = run_paths(200, 0, |rng| {
            if rng.stream_id() == 7 {
                Err(Error::Sampling("nan".into()))
            } else {
                Ok(vec![rng.stream_id() as f64])
            }
        })
        .unwrap();
        assert_eq!(redrawn, 1);
        assert_eq!(s[7], vec![stream_id(7, 1) as f64]);
        let fatal = run_paths(3, 0, |_| Err(Error::Dimension("x".into())));
        assert!(matches!(fatal, Err(Error::Dimension(_))));
    }

    #[test]
    fn ucos_ensemble_mean_tracks_exact_posterior() {
        let (p, _, _) = inpainting(10, 4, 6);
        let models = ScoreModels::gaussian(&p, &ModalOptions::default()).unwrap();
        let sched = Schedule { n_steps: 200, ..Schedule::default() };
        let cfg = SamplerConfig::new(MethodParams::Ucos, sched, 400, 11);
        let ens = run_ensemble(&cfg, &p, &models).unwrap();
        let post = exact_posterior(&p.prior, p.ops.forward().clone(), p.ops.noise().clone(), p.y()).unwrap();
        let (mean, std) = crate::oracle::ensemble_moments(&ens.samples).unwrap();
        let n = mean.len();
        let within = (0..n)
            .filter(|&j| (mean[j] - post.mean[j]).abs() <= 4.0 * std[j] / (ens.samples.len() as f64).sqrt())
            .count();
        assert!(within as f64 >= 0.95 * n as f64, "{within}/{n}");
    }
}
