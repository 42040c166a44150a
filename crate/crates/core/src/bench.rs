//! The inpainting benchmark: exact posterior plus all five samplers on one
//! synthetic measurement, with grid-searched DPS and Proj parameters.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauss::RngStream;
use crate::io::CallCount;
use crate::oracle::{ensemble_stats, exact_posterior_with, GaussianPosterior, StatsReport};
use crate::problem::Problem;
use crate::samplers::{run_ensemble, run_paths, Engine, Method, MethodParams, SamplerConfig, SamplingProblem, ScoreModels};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Ensemble size for the exact posterior, UCoS and Conditional.
    pub n: usize,
    /// Ensemble size for SDE ALD, DPS and Proj, which apply the forward map
    /// at every step.
    pub baseline_n: usize,
    /// Paths per grid point when tuning DPS and Proj.
    pub pilot_n: usize,
    pub xi_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// Engine for UCoS and Conditional.
    pub engine: Engine,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n: 1000,
            baseline_n: 100,
            pilot_n: 16,
            xi_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0],
            lambda_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            methods: Method::ALL.to_vec(),
            engine: Engine::Auto,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub engine: String,
    pub samples: usize,
    pub param: String,
    /// Against the ground-truth image.
    pub bias: f64,
    /// Against the exact posterior mean.
    pub bias_posterior: f64,
    pub std: f64,
    pub wall_time: f64,
    pub forward_calls: u64,
    pub adjoint_calls: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub method: String,
    pub param: f64,
    pub bias_posterior: f64,
    pub std: f64,
}

pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub tuning: Vec<TuneRow>,
    pub truth: Vec<f64>,
    pub y: Vec<f64>,
    /// Score-model setup (the modal basis), independent of `y`.
    pub offline: CallCount,
    pub measurement: CallCount,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub const BENCH_CSV_HEADER: &str = "method,engine,samples,param,bias,bias_posterior,std,wall_time,forward_calls,adjoint_calls";
pub const TUNE_CSV_HEADER: &str = "method,param,bias_posterior,std";

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3},{},{}\n",
            r.method, r.engine, r.samples, r.param, r.bias, r.bias_posterior, r.std, r.wall_time, r.forward_calls, r.adjoint_calls
        ));
    }
    s
}

pub fn tuning_csv(rows: &[TuneRow]) -> String {
    let mut s = format!("{TUNE_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.method, r.param, r.bias_posterior, r.std));
    }
    s
}

fn engine_name(e: Engine) -> &'static str {
    match e {
        Engine::Stepwise => "stepwise",
        Engine::ModalLaw => "modal_law",
        Engine::Auto => "auto",
    }
}

struct Ctx<'a> {
    problem: &'a Problem,
    sp: SamplingProblem,
    models: ScoreModels,
    post: GaussianPosterior,
    truth: Vec<f64>,
}

impl Ctx<'_> {
    fn stats(&self, samples: &[Vec<f64>], wall: f64) -> Result<StatsReport> {
        ensemble_stats(samples, wall, &self.truth, Some(&self.post.mean))
    }

    fn run(&self, params: MethodParams, n: usize, engine: Engine) -> Result<(BenchRow, StatsReport)> {
        let cfg = &self.problem.config;
        let sc = SamplerConfig::new(params, cfg.sampler_config().schedule, n, cfg.sampler.seed).with_engine(engine);
        let before = self.problem.calls();
        let ens = run_ensemble(&sc, &self.sp, &self.models)?;
        let calls = self.problem.calls().since(before);
        let st = self.stats(&ens.samples, ens.wall_time)?;
        let param = match params {
            MethodParams::Dps { xi } => format!("xi={xi}"),
            MethodParams::Proj { lambda_mix, .. } => format!("lambda={lambda_mix}"),
            _ => String::new(),
        };
        let row = BenchRow {
            method: params.method().to_string(),
            engine: engine_name(ens.engine).into(),
            samples: n,
            param,
            bias: st.bias,
            bias_posterior: st.bias_posterior.unwrap_or(f64::NAN),
            std: st.std,
            wall_time: ens.wall_time,
            forward_calls: calls.forward,
            adjoint_calls: calls.adjoint,
        };
        Ok((row, st))
    }

    /// Grid point with the smallest bias against the exact posterior mean.
    fn tune(&self, grid: &[f64], pilot: usize, make: impl Fn(f64) -> MethodParams, log: &mut Vec<TuneRow>) -> Result<f64> {
        let mut best: Option<(f64, f64)> = None;
        for &v in grid {
            let params = make(v);
            let (bias, std) = match self.run(params, pilot, Engine::Stepwise) {
                Ok((_, st)) => (st.bias_posterior.unwrap_or(f64::INFINITY), st.std),
                // A grid point whose paths blow up is simply unusable.
                Err(Error::Sampling(_)) => (f64::INFINITY, f64::NAN),
                Err(e) => return Err(e),
            };
            log.push(TuneRow { method: params.method().to_string(), param: v, bias_posterior: bias, std });
            if best.is_none_or(|(_, b)| bias < b) {
                best = Some((v, bias));
            }
        }
        match best {
            Some((v, b)) if b.is_finite() => Ok(v),
            _ => Err(Error::Sampling("every grid point blew up".into())),
        }
    }
}

/// Runs the benchmark on the configured problem. The problem must have a
/// Gaussian prior (always the case for configured problems).
pub fn bench_inpainting(problem: &Problem, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.n == 0 || opts.baseline_n == 0 || opts.pilot_n == 0 {
        return Err(Error::InvalidParameter("ensemble sizes must be positive".into()));
    }
    let (truth, y) = problem.synthesize()?;
    let c0 = problem.calls();
    let sp = problem.register(&y)?;
    let c1 = problem.calls();
    let models = problem.score_models(&sp)?;
    let c2 = problem.calls();
    let ops = &problem.ops;
    let post = exact_posterior_with(&problem.prior, ops.forward().clone(), ops.noise().clone(), &y, ops.cg_tol(), ops.cg_max_iter())?;
    let ctx = Ctx { problem, sp, models, post, truth };
    let mut rows = Vec::new();
    let mut tuning = Vec::new();

    // Exact posterior draws, one CG solve each.
    let before = problem.calls();
    let start = std::time::Instant::now();
    let seed = problem.config.sampler.seed;
    let (samples, _) = run_paths(opts.n, seed ^ 0x7275_6500, |rng: &mut RngStream| ctx.post.sample(rng))?;
    let wall = start.elapsed().as_secs_f64();
    let calls = problem.calls().since(before);
    let st = ctx.stats(&samples, wall)?;
    rows.push(BenchRow {
        method: "true".into(),
        engine: "exact".into(),
        samples: opts.n,
        param: String::new(),
        bias: st.bias,
        bias_posterior: st.bias_posterior.unwrap_or(f64::NAN),
        std: st.std,
        wall_time: wall,
        forward_calls: calls.forward,
        adjoint_calls: calls.adjoint,
    });

    let cfg = &problem.config;
    for &m in &opts.methods {
        let row = match m {
            Method::Ucos | Method::Conditional => ctx.run(MethodParams::default_for(m), opts.n, opts.engine)?.0,
            Method::SdeAld => ctx.run(cfg.method_params(m), opts.baseline_n, Engine::Stepwise)?.0,
            Method::Dps => {
                let xi = ctx.tune(&opts.xi_grid, opts.pilot_n, |xi| MethodParams::Dps { xi }, &mut tuning)?;
                ctx.run(MethodParams::Dps { xi }, opts.baseline_n, Engine::Stepwise)?.0
            }
            Method::Proj => {
                let tol = cfg.sampler.cg_tol;
                let lam = ctx.tune(&opts.lambda_grid, opts.pilot_n, |l| MethodParams::Proj { lambda_mix: l, cg_tol: tol }, &mut tuning)?;
                ctx.run(MethodParams::Proj { lambda_mix: lam, cg_tol: tol }, opts.baseline_n, Engine::Stepwise)?.0
            }
        };
        rows.push(row);
    }
    Ok(BenchReport {
        rows,
        tuning,
        truth: ctx.truth,
        y,
        offline: c2.since(c1),
        measurement: c1.since(c0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ProblemConfig, ProblemKind};

    #[test]
    fn quick_bench_schema_and_counts() {
        let mut cfg = ProblemConfig::default();
        cfg.problem.kind = ProblemKind::Inpainting;
        cfg.problem.rows = Some(10);
        cfg.schedule.n_steps = 40;
        cfg.resolve().unwrap();
        let p = Problem::build(&cfg).unwrap();
        let opts = BenchOptions { n: 20, baseline_n: 4, pilot_n: 2, xi_grid: vec![0.1, 1.0], lambda_grid: vec![0.5, 1.0], ..Default::default() };
        let rep = bench_inpainting(&p, &opts).unwrap();
        let names: Vec<&str> = rep.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["true", "sde_ald", "dps", "proj", "conditional", "ucos"]);
        assert_eq!(rep.measurement, CallCount { forward: 1, adjoint: 1 });
        let ucos = rep.row("ucos").unwrap();
        assert_eq!((ucos.forward_calls, ucos.adjoint_calls), (0, 0));
        let dps = rep.row("dps").unwrap();
        assert_eq!((dps.forward_calls, dps.adjoint_calls), (4 * 40, 4 * 40));
        assert_eq!(rep.tuning.len(), 4);
        let csv = rows_csv(&rep.rows);
        assert!(csv.starts_with(BENCH_CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }
}
