//! `ucos` — command-line front end: validation, sampling, the inpainting
//! benchmark, convergence studies, problem generation and ensemble stats.
//!
//! Exit codes: 0 ok, 1 configuration/input error, 2 validation failure,
//! 3 sampling failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ucos_core::bench::{bench_inpainting, rows_csv, tuning_csv, BenchOptions};
use ucos_core::config::{ProblemConfig, ProblemKind};
use ucos_core::convergence::{loglog_slope, strong_error_ladder, LawSweep, SweepPoint};
use ucos_core::io::{prepare_output_dir, read_grid, write_grid, CallCount, Grid, Manifest, PhaseCounts, CSV_SCHEMA_VERSION};
use ucos_core::oracle::{ensemble_stats, exact_posterior_with, identity_suite, IdentitySuiteConfig};
use ucos_core::problem::Problem;
use ucos_core::samplers::{build_drift, run_ensemble, Engine, Method, MethodParams, ModalKind};
use ucos_core::Error;

/// Environment variable holding the worker-thread count.
const THREADS_ENV: &str = "UCOS_THREADS";

#[derive(Parser)]
#[command(name = "ucos", version, about = "Posterior sampling for linear Gaussian inverse problems")]
struct Cli {
    /// Worker threads (overrides UCOS_THREADS; default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the operator identities and the configured operators.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        trials: usize,
    },
    /// Draw a posterior ensemble, one grid file per sample.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Measurement grid; synthesized from the problem seed if omitted.
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides sampler.method.
        #[arg(long)]
        method: Option<Method>,
        /// Overrides sampler.ensemble_size.
        #[arg(short = 'n', long)]
        ensemble_size: Option<usize>,
        /// Overrides sampler.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// stepwise, modal_law or auto; overrides sampler.engine.
        #[arg(long, value_parser = parse_engine)]
        engine: Option<Engine>,
        #[arg(long)]
        force: bool,
    },
    /// Exact posterior plus all five samplers on a synthetic inpainting problem.
    BenchInpainting {
        /// Defaults to the built-in inpainting problem.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// 50 samples everywhere, small pilot runs.
        #[arg(long)]
        quick: bool,
        #[arg(short = 'n', long)]
        ensemble_size: Option<usize>,
        #[arg(long)]
        baseline_n: Option<usize>,
        #[arg(long)]
        pilot_n: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Step-size ladder plus terminal-time and stopping-time sweeps.
    Convergence {
        /// Defaults to a 16x16 inpainting problem.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
        ladder: Vec<usize>,
        #[arg(long, default_value_t = 6400)]
        reference_steps: usize,
        #[arg(long, default_value_t = 64)]
        paths: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.5,0.75,1")]
        t_values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.002,0.005,0.01,0.02,0.05")]
        delta_values: Vec<f64>,
        /// Ensemble size per sweep point.
        #[arg(long, default_value_t = 2000)]
        sweep_n: usize,
        #[arg(long)]
        force: bool,
    },
    /// Write a config with documented defaults plus truth and measurement grids.
    MakeProblem {
        #[arg(long)]
        kind: ProblemKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dense forward matrix (GRID m n) for the custom kind.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Bias and std of an ensemble directory written by `sample`.
    Stats {
        #[arg(long)]
        samples: PathBuf,
        /// Ground-truth grid for the bias column.
        #[arg(long)]
        truth: PathBuf,
        /// Reference (e.g. exact posterior) mean for bias_posterior.
        #[arg(long)]
        reference_mean: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    match s.replace('-', "_").as_str() {
        "stepwise" => Ok(Engine::Stepwise),
        "modal_law" => Ok(Engine::ModalLaw),
        "auto" => Ok(Engine::Auto),
        _ => Err(format!("unknown engine {s:?} (stepwise, modal_law, auto)")),
    }
}

fn engine_name(e: Engine) -> &'static str {
    match e {
        Engine::Stepwise => "stepwise",
        Engine::ModalLaw => "modal_law",
        Engine::Auto => "auto",
    }
}

/// A finished command that still wants a non-zero exit.
struct Outcome(u8);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(Outcome(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
    match core {
        Some(Error::Sampling(_) | Error::Breakdown(_) | Error::NotConverged { .. }) => 3,
        _ => 1,
    }
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting the worker pool")?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> anyhow::Result<Outcome> {
    match cmd {
        Cmd::Validate { config, report, trials } => validate(&config, report.as_deref(), trials),
        Cmd::Sample { config, measurement, out, method, ensemble_size, seed, engine, force } => {
            let mut cfg = ProblemConfig::load(&config)?;
            if let Some(m) = method {
                cfg.sampler.method = m;
            }
            if let Some(n) = ensemble_size {
                cfg.sampler.ensemble_size = n;
            }
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            if let Some(e) = engine {
                cfg.sampler.engine = e;
            }
            cfg.resolve()?;
            sample(&cfg, measurement.as_deref(), &out, force)
        }
        Cmd::BenchInpainting { config, out, quick, ensemble_size, baseline_n, pilot_n, force } => {
            let cfg = load_or_default(config.as_deref(), ProblemKind::Inpainting, None)?;
            let mut opts = BenchOptions::default();
            if quick {
                (opts.n, opts.baseline_n, opts.pilot_n) = (50, 50, 4);
            }
            opts.n = ensemble_size.unwrap_or(opts.n);
            opts.baseline_n = baseline_n.unwrap_or(opts.baseline_n);
            opts.pilot_n = pilot_n.unwrap_or(opts.pilot_n);
            bench(&cfg, &opts, &out, force)
        }
        Cmd::Convergence { config, out, ladder, reference_steps, paths, t_values, delta_values, sweep_n, force } => {
            let cfg = load_or_default(config.as_deref(), ProblemKind::Inpainting, Some(16))?;
            let study = Study { ladder, reference_steps, paths, t_values, delta_values, sweep_n };
            convergence(&cfg, &study, &out, force)
        }
        Cmd::MakeProblem { kind, out, rows, cols, seed, matrix, force } => make_problem(kind, rows, cols, seed, matrix, &out, force),
        Cmd::Stats { samples, truth, reference_mean, out } => stats(&samples, &truth, reference_mean.as_deref(), &out),
    }
}

fn load_or_default(path: Option<&Path>, kind: ProblemKind, side: Option<usize>) -> anyhow::Result<ProblemConfig> {
    Ok(match path {
        Some(p) => ProblemConfig::load(p)?,
        None => {
            let mut c = ProblemConfig::default();
            c.problem.kind = kind;
            c.problem.rows = side;
            c.resolve()?;
            c
        }
    })
}

fn validate(config: &Path, report: Option<&Path>, trials: usize) -> anyhow::Result<Outcome> {
    let cfg = ProblemConfig::load(config)?;
    let problem = Problem::build(&cfg)?;
    let start = Instant::now();
    let ids = identity_suite(&IdentitySuiteConfig::default())?;
    let ops = problem.operator_checks(trials, cfg.problem.seed)?;
    let mut csv = ids.to_csv();
    for c in &ops {
        csv.push_str(&format!(
            "{},operator,{:.3e},{:.1e},{}\n",
            c.name,
            c.max_defect,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        ));
    }
    println!("{:<28} {:<9} {:>11} {:>9}  status", "check", "kind", "max_defect", "tol");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        println!("{:<28} {:<9} {:>11} {:>9}  {}", f[0], f[1], f[2], f[3], f[4]);
    }
    if let Some(path) = report {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    let failed: Vec<String> =
        ids.failures().iter().map(|c| c.name.clone()).chain(ops.iter().filter(|c| !c.passed).map(|c| c.name.clone())).collect();
    println!("{} checks in {:.2}s", ids.checks.len() + ops.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("all checks passed");
        Ok(Outcome(0))
    } else {
        eprintln!("validation failed: {}", failed.join(", "));
        Ok(Outcome(2))
    }
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.grid")
}

fn sample(cfg: &ProblemConfig, measurement: Option<&Path>, out: &Path, force: bool) -> anyhow::Result<Outcome> {
    let hash = cfg.hash();
    prepare_output_dir(out, &hash, force)?;
    let problem = Problem::build(cfg)?;
    let y = match measurement {
        Some(p) => problem.measurement_from_grid(read_grid(p)?)?,
        None => problem.synthesize()?.1,
    };
    let c0 = problem.calls();
    let sp = problem.register(&y)?;
    let c1 = problem.calls();
    let models = problem.score_models(&sp)?;
    let c2 = problem.calls();
    let sc = cfg.sampler_config();
    let ens = run_ensemble(&sc, &sp, &models)?;
    let c3 = problem.calls();

    let mut files = Vec::with_capacity(ens.samples.len());
    for (i, s) in ens.samples.into_iter().enumerate() {
        let name = sample_name(i);
        write_grid(&out.join(&name), &problem.image_grid(s)?)?;
        files.push(name);
    }
    let manifest = Manifest {
        command: "sample".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA_VERSION,
        config_hash: hash,
        problem: cfg.problem.kind.to_string(),
        method: Some(ens.method.to_string()),
        engine: Some(engine_name(ens.engine).into()),
        seed: cfg.sampler.seed,
        ensemble_size: cfg.sampler.ensemble_size,
        n_steps: cfg.schedule.n_steps,
        wall_time: ens.wall_time,
        redrawn: ens.redrawn,
        counters: PhaseCounts { offline: c2.since(c1), measurement: c1.since(c0), sampling: c3.since(c2) },
        assumed: problem.assumed_parameters(),
        files,
    };
    manifest.write(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!(
        "{} samples ({}, {}) in {:.2}s; operator calls: measurement {}/{}, sampling {}/{}",
        manifest.ensemble_size,
        ens.method,
        engine_name(ens.engine),
        ens.wall_time,
        manifest.counters.measurement.forward,
        manifest.counters.measurement.adjoint,
        manifest.counters.sampling.forward,
        manifest.counters.sampling.adjoint
    );
    Ok(Outcome(0))
}

fn bench(cfg: &ProblemConfig, opts: &BenchOptions, out: &Path, force: bool) -> anyhow::Result<Outcome> {
    if cfg.problem.kind != ProblemKind::Inpainting {
        return Err(Error::Config(format!("bench-inpainting needs an inpainting config, got {}", cfg.problem.kind)).into());
    }
    let hash = cfg.hash();
    prepare_output_dir(out, &hash, force)?;
    let problem = Problem::build(cfg)?;
    let start = Instant::now();
    let rep = bench_inpainting(&problem, opts)?;
    let wall = start.elapsed().as_secs_f64();
    fs::write(out.join("bench.csv"), rows_csv(&rep.rows))?;
    fs::write(out.join("tuning.csv"), tuning_csv(&rep.tuning))?;
    write_grid(&out.join("truth.grid"), &problem.image_grid(rep.truth.clone())?)?;
    write_grid(&out.join("measurement.grid"), &problem.measurement_grid(rep.y.clone())?)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let sampling = rep.rows.iter().fold(CallCount::default(), |acc, r| CallCount {
        forward: acc.forward + r.forward_calls,
        adjoint: acc.adjoint + r.adjoint_calls,
    });
    Manifest {
        command: "bench-inpainting".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA_VERSION,
        config_hash: hash,
        problem: cfg.problem.kind.to_string(),
        method: None,
        engine: None,
        seed: cfg.sampler.seed,
        ensemble_size: opts.n,
        n_steps: cfg.schedule.n_steps,
        wall_time: wall,
        redrawn: 0,
        counters: PhaseCounts { offline: rep.offline, measurement: rep.measurement, sampling },
        assumed: problem.assumed_parameters(),
        files: ["bench.csv", "tuning.csv", "truth.grid", "measurement.grid", "config.toml"].map(String::from).to_vec(),
    }
    .write(out)?;
    println!("{:<12} {:>7} {:>9} {:>9} {:>9} {:>8} {:>9}", "method", "samples", "bias", "bias_post", "std", "time", "A calls");
    for r in &rep.rows {
        println!(
            "{:<12} {:>7} {:>9.4} {:>9.4} {:>9.4} {:>7.2}s {:>9}  {}",
            r.method, r.samples, r.bias, r.bias_posterior, r.std, r.wall_time, r.forward_calls, r.param
        );
    }
    Ok(Outcome(0))
}

struct Study {
    ladder: Vec<usize>,
    reference_steps: usize,
    paths: usize,
    t_values: Vec<f64>,
    delta_values: Vec<f64>,
    sweep_n: usize,
}

fn sweep_csv(points: &[SweepPoint], column: &str, second_moment: f64) -> String {
    let mut s = format!("{column},effective_time,mean_sq,var_l1,law_total,mc_mean_error,init_bound\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            p.value,
            p.effective,
            p.discrepancy.mean_sq,
            p.discrepancy.var_l1,
            p.discrepancy.total(),
            p.mc_mean_error,
            (-p.effective).exp() * second_moment
        ));
    }
    s
}

fn convergence(cfg: &ProblemConfig, study: &Study, out: &Path, force: bool) -> anyhow::Result<Outcome> {
    let hash = cfg.hash();
    prepare_output_dir(out, &hash, force)?;
    let mut cfg = cfg.clone();
    // The sweeps need the exact chain law, which needs the modal basis.
    cfg.modal.enabled = true;
    let problem = Problem::build(&cfg)?;
    let start = Instant::now();
    let (_, y) = problem.synthesize()?;
    let sp = problem.register(&y)?;
    let models = problem.score_models(&sp)?;
    let Some(basis) = models.modal.clone() else {
        bail!(Error::Config("convergence sweeps need the noising covariance proportional to the prior (schedule.noising = \"prior\")".into()));
    };
    let sched = cfg.schedule()?;
    let drift = build_drift(&MethodParams::Ucos, &sp, &models)?;
    let ladder = strong_error_ladder(
        drift.as_ref(),
        sp.ops.noising().as_ref(),
        sched,
        &study.ladder,
        study.reference_steps,
        study.paths,
        cfg.sampler.seed,
    )?;
    let dts: Vec<f64> = ladder.iter().map(|p| p.dt).collect();
    let errs: Vec<f64> = ladder.iter().map(|p| p.strong_error).collect();
    let slope = loglog_slope(&dts, &errs);
    let mut csv = String::from("n_steps,dt,strong_error,std_error\n");
    for p in &ladder {
        csv.push_str(&format!("{},{:.6e},{:.6e},{:.6e}\n", p.n_steps, p.dt, p.strong_error, p.std_error));
    }
    fs::write(out.join("ladder.csv"), csv)?;

    let ops = &problem.ops;
    let post = exact_posterior_with(&problem.prior, ops.forward().clone(), ops.noise().clone(), &y, ops.cg_tol(), ops.cg_max_iter())?;
    let sweep = LawSweep {
        basis,
        ops: &sp.ops,
        prior_mean: &sp.prior.mean,
        posterior_mean: &post.mean,
        kind: ModalKind::Ucos,
        base: sched,
        ensemble_size: study.sweep_n,
        seed: cfg.sampler.seed,
    };
    // Per-pixel E|X|² under the prior.
    let second_moment = cfg.prior.amplitude + cfg.prior.mean * cfg.prior.mean;
    let t_pts = sweep.terminal_times(&study.t_values)?;
    let d_pts = sweep.stopping_times(&study.delta_values)?;
    fs::write(out.join("terminal_time.csv"), sweep_csv(&t_pts, "t_final", second_moment))?;
    fs::write(out.join("stopping_time.csv"), sweep_csv(&d_pts, "delta", second_moment))?;
    let summary = serde_json::json!({
        "ladder_slope": slope,
        "ladder": study.ladder,
        "reference_steps": study.reference_steps,
        "paths": study.paths,
    });
    fs::write(out.join("slopes.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Manifest {
        command: "convergence".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA_VERSION,
        config_hash: hash,
        problem: cfg.problem.kind.to_string(),
        method: Some(Method::Ucos.to_string()),
        engine: None,
        seed: cfg.sampler.seed,
        ensemble_size: study.sweep_n,
        n_steps: cfg.schedule.n_steps,
        wall_time: start.elapsed().as_secs_f64(),
        redrawn: 0,
        counters: PhaseCounts::default(),
        assumed: problem.assumed_parameters(),
        files: ["ladder.csv", "terminal_time.csv", "stopping_time.csv", "slopes.json"].map(String::from).to_vec(),
    }
    .write(out)?;
    println!("strong-error slope over dt: {slope:.3}");
    for p in &ladder {
        println!("  n_steps {:>5}  dt {:.3e}  error {:.4e} ± {:.1e}", p.n_steps, p.dt, p.strong_error, p.std_error);
    }
    Ok(Outcome(0))
}

fn make_problem(
    kind: ProblemKind,
    rows: Option<usize>,
    cols: Option<usize>,
    seed: Option<u64>,
    matrix: Option<PathBuf>,
    out: &Path,
    force: bool,
) -> anyhow::Result<Outcome> {
    let mut cfg = ProblemConfig::default();
    cfg.problem.kind = kind;
    cfg.problem.rows = rows;
    cfg.problem.cols = cols;
    if let Some(s) = seed {
        cfg.problem.seed = s;
    }
    if let Some(m) = matrix {
        let abs = fs::canonicalize(&m).map_err(|e| Error::Config(format!("matrix file {}: {e}", m.display())))?;
        let g = read_grid(&abs)?;
        // The custom image is a column vector of the matrix's column count.
        cfg.problem.rows = Some(g.cols);
        cfg.problem.cols = Some(1);
        cfg.operator.matrix_file = Some(abs);
    }
    cfg.resolve()?;
    let path = out.join("config.toml");
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    fs::create_dir_all(out)?;
    let problem = Problem::build(&cfg)?;
    let (truth, y) = problem.synthesize()?;
    fs::write(&path, cfg.to_toml())?;
    write_grid(&out.join("truth.grid"), &problem.image_grid(truth)?)?;
    write_grid(&out.join("measurement.grid"), &problem.measurement_grid(y)?)?;
    println!(
        "{} problem {}x{} -> {} (measurement {}x{})",
        kind,
        cfg.rows(),
        cfg.cols(),
        out.display(),
        problem.measurement_shape.0,
        problem.measurement_shape.1
    );
    Ok(Outcome(0))
}

fn stats(samples: &Path, truth: &Path, reference: Option<&Path>, out: &Path) -> anyhow::Result<Outcome> {
    let manifest = Manifest::read(samples)?;
    let grids: Vec<Grid> = manifest.files.iter().map(|f| read_grid(&samples.join(f))).collect::<Result<_, _>>()?;
    let Some(first) = grids.first() else {
        bail!(Error::Config(format!("{} lists no samples", samples.display())));
    };
    let (rows, cols) = (first.rows, first.cols);
    let truth = read_grid(truth)?;
    let reference = reference.map(read_grid).transpose()?;
    for g in grids.iter().chain([&truth]).chain(reference.as_ref()) {
        if (g.rows, g.cols) != (rows, cols) {
            bail!(Error::Dimension(format!("grid {}x{} does not match the {rows}x{cols} samples", g.rows, g.cols)));
        }
    }
    let data: Vec<Vec<f64>> = grids.into_iter().map(|g| g.data).collect();
    let st = ensemble_stats(&data, manifest.wall_time, &truth.data, reference.as_ref().map(|g| g.data.as_slice()))?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("method,samples,bias,bias_posterior,std,wall_time\n");
    let bp = st.bias_posterior.map(|b| format!("{b:.6}")).unwrap_or_default();
    csv.push_str(&format!(
        "{},{},{:.6},{},{:.6},{:.3}\n",
        manifest.method.as_deref().unwrap_or(""),
        st.samples,
        st.bias,
        bp,
        st.std,
        st.wall_time
    ));
    fs::write(out.join("stats.csv"), csv)?;
    write_grid(&out.join("bias.grid"), &Grid::new(rows, cols, st.per_pixel_bias)?)?;
    write_grid(&out.join("std.grid"), &Grid::new(rows, cols, st.per_pixel_std)?)?;
    println!("samples {}  bias {:.4}  std {:.4}{}", st.samples, st.bias, st.std, if bp.is_empty() { String::new() } else { format!("  bias_posterior {bp}") });
    Ok(Outcome(0))
}
