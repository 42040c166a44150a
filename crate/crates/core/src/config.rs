//! Problem configuration: a sectioned `key = value` file (TOML syntax, flat
//! sections only). Every key is documented in [`KEYS`]; `docs/CONFIG.md` is
//! generated from that table.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::samplers::{Engine, GammaRule, Method, MethodParams, SamplerConfig};
use crate::scores::ModalOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    Inpainting,
    Ct,
    Deblur,
    Custom,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [ProblemKind::Inpainting, ProblemKind::Ct, ProblemKind::Deblur, ProblemKind::Custom];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Inpainting => "inpainting",
            ProblemKind::Ct => "ct",
            ProblemKind::Deblur => "deblur",
            ProblemKind::Custom => "custom",
        }
    }

    fn default_side(&self) -> Option<usize> {
        match self {
            ProblemKind::Inpainting => Some(64),
            ProblemKind::Ct | ProblemKind::Deblur => Some(32),
            ProblemKind::Custom => None,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown problem kind {s:?} (inpainting, ct, deblur, custom)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    SquaredExponential,
    White,
}

/// Covariance `𝒞` of the forward noising process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Noising {
    /// `𝒞 = S0`, the prior covariance.
    #[default]
    Prior,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaRuleKind {
    #[default]
    EqualNorm,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    /// Seed of the synthetic ground truth and measurement noise.
    pub seed: u64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self { kind: ProblemKind::Inpainting, rows: None, cols: None, seed: 2024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    pub hole: Option<usize>,
    pub mask_file: Option<PathBuf>,
    pub angles: usize,
    pub span_degrees: f64,
    pub detectors: Option<usize>,
    pub blur_sigma: f64,
    pub blur_radius: Option<usize>,
    pub matrix_file: Option<PathBuf>,
    pub corrupt_adjoint: bool,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            hole: None,
            mask_file: None,
            angles: 8,
            span_degrees: 45.0,
            detectors: None,
            blur_sigma: 2.0,
            blur_radius: None,
            matrix_file: None,
            corrupt_adjoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub lengthscale: f64,
    pub amplitude: f64,
    pub mean: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { kind: PriorKind::SquaredExponential, lengthscale: 0.15, amplitude: 1.0, mean: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_final: f64,
    pub delta: f64,
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub noising: Noising,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            t_final: s.t_final,
            delta: s.delta,
            n_steps: s.n_steps,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            noising: Noising::Prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub method: Method,
    pub ensemble_size: usize,
    pub seed: u64,
    pub engine: Engine,
    pub xi: f64,
    pub lambda_mix: f64,
    pub cg_tol: f64,
    pub gamma_rule: GammaRuleKind,
    pub gamma_band: f64,
    pub gamma: Option<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            method: Method::Ucos,
            ensemble_size: 1000,
            seed: 7,
            engine: Engine::Auto,
            xi: 1.0,
            lambda_mix: 0.5,
            cg_tol: 1e-8,
            gamma_rule: GammaRuleKind::EqualNorm,
            gamma_band: 0.05,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalSection {
    pub enabled: bool,
    pub rel_threshold: f64,
    pub max_rank: usize,
    pub seed: u64,
}

impl Default for ModalSection {
    fn default() -> Self {
        let o = ModalOptions::default();
        Self { enabled: true, rel_threshold: o.rel_threshold, max_rank: o.max_rank, seed: o.seed }
    }
}

/// A complete problem description. Relative file paths are resolved
/// against the directory of the file the config was loaded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: ProblemSection,
    pub operator: OperatorSection,
    pub prior: PriorSection,
    pub noise: NoiseSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub solver: SolverSection,
    pub modal: ModalSection,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Default hole side as a fraction of the smaller grid side.
pub const HOLE_FRACTION: f64 = 0.6875;
/// Default noise level as a fraction of the prior RMS `√amplitude`.
pub const NOISE_FRACTION: f64 = 0.05;

impl ProblemConfig {
    /// Documented defaults for `kind`, fully resolved.
    pub fn for_kind(kind: ProblemKind) -> Result<Self> {
        let mut c = Self::default();
        c.problem.kind = kind;
        c.resolve()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.base_dir = path.parent().map(Path::to_path_buf);
        c.check_files()?;
        Ok(c)
    }

    /// Serialized form with every key present.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Fills kind-dependent defaults and validates ranges.
    pub fn resolve(&mut self) -> Result<()> {
        let kind = self.problem.kind;
        let side = kind.default_side();
        let rows = self.problem.rows.or(self.problem.cols).or(side);
        let cols = self.problem.cols.or(self.problem.rows).or(side);
        let (rows, cols) = match (rows, cols) {
            (Some(r), Some(c)) if r > 0 && c > 0 => (r, c),
            _ => return Err(Error::Config(format!("problem.rows and problem.cols must be positive for kind {kind}"))),
        };
        self.problem.rows = Some(rows);
        self.problem.cols = Some(cols);
        let op = &mut self.operator;
        match kind {
            ProblemKind::Inpainting => {
                if op.hole.is_none() && op.mask_file.is_none() {
                    op.hole = Some((HOLE_FRACTION * rows.min(cols) as f64).round() as usize);
                }
                if op.hole.is_some() && op.mask_file.is_some() {
                    return Err(Error::Config("operator.hole and operator.mask_file are mutually exclusive".into()));
                }
            }
            ProblemKind::Ct => {
                if op.angles == 0 || !(op.span_degrees > 0.0 && op.span_degrees <= 180.0) {
                    return Err(Error::Config("ct needs operator.angles ≥ 1 and 0 < operator.span_degrees ≤ 180".into()));
                }
                op.detectors.get_or_insert((std::f64::consts::SQRT_2 * rows.max(cols) as f64).ceil() as usize);
            }
            ProblemKind::Deblur => {
                if !(op.blur_sigma > 0.0) {
                    return Err(Error::Config("operator.blur_sigma must be positive".into()));
                }
                op.blur_radius.get_or_insert((3.0 * op.blur_sigma).ceil() as usize);
            }
            ProblemKind::Custom => {
                if op.matrix_file.is_none() {
                    return Err(Error::Config("custom problems need operator.matrix_file".into()));
                }
            }
        }
        let p = &self.prior;
        if !(p.lengthscale > 0.0 && p.amplitude > 0.0 && p.mean.is_finite()) {
            return Err(Error::Config("prior.lengthscale and prior.amplitude must be positive".into()));
        }
        let sigma = *self.noise.sigma.get_or_insert(NOISE_FRACTION * p.amplitude.sqrt());
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise.sigma must be positive, got {sigma}")));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.sampler;
        if s.ensemble_size == 0 {
            return Err(Error::Config("sampler.ensemble_size must be at least 1".into()));
        }
        if s.gamma_rule == GammaRuleKind::Fixed && !s.gamma.is_some_and(|g| g > 0.0) {
            return Err(Error::Config("sampler.gamma_rule = \"fixed\" needs a positive sampler.gamma".into()));
        }
        self.sampler_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.solver.tol > 0.0 && self.solver.max_iter > 0) {
            return Err(Error::Config("solver.tol and solver.max_iter must be positive".into()));
        }
        if !(self.modal.rel_threshold > 0.0 && self.modal.max_rank > 0) {
            return Err(Error::Config("modal.rel_threshold and modal.max_rank must be positive".into()));
        }
        Ok(())
    }

    /// Referenced files must exist.
    pub fn check_files(&self) -> Result<()> {
        for p in [&self.operator.mask_file, &self.operator.matrix_file].into_iter().flatten() {
            let full = self.resolve_path(p);
            if !full.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.problem.rows.expect("resolved")
    }

    pub fn cols(&self) -> usize {
        self.problem.cols.expect("resolved")
    }

    pub fn sigma(&self) -> f64 {
        self.noise.sigma.expect("resolved")
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        Schedule::new(s.t_final, s.delta, s.n_steps, s.beta_min, s.beta_max)
    }

    pub fn method_params(&self, method: Method) -> MethodParams {
        let s = &self.sampler;
        match method {
            Method::Ucos => MethodParams::Ucos,
            Method::Conditional => MethodParams::Conditional,
            Method::SdeAld => MethodParams::SdeAld {
                gamma_rule: match s.gamma_rule {
                    GammaRuleKind::EqualNorm => GammaRule::EqualNorm { band: s.gamma_band },
                    GammaRuleKind::Fixed => GammaRule::Fixed { gamma: s.gamma.unwrap_or(f64::NAN) },
                },
            },
            Method::Dps => MethodParams::Dps { xi: s.xi },
            Method::Proj => MethodParams::Proj { lambda_mix: s.lambda_mix, cg_tol: s.cg_tol },
        }
    }

    /// Sampler settings for the configured method.
    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        let sched = Schedule {
            t_final: self.schedule.t_final,
            delta: self.schedule.delta,
            n_steps: self.schedule.n_steps,
            beta_min: self.schedule.beta_min,
            beta_max: self.schedule.beta_max,
        };
        SamplerConfig::new(self.method_params(s.method), sched, s.ensemble_size, s.seed).with_engine(s.engine)
    }

    pub fn modal_options(&self) -> ModalOptions {
        ModalOptions {
            rel_threshold: self.modal.rel_threshold,
            max_rank: self.modal.max_rank,
            seed: self.modal.seed,
            ..ModalOptions::default()
        }
    }
}

/// One documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { section, key, default, doc }
}

pub const KEYS: &[KeyDoc] = &[
    k("problem", "kind", "\"inpainting\"", "One of `inpainting`, `ct`, `deblur`, `custom`."),
    k("problem", "rows", "64 (inpainting), 32 (ct, deblur)", "Grid rows. Required for `custom`; defaults to `cols` when only that is given."),
    k("problem", "cols", "same as rows", "Grid columns."),
    k("problem", "seed", "2024", "Seed of the synthetic ground truth and measurement noise."),
    k("operator", "hole", "round(0.6875 * min(rows, cols))", "Inpainting: side in pixels of the centred square hole of unobserved pixels."),
    k("operator", "mask_file", "unset", "Inpainting: grid file with 1 for observed and 0 for missing pixels; replaces `hole`."),
    k("operator", "angles", "8", "CT: number of projection angles."),
    k("operator", "span_degrees", "45.0", "CT: angular span of the projections, in degrees."),
    k("operator", "detectors", "ceil(sqrt(2) * max(rows, cols))", "CT: detector bins per angle."),
    k("operator", "blur_sigma", "2.0", "Deblur: standard deviation of the Gaussian kernel in pixels."),
    k("operator", "blur_radius", "ceil(3 * blur_sigma)", "Deblur: kernel truncation radius in pixels."),
    k("operator", "matrix_file", "unset", "Custom: grid file holding the dense m x n forward matrix."),
    k("operator", "corrupt_adjoint", "false", "Negative control: cyclically shift the adjoint's output by one entry, so `validate` must fail."),
    k("prior", "kind", "\"squared_exponential\"", "`squared_exponential` (periodic, Fourier-diagonal) or `white`."),
    k("prior", "lengthscale", "0.15", "Correlation length as a fraction of the domain width."),
    k("prior", "amplitude", "1.0", "Pixel variance of the prior."),
    k("prior", "mean", "0.0", "Constant prior mean."),
    k("noise", "sigma", "0.05 * sqrt(amplitude)", "Standard deviation of the white measurement noise."),
    k("schedule", "t_final", "1.0", "Terminal diffusion time T."),
    k("schedule", "delta", "0.005", "Early-stopping time; sampling integrates from T down to delta."),
    k("schedule", "n_steps", "1000", "Uniform Euler-Maruyama steps."),
    k("schedule", "beta_min", "0.05", "Speed at t = 0."),
    k("schedule", "beta_max", "10.0", "Speed at t = 1; the speed is linear in t."),
    k("schedule", "noising", "\"prior\"", "Covariance of the noising process: `prior` (the prior covariance) or `identity`."),
    k("sampler", "method", "\"ucos\"", "`ucos`, `conditional`, `sde_ald`, `dps` or `proj`."),
    k("sampler", "ensemble_size", "1000", "Number of posterior samples."),
    k("sampler", "seed", "7", "Seed of the sampling noise; path i uses stream i."),
    k("sampler", "engine", "\"auto\"", "`stepwise`, `modal_law` (exact law of the same chain; ucos and conditional only) or `auto`."),
    k("sampler", "xi", "1.0", "DPS step-size scale."),
    k("sampler", "lambda_mix", "0.5", "Proj data-consistency weight in [0, 1]."),
    k("sampler", "cg_tol", "1e-8", "Proj CG relative tolerance."),
    k("sampler", "gamma_rule", "\"equal_norm\"", "SDE ALD: `equal_norm` (per-step bisection) or `fixed`."),
    k("sampler", "gamma_band", "0.05", "SDE ALD: relative band accepted by the equal-norm bisection."),
    k("sampler", "gamma", "unset", "SDE ALD: the value used by `gamma_rule = \"fixed\"`."),
    k("solver", "tol", "1e-10", "Relative tolerance of the measurement-space CG solves."),
    k("solver", "max_iter", "2000", "Iteration cap of those solves."),
    k("modal", "enabled", "true", "Build the low-rank modal basis when the noising covariance is proportional to the prior covariance."),
    k("modal", "rel_threshold", "1e-4", "Modes with eigenvalue below rel_threshold * kappa are dropped."),
    k("modal", "max_rank", "2048", "Upper bound on the number of retained modes."),
    k("modal", "seed", "24301", "Seed of the randomized eigensolver."),
];

/// Markdown reference page for every key.
pub fn reference_markdown() -> String {
    let mut s = String::from(
        "# Configuration reference\n\n\
         Configs are flat `key = value` files with `[section]` headers (TOML syntax).\n\
         Unknown keys are rejected. Relative paths are resolved against the config's directory.\n\
         This page is generated from the key table in `crates/core/src/config.rs`.\n",
    );
    let mut current = "";
    for d in KEYS {
        if d.section != current {
            current = d.section;
            s.push_str(&format!("\n## [{current}]\n\n| key | default | meaning |\n|---|---|---|\n"));
        }
        s.push_str(&format!("| `{}` | {} | {} |\n", d.key, d.default, d.doc));
    }
    s
}
