//! Turns a [`ProblemConfig`] into operators, prior and synthetic data.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{Noising, PriorKind, ProblemConfig, ProblemKind};
use crate::error::{Error, Result};
use crate::gauss::{sq_exp_covariance, DiagonalCovariance, RngStream, SharedCov};
use crate::io::{read_grid, CallCount, Grid};
use crate::linop::{
    center_hole_mask, dot, gaussian_kernel, norm, validate_adjoint, BlurOperator, CorruptedAdjoint, CountingMap, DenseMap,
    GridShape, MaskOperator, OpCounter, RadonOperator, SharedMap,
};
use crate::samplers::{SamplingProblem, ScoreModels};
use crate::scores::GaussianPrior;
use crate::ucos::UCoSOperators;

/// Stream of the problem seed reserved for the synthetic truth and noise.
const SYNTH_STREAM: u64 = 1 << 50;

/// A configured linear-Gaussian inverse problem.
#[derive(Clone)]
pub struct Problem {
    pub config: ProblemConfig,
    pub shape: GridShape,
    /// Layout used when writing measurements as grid files.
    pub measurement_shape: (usize, usize),
    pub ops: UCoSOperators,
    pub prior: GaussianPrior,
    counter: Arc<OpCounter>,
}

impl Problem {
    pub fn build(config: &ProblemConfig) -> Result<Self> {
        let mut cfg = config.clone();
        cfg.resolve()?;
        let shape = GridShape::new(cfg.rows(), cfg.cols())?;
        let n = shape.len();
        let op = &cfg.operator;
        let (inner, measurement_shape): (SharedMap, (usize, usize)) = match cfg.problem.kind {
            ProblemKind::Inpainting => {
                let keep = match &op.mask_file {
                    Some(p) => {
                        let g = read_grid(&cfg.resolve_path(p))?;
                        if (g.rows, g.cols) != (shape.rows, shape.cols) {
                            return Err(Error::Config(format!("mask file is {}x{}, grid is {shape}", g.rows, g.cols)));
                        }
                        g.data.iter().map(|&v| v != 0.0).collect()
                    }
                    None => center_hole_mask(shape, op.hole.expect("resolved")),
                };
                (Arc::new(MaskOperator::new(shape, keep)?), (shape.rows, shape.cols))
            }
            ProblemKind::Ct => {
                let det = op.detectors.expect("resolved");
                (Arc::new(RadonOperator::new(shape, op.angles, det, op.span_degrees)?), (op.angles, det))
            }
            ProblemKind::Deblur => {
                let (k, side) = gaussian_kernel(op.blur_sigma, op.blur_radius.expect("resolved"))?;
                (Arc::new(BlurOperator::new(shape, k, side, side)?), (shape.rows, shape.cols))
            }
            ProblemKind::Custom => {
                let path = op.matrix_file.as_ref().expect("resolved");
                let g = read_grid(&cfg.resolve_path(path))?;
                if g.cols != n || g.rows == 0 {
                    return Err(Error::Config(format!("forward matrix is {}x{}, but the grid has {n} pixels", g.rows, g.cols)));
                }
                (Arc::new(DenseMap::new(DMatrix::from_row_slice(g.rows, g.cols, &g.data))), (g.rows, 1))
            }
        };
        let inner: SharedMap = if op.corrupt_adjoint { Arc::new(CorruptedAdjoint::new(inner)) } else { inner };
        let counting = CountingMap::new(inner);
        let counter = counting.counter();
        let p = &cfg.prior;
        let s0: SharedCov = match p.kind {
            PriorKind::SquaredExponential => Arc::new(sq_exp_covariance(shape, p.lengthscale, p.amplitude)?),
            PriorKind::White => Arc::new(DiagonalCovariance::isotropic(n, p.amplitude)?),
        };
        let c: SharedCov = match cfg.schedule.noising {
            Noising::Prior => s0.clone(),
            Noising::Identity => Arc::new(DiagonalCovariance::isotropic(n, 1.0)?),
        };
        let sigma = cfg.sigma();
        let m = measurement_shape.0 * measurement_shape.1;
        let gamma: SharedCov = Arc::new(DiagonalCovariance::isotropic(m, sigma * sigma)?);
        let ops = UCoSOperators::new(Arc::new(counting), c, gamma)?.with_cg(cfg.solver.tol, cfg.solver.max_iter);
        let prior = GaussianPrior::new(vec![p.mean; n], s0)?;
        Ok(Self { config: cfg, shape, measurement_shape, ops, prior, counter })
    }

    pub fn kind(&self) -> ProblemKind {
        self.config.problem.kind
    }

    pub fn counter(&self) -> &Arc<OpCounter> {
        &self.counter
    }

    pub fn calls(&self) -> CallCount {
        CallCount::read(&self.counter)
    }

    /// Ground truth drawn from the prior and `y = A x + noise`, both from
    /// the problem seed. Not counted as operator work.
    pub fn synthesize(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let before = self.calls();
        let mut rng = RngStream::new(self.config.problem.seed, SYNTH_STREAM);
        let truth = self.prior.sample(&mut rng);
        let sigma = self.config.sigma();
        let y = self.ops.forward().apply(&truth).into_iter().map(|v| v + sigma * rng.normal()).collect();
        self.uncount(before);
        Ok((truth, y))
    }

    fn uncount(&self, before: CallCount) {
        self.counter.restore(before.forward, before.adjoint);
    }

    pub fn image_grid(&self, x: Vec<f64>) -> Result<Grid> {
        Grid::new(self.shape.rows, self.shape.cols, x)
    }

    pub fn measurement_grid(&self, y: Vec<f64>) -> Result<Grid> {
        Grid::new(self.measurement_shape.0, self.measurement_shape.1, y)
    }

    /// Checks a measurement read from disk against the operator codomain.
    pub fn measurement_from_grid(&self, g: Grid) -> Result<Vec<f64>> {
        if g.data.len() != self.ops.m() {
            return Err(Error::Dimension(format!(
                "measurement has {} values ({}x{}), the forward map produces {}",
                g.data.len(),
                g.rows,
                g.cols,
                self.ops.m()
            )));
        }
        Ok(g.data)
    }

    /// Registers `y` (one forward and one adjoint application).
    pub fn register(&self, y: &[f64]) -> Result<SamplingProblem> {
        SamplingProblem::new(&self.ops, self.prior.clone(), y)
    }

    /// Closed-form Gaussian score models; builds the modal basis when
    /// enabled and applicable.
    pub fn score_models(&self, problem: &SamplingProblem) -> Result<ScoreModels> {
        let opts = self.config.modal.enabled.then(|| self.config.modal_options());
        ScoreModels::gaussian_with(problem, opts.as_ref())
    }

    /// Matrix-free consistency checks of the configured operators.
    pub fn operator_checks(&self, trials: usize, seed: u64) -> Result<Vec<OperatorCheck>> {
        let before = self.calls();
        let a = self.ops.forward();
        let adj = validate_adjoint(a.as_ref(), trials, 1e-10, seed);
        let mut out = vec![OperatorCheck::new("adjoint", adj.max_defect, adj.tolerance)];
        let mut rng = RngStream::new(seed, 0xc4ec);
        let n = self.ops.n();
        let (mut rt, mut sym) = (0.0f64, 0.0f64);
        // A solver failure counts as an infinite defect.
        let worst = |acc: f64, r: Result<f64>| acc.max(r.unwrap_or(f64::INFINITY));
        for k in 0..trials.max(1) {
            let tau = [0.05, 0.5, 2.0][k % 3];
            let v = rng.normals(n);
            let u = rng.normals(n);
            rt = worst(rt, (|| {
                let back = self.ops.apply_rt_inverse(tau, &self.ops.apply_rt(tau, &v)?)?;
                let diff: Vec<f64> = back.iter().zip(&v).map(|(p, q)| p - q).collect();
                Ok(norm(&diff) / norm(&v))
            })());
            sym = worst(sym, (|| {
                let su = self.ops.apply_sigma_t(tau, &u)?;
                let sv = self.ops.apply_sigma_t(tau, &v)?;
                Ok((dot(&u, &sv) - dot(&su, &v)).abs() / (norm(&u) * norm(&sv) + f64::EPSILON))
            })());
        }
        // R_t is refined against its solve-free inverse to the CG tolerance;
        // a wrong adjoint breaks the round trip by O(1).
        out.push(OperatorCheck::new("rt_roundtrip", rt, 1e-6));
        out.push(OperatorCheck::new("sigma_symmetry", sym, 1e-6));
        self.uncount(before);
        Ok(out)
    }

    /// Defaults standing in for parameters the reference setup leaves
    /// unstated; recorded in every manifest.
    pub fn assumed_parameters(&self) -> serde_json::Value {
        let c = &self.config;
        serde_json::json!({
            "noise_sigma": c.sigma(),
            "prior_kind": c.prior.kind,
            "prior_lengthscale": c.prior.lengthscale,
            "prior_amplitude": c.prior.amplitude,
            "noising": c.schedule.noising,
            "hole": c.operator.hole,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorCheck {
    pub name: String,
    pub max_defect: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OperatorCheck {
    fn new(name: &str, max_defect: f64, tolerance: f64) -> Self {
        Self { name: name.into(), max_defect, tolerance, passed: max_defect.is_finite() && max_defect < tolerance }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_grid;

    fn small(kind: ProblemKind, side: usize) -> ProblemConfig {
        let mut c = ProblemConfig::default();
        c.problem.kind = kind;
        c.problem.rows = Some(side);
        c.problem.cols = Some(side);
        c.resolve().unwrap();
        c
    }

    #[test]
    fn builds_every_kind() {
        let p = Problem::build(&small(ProblemKind::Inpainting, 16)).unwrap();
        assert_eq!((p.ops.n(), p.ops.m(), p.config.operator.hole), (256, 256, Some(11)));
        let ct = Problem::build(&small(ProblemKind::Ct, 12)).unwrap();
        assert_eq!(ct.measurement_shape, (8, 17));
        let db = Problem::build(&small(ProblemKind::Deblur, 12)).unwrap();
        assert_eq!(db.ops.m(), 144);

        let dir = tempfile::tempdir().unwrap();
        let a = Grid::new(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        write_grid(&dir.path().join("a.grid"), &a).unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[problem]\nkind = \"custom\"\nrows = 2\ncols = 2\n[operator]\nmatrix_file = \"a.grid\"\n").unwrap();
        let cfg = ProblemConfig::load(&p).unwrap();
        let custom = Problem::build(&cfg).unwrap();
        assert_eq!(custom.ops.forward().apply(&[1.0, 0.0, 0.0, 0.0]), vec![0.0, 4.0, 8.0]);
    }

    #[test]
    fn mask_file_replaces_hole() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Grid::new(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        write_grid(&dir.path().join("m.grid"), &mask).unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[problem]\nrows = 2\n[operator]\nmask_file = \"m.grid\"\n").unwrap();
        let prob = Problem::build(&ProblemConfig::load(&p).unwrap()).unwrap();
        assert_eq!(prob.ops.forward().apply(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn synthesis_is_seeded_and_uncounted() {
        let p = Problem::build(&small(ProblemKind::Inpainting, 8)).unwrap();
        let (t1, y1) = p.synthesize().unwrap();
        let (t2, y2) = p.synthesize().unwrap();
        assert_eq!((&t1, &y1), (&t2, &y2));
        assert_eq!(p.calls(), CallCount::default());
        let sp = p.register(&y2).unwrap();
        assert_eq!(p.calls(), CallCount { forward: 1, adjoint: 1 });
        assert_eq!(sp.y(), &y2[..]);
    }

    #[test]
    fn operator_checks_pass_and_detect_corruption() {
        for kind in [ProblemKind::Inpainting, ProblemKind::Ct, ProblemKind::Deblur] {
            let p = Problem::build(&small(kind, 10)).unwrap();
            let checks = p.operator_checks(4, 1).unwrap();
            assert!(checks.iter().all(|c| c.passed), "{kind}: {checks:?}");
            let mut bad = small(kind, 10);
            bad.operator.corrupt_adjoint = true;
            let checks = Problem::build(&bad).unwrap().operator_checks(4, 1).unwrap();
            assert!(!checks[0].passed, "{kind}: {checks:?}");
        }
    }

    #[test]
    fn measurement_length_checked() {
        let p = Problem::build(&small(ProblemKind::Ct, 8)).unwrap();
        assert!(p.measurement_from_grid(Grid::new(1, 3, vec![0.0; 3]).unwrap()).is_err());
    }
}
