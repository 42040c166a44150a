//! Matrix-free linear maps.
//!
//! Every forward model is reached only through [`LinearMap::apply`] and
//! [`LinearMap::adjoint_apply`]. Operators are immutable once built and can be
//! shared across worker threads.

mod blur;
mod counting;
mod mask;
mod radon;

pub use blur::{gaussian_kernel, BlurOperator};
pub use counting::{CorruptedAdjoint, CountingMap, OpCounter};
pub use mask::{center_hole_mask, MaskOperator};
pub use radon::RadonOperator;

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gauss::RngStream;

/// Pixel grid of an image, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid shape must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    /// Flattened dimension `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// A linear map `R^n -> R^m` known only through its action and the action of
/// its adjoint.
pub trait LinearMap: Send + Sync {
    fn domain_dim(&self) -> usize;
    fn codomain_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64>;

    fn name(&self) -> String {
        "linear map".to_string()
    }
}

pub type SharedMap = Arc<dyn LinearMap>;

/// `x -> x` on `R^n`.
#[derive(Debug, Clone)]
pub struct Identity {
    dim: usize,
}

pub fn identity(n: usize) -> Identity {
    Identity { dim: n }
}

impl LinearMap for Identity {
    fn domain_dim(&self) -> usize {
        self.dim
    }
    fn codomain_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.dim, "identity apply");
        x.to_vec()
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.dim, "identity adjoint");
        y.to_vec()
    }
    fn name(&self) -> String {
        format!("identity({})", self.dim)
    }
}

/// The zero map `R^n -> R^m`: a measurement that carries no information.
#[derive(Debug, Clone)]
pub struct ZeroMap {
    n: usize,
    m: usize,
}

impl ZeroMap {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }
}

impl LinearMap for ZeroMap {
    fn domain_dim(&self) -> usize {
        self.n
    }
    fn codomain_dim(&self) -> usize {
        self.m
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.n, "zero apply");
        vec![0.0; self.m]
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.m, "zero adjoint");
        vec![0.0; self.n]
    }
    fn name(&self) -> String {
        format!("zero({}->{})", self.n, self.m)
    }
}

/// `a * op`.
pub struct Scaled {
    factor: f64,
    inner: SharedMap,
}

pub fn scale(factor: f64, op: SharedMap) -> Scaled {
    Scaled { factor, inner: op }
}

impl LinearMap for Scaled {
    fn domain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.inner.codomain_dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.inner.apply(x);
        out.iter_mut().for_each(|v| *v *= self.factor);
        out
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.inner.adjoint_apply(y);
        out.iter_mut().for_each(|v| *v *= self.factor);
        out
    }
    fn name(&self) -> String {
        format!("{} * {}", self.factor, self.inner.name())
    }
}

/// `outer ∘ inner`, with adjoint `inner* ∘ outer*`.
pub struct Composed {
    outer: SharedMap,
    inner: SharedMap,
}

pub fn compose(outer: SharedMap, inner: SharedMap) -> Result<Composed> {
    if outer.domain_dim() != inner.codomain_dim() {
        return Err(Error::Dimension(format!(
            "cannot compose {} (domain {}) after {} (codomain {})",
            outer.name(),
            outer.domain_dim(),
            inner.name(),
            inner.codomain_dim()
        )));
    }
    Ok(Composed { outer, inner })
}

impl LinearMap for Composed {
    fn domain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.outer.codomain_dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.outer.apply(&self.inner.apply(x))
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        self.inner.adjoint_apply(&self.outer.adjoint_apply(y))
    }
    fn name(&self) -> String {
        format!("{} ∘ {}", self.outer.name(), self.inner.name())
    }
}

/// The adjoint of a map, viewed as a map in its own right.
pub struct Adjoint {
    inner: SharedMap,
}

pub fn adjoint(op: SharedMap) -> Adjoint {
    Adjoint { inner: op }
}

impl LinearMap for Adjoint {
    fn domain_dim(&self) -> usize {
        self.inner.codomain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.inner.adjoint_apply(x)
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        self.inner.apply(y)
    }
    fn name(&self) -> String {
        format!("({})*", self.inner.name())
    }
}

/// An explicit matrix. Used for small random test instances and for
/// user-supplied forward models; the shipped imaging operators never build one.
#[derive(Debug, Clone)]
pub struct DenseMap {
    matrix: DMatrix<f64>,
}

impl DenseMap {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearMap for DenseMap {
    fn domain_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn codomain_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.matrix.ncols(), "dense apply");
        let v = nalgebra::DVectorView::from_slice(x, x.len());
        (&self.matrix * v).as_slice().to_vec()
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.matrix.nrows(), "dense adjoint");
        let v = nalgebra::DVectorView::from_slice(y, y.len());
        self.matrix.tr_mul(&v).as_slice().to_vec()
    }
    fn name(&self) -> String {
        format!("dense({}x{})", self.matrix.nrows(), self.matrix.ncols())
    }
}

/// Outcome of a randomized adjoint-consistency probe.
#[derive(Debug, Clone)]
pub struct AdjointReport {
    pub operator: String,
    pub trials: usize,
    pub max_defect: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `<A u, w> = <u, A* w>` on random Gaussian probes.
///
/// The defect of one probe is `|<Au,w> - <u,A*w>| / (|Au| |w| + eps)`; the
/// report carries the maximum over all trials.
pub fn validate_adjoint(op: &dyn LinearMap, trials: usize, tol: f64, seed: u64) -> AdjointReport {
    let trials = trials.max(1);
    let mut rng = RngStream::new(seed, 0xad01);
    let mut max_defect = 0.0f64;
    for _ in 0..trials {
        let u = rng.normals(op.domain_dim());
        let w = rng.normals(op.codomain_dim());
        let au = op.apply(&u);
        let atw = op.adjoint_apply(&w);
        let lhs = dot(&au, &w);
        let rhs = dot(&u, &atw);
        let scale = norm(&au) * norm(&w) + f64::EPSILON;
        let defect = (lhs - rhs).abs() / scale;
        max_defect = max_defect.max(if defect.is_finite() { defect } else { f64::INFINITY });
    }
    AdjointReport {
        operator: op.name(),
        trials,
        max_defect,
        tolerance: tol,
        passed: max_defect < tol,
    }
}

#[inline]
pub(crate) fn check_len(v: &[f64], expected: usize, what: &str) {
    assert_eq!(
        v.len(),
        expected,
        "{what}: vector has length {} but the operator expects {expected}",
        v.len()
    );
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
