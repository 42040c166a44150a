//! Low-rank spectral model of the data term in whitened coordinates.
//!
//! With `w = 𝒞^{-1/2} x`, the data enter every Gaussian UCoS formula through
//! `K = 𝒞^{1/2} A* Γ⁻¹ A 𝒞^{1/2}`. When the prior covariance is a multiple of
//! the noising covariance (`𝒞 = κ S0`) every such formula is a function of
//! `K` alone, so an eigendecomposition `K ≈ V diag(μ) Vᵀ` turns them into
//! per-mode scalar gains. `K` is typically numerically low-rank (smooth
//! priors, partial observations), and modes with `μ ≤ threshold` are
//! treated as unobserved.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{symmetric_eigen, CovarianceOp, RngStream, SharedCov};
use crate::linop::LinearMap;

/// Tuning of the randomized eigensolver.
#[derive(Debug, Clone)]
pub struct ModalOptions {
    /// Modes with `μ ≤ rel_threshold · κ` are dropped. The dropped part
    /// perturbs every per-mode gain `1/(c + μ)` by a relative amount below
    /// `rel_threshold`, because `c ≥ κ` at all times.
    pub rel_threshold: f64,
    pub max_rank: usize,
    pub initial_sketch: usize,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for ModalOptions {
    fn default() -> Self {
        Self {
            rel_threshold: 1e-4,
            max_rank: 2048,
            initial_sketch: 128,
            oversample: 32,
            power_iters: 4,
            seed: 0x5eed,
        }
    }
}

/// `κ` such that `𝒞 = κ S0`, when both are Fourier-diagonal on the same grid.
pub fn proportionality(c: &dyn CovarianceOp, s0: &dyn CovarianceOp) -> Option<f64> {
    let (c, s) = (c.as_spectral()?, s0.as_spectral()?);
    if !c.same_grid(s) {
        return None;
    }
    let (ch, sh) = (c.half_spectrum(), s.half_spectrum());
    let kappa = ch[0] / sh[0];
    ch.iter()
        .zip(sh)
        .all(|(a, b)| (a / b - kappa).abs() <= 1e-10 * kappa)
        .then_some(kappa)
}

/// Eigenpairs of `K` above a threshold, plus the pixel-domain factors used
/// to evaluate the Gaussian task score without further operator calls.
pub struct ModalBasis {
    n: usize,
    kappa: f64,
    threshold: f64,
    mu: Vec<f64>,
    v: DMatrix<f64>,
    u: DMatrix<f64>,
    w: DMatrix<f64>,
    residual_norm: f64,
    forward_calls: u64,
    adjoint_calls: u64,
    c: SharedCov,
}

impl std::fmt::Debug for ModalBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModalBasis")
            .field("n", &self.n)
            .field("rank", &self.mu.len())
            .field("kappa", &self.kappa)
            .field("threshold", &self.threshold)
            .field("residual_norm", &self.residual_norm)
            .finish()
    }
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

impl ModalBasis {
    /// Builds the basis; every application of `a` here is offline work and
    /// is reported by [`Self::operator_calls`].
    pub fn build(
        a: &dyn LinearMap,
        gamma: &dyn CovarianceOp,
        c: SharedCov,
        kappa: f64,
        opts: &ModalOptions,
    ) -> Result<Self> {
        let n = a.domain_dim();
        if c.dim() != n || gamma.dim() != a.codomain_dim() {
            return Err(Error::Dimension("modal basis: inconsistent operator dimensions".into()));
        }
        if !(kappa > 0.0) || !(opts.rel_threshold > 0.0) {
            return Err(Error::InvalidParameter("modal basis needs κ > 0 and a positive threshold".into()));
        }
        let threshold = opts.rel_threshold * kappa;
        let calls = std::sync::atomic::AtomicU64::new(0);
        let k_apply = |x: &[f64]| -> Vec<f64> {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            let s = c.sqrt_apply(x);
            c.sqrt_apply(&a.adjoint_apply(&gamma.solve(&a.apply(&s))))
        };
        let k_block = |x: &DMatrix<f64>| -> DMatrix<f64> {
            let cols: Vec<Vec<f64>> = (0..x.ncols())
                .into_par_iter()
                .map(|j| k_apply(x.column(j).as_slice()))
                .collect();
            DMatrix::from_fn(x.nrows(), cols.len(), |i, j| cols[j][i])
        };

        let max_sketch = opts.max_rank.min(n);
        let mut sketch = opts.initial_sketch.min(max_sketch).max(1);
        let mut power = opts.power_iters;
        loop {
            let mut rng = RngStream::new(opts.seed, sketch as u64);
            let omega = DMatrix::from_vec(n, sketch, rng.normals(n * sketch));
            let mut q = orthonormalize(k_block(&omega));
            for _ in 0..power {
                q = orthonormalize(k_block(&q));
            }
            let kq = k_block(&q);
            let b = q.transpose() * &kq;
            let b = (&b + b.transpose()) * 0.5;
            let (eigenvalues, eigenvectors) = symmetric_eigen(&b)?;
            let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
            order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
            let keep: Vec<usize> =
                order.iter().cloned().filter(|&i| eigenvalues[i] > threshold).collect();
            let count = keep.len();
            let room = sketch < max_sketch;
            if room && count + opts.oversample > sketch {
                sketch = (2 * sketch).min(max_sketch);
                continue;
            }
            let s = DMatrix::from_fn(eigenvectors.nrows(), count, |i, j| eigenvectors[(i, keep[j])]);
            let v = &q * &s;
            let mu: Vec<f64> = keep.iter().map(|&i| eigenvalues[i]).collect();

            let residual_norm = Self::residual_estimate(n, &v, &mu, &k_apply, opts.seed);
            if residual_norm > 10.0 * threshold && room {
                sketch = (2 * sketch).min(max_sketch);
                power += 2;
                continue;
            }
            if residual_norm > 100.0 * threshold && sketch < n {
                return Err(Error::Breakdown(format!(
                    "modal basis residual {residual_norm:.3e} exceeds 100x the threshold {threshold:.3e} at rank {count}"
                )));
            }
            let k_calls = calls.load(std::sync::atomic::Ordering::Relaxed);
            let mut basis = Self {
                n,
                kappa,
                threshold,
                mu,
                v,
                u: DMatrix::zeros(n, count),
                w: DMatrix::zeros(n, count),
                residual_norm,
                forward_calls: k_calls,
                adjoint_calls: k_calls,
                c: c.clone(),
            };
            basis.build_pixel_factors();
            return Ok(basis);
        }
    }

    // Power iteration on E = K - V diag(μ) Vᵀ from a random start.
    fn residual_estimate(
        n: usize,
        v: &DMatrix<f64>,
        mu: &[f64],
        k_apply: &dyn Fn(&[f64]) -> Vec<f64>,
        seed: u64,
    ) -> f64 {
        let mut rng = RngStream::new(seed, 0xe44);
        let mut z = DVector::from_vec(rng.normals(n));
        z /= z.norm();
        let mut est = 0.0;
        for _ in 0..12 {
            let kz = DVector::from_vec(k_apply(z.as_slice()));
            let mut coef = v.tr_mul(&z);
            for (cj, m) in coef.iter_mut().zip(mu) {
                *cj *= m;
            }
            let ez = kz - v * coef;
            est = ez.norm();
            if est == 0.0 {
                break;
            }
            z = ez / est;
        }
        est
    }

    // U = 𝒞^{1/2} V and W = 𝒞^{-1/2} V. The columns of V lie in the range of
    // K = 𝒞^{1/2}(…)𝒞^{1/2}, so the inverse square root does not amplify them.
    fn build_pixel_factors(&mut self) {
        let k = self.mu.len();
        let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .into_par_iter()
            .map(|j| {
                let vj = self.v.column(j);
                (self.c.sqrt_apply(vj.as_slice()), self.c.inv_sqrt_apply(vj.as_slice()))
            })
            .collect();
        self.u = DMatrix::from_fn(self.n, k, |i, j| cols[j].0[i]);
        self.w = DMatrix::from_fn(self.n, k, |i, j| cols[j].1[i]);
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.mu.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Eigenvalues of `K`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }

    /// Estimated spectral norm of `K - V diag(μ) Vᵀ`.
    pub fn residual_norm(&self) -> f64 {
        self.residual_norm
    }

    /// Offline (forward, adjoint) applications spent building the basis.
    pub fn operator_calls(&self) -> (u64, u64) {
        (self.forward_calls, self.adjoint_calls)
    }

    pub fn noising(&self) -> &SharedCov {
        &self.c
    }

    /// `Vᵀ w` for a whitened vector.
    pub fn coefficients(&self, w: &[f64]) -> Vec<f64> {
        self.v.tr_mul(&DVector::from_column_slice(w)).as_slice().to_vec()
    }

    /// `w - V Vᵀ w`.
    pub fn project_out(&self, w: &[f64]) -> Vec<f64> {
        let wv = DVector::from_column_slice(w);
        let coef = self.v.tr_mul(&wv);
        (wv - &self.v * coef).as_slice().to_vec()
    }

    /// Pixel vector `𝒞^{1/2} (V a + P⊥ u)` from modal coefficients `a` and
    /// a whitened vector `u` whose modal part is discarded.
    pub fn synthesize(&self, a: &[f64], u: &[f64]) -> Vec<f64> {
        let mut w = DVector::from_vec(self.project_out(u));
        w += &self.v * DVector::from_column_slice(a);
        self.c.sqrt_apply(w.as_slice())
    }

    /// Whitened vector `V a`.
    pub fn synthesize_whitened(&self, a: &[f64]) -> Vec<f64> {
        (&self.v * DVector::from_column_slice(a)).as_slice().to_vec()
    }

    /// Task score `r(ζ) = 𝒞^{1/2} (c I + K)⁻¹ 𝒞^{-1/2} z`, `z = ζ + κ m0`,
    /// evaluated as `(z - U diag(μ/(c+μ)) Wᵀ z) / c` with no FFTs or
    /// operator calls.
    pub fn task_score(&self, z: &[f64], c: f64) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let mut coef = self.w.tr_mul(&zv);
        for (cj, &m) in coef.iter_mut().zip(&self.mu) {
            *cj *= m / (c + m);
        }
        ((zv - &self.u * coef) / c).as_slice().to_vec()
    }

    /// Largest relative gain error from dropping modes: `threshold / κ`.
    pub fn truncation_bound(&self) -> f64 {
        (self.threshold + self.residual_norm) / self.kappa
    }
}
