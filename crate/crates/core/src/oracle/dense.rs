use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::CovarianceOp;
use crate::linop::LinearMap;
use crate::scores::GaussianPrior;
use crate::ucos::expm1;

/// Largest `rows · cols` a dense materialization may have.
pub const DENSE_BUILD_LIMIT: usize = 1 << 21;
/// Largest state dimension for the dense conditional-score oracle (a 32x32
/// image; each evaluation then costs a few 1024x1024 inversions).
pub const DENSE_SCORE_MAX_DIM: usize = 1024;

fn materialize(rows: usize, cols: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<DMatrix<f64>> {
    if rows.saturating_mul(cols) > DENSE_BUILD_LIMIT {
        return Err(Error::DenseGuard(format!("{rows}x{cols} exceeds {DENSE_BUILD_LIMIT} entries")));
    }
    let mut out = DMatrix::zeros(rows, cols);
    let mut e = vec![0.0; cols];
    for j in 0..cols {
        e[j] = 1.0;
        out.set_column(j, &DVector::from_vec(f(&e)));
        e[j] = 0.0;
    }
    Ok(out)
}

/// Column `j` is `op.apply(e_j)`.
pub fn dense_build(op: &dyn LinearMap) -> Result<DMatrix<f64>> {
    materialize(op.codomain_dim(), op.domain_dim(), |v| op.apply(v))
}

pub fn dense_build_cov(op: &dyn CovarianceOp) -> Result<DMatrix<f64>> {
    materialize(op.dim(), op.dim(), |v| op.apply(v))
}

/// A linear-Gaussian problem held as explicit matrices.
#[derive(Debug, Clone)]
pub struct DenseGaussianProblem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub s0: DMatrix<f64>,
    pub m0: DVector<f64>,
}

impl DenseGaussianProblem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, gamma: DMatrix<f64>, s0: DMatrix<f64>, m0: DVector<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        if n > DENSE_SCORE_MAX_DIM {
            return Err(Error::DenseGuard(format!("dense oracle limited to n ≤ {DENSE_SCORE_MAX_DIM}, got {n}")));
        }
        if c.shape() != (n, n) || s0.shape() != (n, n) || gamma.shape() != (m, m) || m0.len() != n {
            return Err(Error::Dimension("dense problem blocks have inconsistent shapes".into()));
        }
        Ok(Self { a, c, gamma, s0, m0 })
    }

    /// Materializes matrix-free operators.
    pub fn from_operators(
        a: &dyn LinearMap,
        c: &dyn CovarianceOp,
        gamma: &dyn CovarianceOp,
        prior: &GaussianPrior,
    ) -> Result<Self> {
        if a.domain_dim() > DENSE_SCORE_MAX_DIM {
            return Err(Error::DenseGuard(format!(
                "dense oracle limited to n ≤ {DENSE_SCORE_MAX_DIM}, got {}",
                a.domain_dim()
            )));
        }
        Self::new(
            dense_build(a)?,
            dense_build_cov(c)?,
            dense_build_cov(gamma)?,
            dense_build_cov(prior.cov.as_ref())?,
            DVector::from_column_slice(&prior.mean),
        )
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }
}

fn inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.try_inverse().ok_or_else(|| Error::Breakdown(format!("{what} is singular")))
}

/// Weighted conditional score `𝒞 ∇ log q_t(x | y)` from the marginalization
///
/// `q_t(x|y) ∝ exp(-½ |y - e^{t/2} A x|²_{C_t}) · (p0 ∗ N(0, Σ_t))(m_t(x, y))`
///
/// with `Σ_t = ((e^t-1)⁻¹ 𝒞⁻¹ + A*Γ⁻¹A)⁻¹` and
/// `m_t = Σ_t ((e^t-1)⁻¹ 𝒞⁻¹ e^{t/2} x + A*Γ⁻¹ y)`. Every inverse is a dense
/// factorization; no code is shared with the conjugacy or UCoS routes.
pub fn dense_conditional_score(p: &DenseGaussianProblem, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = p.n();
    if x.len() != n || y.len() != p.a.nrows() {
        return Err(Error::Dimension("dense score: x or y has the wrong length".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("dense score needs t > 0, got {t}")));
    }
    let e = expm1(t);
    let h = (0.5 * t).exp();
    let x = DVector::from_column_slice(x);
    let y = DVector::from_column_slice(y);
    let c_inv = inverse(p.c.clone(), "noising covariance")?;
    let g_inv = inverse(p.gamma.clone(), "noise covariance")?;
    let ct = &p.a * &p.c * p.a.transpose() * e + &p.gamma;
    let ct_inv = inverse(ct, "C_t")?;
    let sigma = inverse(&c_inv / e + p.a.transpose() * &g_inv * &p.a, "Σ_t precision")?;
    let dm_dx = &sigma * &c_inv * (h / e);
    let m = &dm_dx * &x + &sigma * p.a.transpose() * &g_inv * &y;
    // ∇ of -½ |y - h A x|²_{C_t}
    let misfit_grad = p.a.transpose() * &ct_inv * (&y - &p.a * &x * h) * h;
    let conv = inverse(&p.s0 + &sigma, "S0 + Σ_t")?;
    let conv_grad = -(conv * (&m - &p.m0));
    let grad = misfit_grad + dm_dx.transpose() * conv_grad;
    Ok((&p.c * grad).as_slice().to_vec())
}

/// Unnormalized `log q_t(x | y)` on the same route, for finite differences.
pub fn dense_conditional_log_density(p: &DenseGaussianProblem, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let e = expm1(t);
    let h = (0.5 * t).exp();
    let x = DVector::from_column_slice(x);
    let y = DVector::from_column_slice(y);
    let c_inv = inverse(p.c.clone(), "noising covariance")?;
    let g_inv = inverse(p.gamma.clone(), "noise covariance")?;
    let ct_inv = inverse(&p.a * &p.c * p.a.transpose() * e + &p.gamma, "C_t")?;
    let sigma = inverse(&c_inv / e + p.a.transpose() * &g_inv * &p.a, "Σ_t precision")?;
    let m = &sigma * (&c_inv * &x * (h / e) + p.a.transpose() * &g_inv * &y);
    let r = &y - &p.a * &x * h;
    let d = &m - &p.m0;
    let conv_inv = inverse(&p.s0 + &sigma, "S0 + Σ_t")?;
    Ok(-0.5 * r.dot(&(&ct_inv * &r)) - 0.5 * d.dot(&(conv_inv * &d)))
}
