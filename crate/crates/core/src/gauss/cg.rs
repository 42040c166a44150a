use crate::error::{Error, Result};
use crate::linop::dot;

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual `|Ax - b| / |b|` (recursively updated).
    pub residual: f64,
    pub converged: bool,
}

impl CgSolution {
    /// Turns a non-converged solve into an error.
    pub fn into_result(self) -> Result<Vec<f64>> {
        if self.converged {
            Ok(self.x)
        } else {
            Err(Error::NotConverged { iterations: self.iterations, residual: self.residual })
        }
    }
}

pub const DEFAULT_CG_TOL: f64 = 1e-8;

/// Default iteration cap `10 * sqrt(n)` (at least 10).
pub fn default_max_iter(n: usize) -> usize {
    ((10.0 * (n as f64).sqrt()).ceil() as usize).max(10)
}

/// Preconditioned conjugate gradients for an SPD action.
///
/// Stops when `|r| <= tol * |b|`. If `max_iter` is reached first the best
/// iterate is returned with `converged = false`. NaN or infinite quantities
/// (typically an indefinite action) raise [`Error::Breakdown`].
pub fn cg_solve<F>(
    action: F,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    precond: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<CgSolution>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("CG tolerance must be positive, got {tol}")));
    }
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if !bnorm.is_finite() {
        return Err(Error::Breakdown("right-hand side is not finite".into()));
    }
    if bnorm == 0.0 {
        return Ok(CgSolution { x: vec![0.0; n], iterations: 0, residual: 0.0, converged: true });
    }
    let apply_m = |r: &[f64]| match precond {
        Some(p) => p(r),
        None => r.to_vec(),
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = apply_m(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;

    for it in 1..=max_iter {
        let ap = action(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            if !pap.is_finite() {
                return Err(Error::Breakdown(format!("non-finite curvature at iteration {it}")));
            }
            return Err(Error::Breakdown(format!(
                "non-positive curvature {pap:.3e} at iteration {it}: action is not SPD"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if !rel.is_finite() {
            return Err(Error::Breakdown(format!("non-finite residual at iteration {it}")));
        }
        if rel <= tol {
            return Ok(CgSolution { x, iterations: it, residual: rel, converged: true });
        }
        z = apply_m(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgSolution { x, iterations: max_iter, residual: rel, converged: false })
}
