//! Dense verification of the UCoS operator identities.
//!
//! Each check materializes the matrix-free actions of [`UCoSOperators`] on a
//! random dense instance and compares them with a closed form built from the
//! raw matrices. Negative controls run the same checks against deliberately
//! wrong operators and must be flagged.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::gauss::{DenseCovariance, RngStream};
use crate::linop::DenseMap;
use crate::ucos::{expm1, UCoSOperators};

#[derive(Debug, Clone)]
pub struct IdentitySuiteConfig {
    pub instances: usize,
    /// `(n, m)` pairs, cycled over instances.
    pub dims: Vec<(usize, usize)>,
    pub times: Vec<f64>,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IdentitySuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            dims: vec![(4, 2), (8, 4), (16, 8)],
            times: vec![0.01, 0.1, 1.0, 5.0],
            tol: 1e-8,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_defect: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Controls are expected to fail; `passed` then means "was detected".
    pub control: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub instances: usize,
}

impl IdentityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&IdentityCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("identity,kind,max_defect,tolerance,status\n");
        for c in &self.checks {
            s.push_str(&format!(
                "{},{},{:.3e},{:.1e},{}\n",
                c.name,
                if c.control { "control" } else { "identity" },
                c.max_defect,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

pub const IDENTITY_NAMES: [&str; 7] = [
    "whitened-rt-inverse",
    "rt-scaled-inverse",
    "gain-transfer",
    "sigma-precision",
    "mean-map",
    "trace-bound",
    "rt-roundtrip",
];
const CONTROL_NAMES: [&str; 3] = ["mean-map/flipped-rt", "sigma-precision/uncorrected", "trace-bound/flipped-sigma"];

fn cols(n: usize, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        out.set_column(j, &DVector::from_vec(f(&e)?));
        e[j] = 0.0;
    }
    Ok(out)
}

fn rect(rows: usize, ncols: usize, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(rows, ncols);
    let mut e = vec![0.0; ncols];
    for j in 0..ncols {
        e[j] = 1.0;
        out.set_column(j, &DVector::from_vec(f(&e)?));
        e[j] = 0.0;
    }
    Ok(out)
}

fn random_spd(n: usize, rng: &mut RngStream, shift: f64) -> DMatrix<f64> {
    let g = DMatrix::from_vec(n, n, rng.normals(n * n));
    &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

struct Defects([f64; 7], [f64; 3]);

fn run_instance(n: usize, m: usize, zero_a: bool, times: &[f64], rng: &mut RngStream) -> Result<Defects> {
    let a = if zero_a { DMatrix::zeros(m, n) } else { DMatrix::from_vec(m, n, rng.normals(n * m)) };
    let c = random_spd(n, rng, 0.3);
    let g = random_spd(m, rng, 0.2) * 0.5;
    let c_op = DenseCovariance::new(c.clone())?;
    let c_half = c_op.sqrt_matrix().clone();
    let c_inv = c_op.inverse_matrix().clone();
    let g_inv = g.clone().try_inverse().expect("SPD by construction");
    let ops = UCoSOperators::new(Arc::new(DenseMap::new(a.clone())), Arc::new(c_op), Arc::new(DenseCovariance::new(g)?))?
        .with_cg(1e-14, 20 * (n + m));
    let id = DMatrix::<f64>::identity(n, n);
    let data = a.transpose() * &g_inv * &a;

    let mut d = [0.0f64; 7];
    let mut ctl = [f64::INFINITY; 3];
    for &t in times {
        let e = expm1(t);
        let rt = cols(n, |v| ops.apply_rt(t, v))?;
        let rt_inv = cols(n, |v| ops.apply_rt_inverse(t, v))?;
        let sigma = cols(n, |v| ops.apply_sigma_t(t, v))?;

        // Ξ_t = 𝒞^{-1/2} R_t 𝒞^{1/2} against its closed-form inverse.
        let c_half_inv = c_half.clone().try_inverse().expect("SPD");
        let xi = &c_half_inv * &rt * &c_half;
        let xi_inv = &id / e + &c_half * &data * &c_half;
        d[0] = d[0].max(rel(&(&xi * &xi_inv), &id));

        // Ξ'_t = R_t / (e^t - 1) against I + (e^t-1) 𝒞 A*Γ⁻¹A.
        let xi_p_inv = &id + &c * &data * e;
        d[1] = d[1].max(rel(&(&rt / e * &xi_p_inv), &id));

        // (e^t-1) 𝒞 A* C_t⁻¹ = Σ_t A* Γ⁻¹.
        let gain = rect(n, m, |w| {
            let u = ops.apply_ct_inverse(t, w)?;
            Ok(ops.noising().apply(&ops.forward().adjoint_apply(&u)).iter().map(|v| v * e).collect())
        })?;
        let rhs = &sigma * a.transpose() * &g_inv;
        d[2] = d[2].max(rel(&gain, &rhs));

        // Σ_t (A*Γ⁻¹A + (e^t-1)⁻¹ 𝒞⁻¹) = I.
        let prec = &data + &c_inv / e;
        d[3] = d[3].max(rel(&(&sigma * &prec), &id));
        if !zero_a {
            ctl[1] = ctl[1].min(rel(&(&c * e * &prec), &id));
        }

        // m_t(x, y) = R_t ξ_t(x, y).
        let x = rng.normals(n);
        let y = rng.normals(m);
        let reg = ops.with_measurement(&y, &vec![0.0; n])?;
        let direct = DVector::from_vec(reg.m_transform(t, &x, &y)?);
        let xi_v = DVector::from_vec(reg.xi(t, &x)?);
        let scale = direct.amax().max(1.0);
        d[4] = d[4].max((&direct - &rt * &xi_v).amax() / scale);
        let flipped = &id * (2.0 * e) - &rt;
        if !zero_a {
            ctl[0] = ctl[0].min((&direct - flipped * &xi_v).amax() / scale);
        }

        // 0 < tr Σ_t ≤ (e^t-1) tr 𝒞, with equality exactly when A = 0.
        let bound = e * c.trace();
        let tr = sigma.trace();
        let gap = (bound - tr) / bound;
        let violation = if zero_a { gap.abs() } else if tr > 0.0 && gap > 0.0 { 0.0 } else { gap.abs().max(1.0) };
        d[5] = d[5].max(violation);
        let tr_flip = 2.0 * bound - tr;
        let gap_flip = (bound - tr_flip) / bound;
        ctl[2] = ctl[2].min(if zero_a { f64::INFINITY } else if gap_flip > 0.0 { 0.0 } else { gap_flip.abs() });

        d[6] = d[6].max(rel(&(&rt * &rt_inv), &id)).max(rel(&(&rt_inv * &rt), &id));
    }
    Ok(Defects(d, ctl))
}

/// Runs every identity over random dense instances. Every fifth instance has
/// `A = 0`, exercising the equality case of the trace bound.
pub fn identity_suite(cfg: &IdentitySuiteConfig) -> Result<IdentityReport> {
    let mut rng = RngStream::new(cfg.seed, 0x1d);
    let mut worst = [0.0f64; 7];
    let mut detected = [f64::INFINITY; 3];
    for k in 0..cfg.instances {
        let (n, m) = cfg.dims[k % cfg.dims.len()];
        let Defects(d, c) = run_instance(n, m, k % 5 == 4, &cfg.times, &mut rng)?;
        for i in 0..7 {
            worst[i] = worst[i].max(d[i]);
        }
        for i in 0..3 {
            detected[i] = detected[i].min(c[i]);
        }
    }
    let mut checks: Vec<IdentityCheck> = IDENTITY_NAMES
        .iter()
        .zip(worst)
        .map(|(name, defect)| IdentityCheck {
            name: name.to_string(),
            max_defect: defect,
            tolerance: cfg.tol,
            passed: defect <= cfg.tol,
            control: false,
        })
        .collect();
    // A control is detected when even its smallest defect exceeds tol.
    checks.extend(CONTROL_NAMES.iter().zip(detected).map(|(name, defect)| IdentityCheck {
        name: name.to_string(),
        max_defect: defect,
        tolerance: cfg.tol,
        passed: defect > cfg.tol,
        control: true,
    }));
    Ok(IdentityReport { checks, instances: cfg.instances })
}
