//! A trainable reference `r_θ`: one affine map per time node, fitted by
//! least squares on training pairs and interpolated linearly in time.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::ScoreModel;
use crate::diffusion::TrainingPair;
use crate::error::{Error, Result};

/// Dense per-node fits need `n² + n` parameters each.
pub const TABULATED_MAX_DIM: usize = 256;

const MAGIC: &str = "TABLIN";

/// `r(ζ, t) = W_k ζ + b_k` at node `t_k`, linear in `t` between nodes and
/// clamped outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedLinearModel {
    n: usize,
    times: Vec<f64>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

impl TabulatedLinearModel {
    pub fn new(times: Vec<f64>, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != weights.len() || times.len() != biases.len() {
            return Err(Error::InvalidParameter("tabulated model needs one (W, b) per time node".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("time nodes must increase strictly".into()));
        }
        let n = biases[0].len();
        if n > TABULATED_MAX_DIM {
            return Err(Error::DenseGuard(format!("tabulated model dimension {n} exceeds {TABULATED_MAX_DIM}")));
        }
        if weights.iter().any(|w| w.nrows() != n || w.ncols() != n) || biases.iter().any(|b| b.len() != n) {
            return Err(Error::Dimension("inconsistent tabulated model blocks".into()));
        }
        Ok(Self { n, times, weights, biases })
    }

    /// Least-squares fit per node: minimizes `Σ ‖W ζ + b - x0‖² + ridge ‖W‖²`
    /// over the pairs assigned to that node.
    pub fn fit(nodes: &[(f64, Vec<TrainingPair>)], ridge: f64) -> Result<Self> {
        let mut times = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (tau, pairs) in nodes {
            let first = pairs.first().ok_or_else(|| Error::InvalidParameter(format!("no pairs at node {tau}")))?;
            let n = first.x0.len();
            if n > TABULATED_MAX_DIM {
                return Err(Error::DenseGuard(format!("tabulated model dimension {n} exceeds {TABULATED_MAX_DIM}")));
            }
            // Normal equations in the augmented variable [ζ; 1].
            let mut g = DMatrix::<f64>::zeros(n + 1, n + 1);
            let mut h = DMatrix::<f64>::zeros(n + 1, n);
            let mut u = DVector::<f64>::zeros(n + 1);
            for p in pairs {
                if p.zeta.len() != n || p.x0.len() != n {
                    return Err(Error::Dimension("training pair dimension mismatch".into()));
                }
                u.rows_mut(0, n).copy_from_slice(&p.zeta);
                u[n] = 1.0;
                g.ger(1.0, &u, &u, 1.0);
                h.ger(1.0, &u, &DVector::from_column_slice(&p.x0), 1.0);
            }
            for i in 0..n {
                g[(i, i)] += ridge;
            }
            let sol = g
                .cholesky()
                .ok_or_else(|| Error::Breakdown(format!("singular normal equations at node {tau}; add ridge or pairs")))?
                .solve(&h);
            times.push(*tau);
            weights.push(sol.rows(0, n).transpose());
            biases.push(sol.row(n).transpose());
        }
        Self::new(times, weights, biases)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn node_eval(&self, k: usize, zeta: &DVector<f64>) -> DVector<f64> {
        &self.weights[k] * zeta + &self.biases[k]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MAGIC} {} {}", self.n, self.times.len())?;
        let mut put = |v: f64| f.write_all(&v.to_le_bytes());
        for &t in &self.times {
            put(t)?;
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..self.n {
                for j in 0..self.n {
                    put(w[(i, j)])?;
                }
            }
            for &v in b.iter() {
                put(v)?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format(format!("{}: missing header", path.display())))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(Error::Format(format!("{}: bad header {header:?}", path.display())));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s:?}")));
        let (n, k) = (parse(parts[1])?, parse(parts[2])?);
        if n > TABULATED_MAX_DIM {
            return Err(Error::DenseGuard(format!("tabulated model dimension {n} exceeds {TABULATED_MAX_DIM}")));
        }
        let body = &bytes[nl + 1..];
        let expected = 8 * (k + k * (n * n + n));
        if body.len() != expected {
            return Err(Error::Format(format!("{}: expected {expected} payload bytes, found {}", path.display(), body.len())));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut next = || vals.next().expect("length checked");
        let times: Vec<f64> = (0..k).map(|_| next()).collect();
        let mut weights = Vec::with_capacity(k);
        let mut biases = Vec::with_capacity(k);
        for _ in 0..k {
            let mut w = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    w[(i, j)] = next();
                }
            }
            weights.push(w);
            biases.push(DVector::from_iterator(n, (0..n).map(|_| next())));
        }
        Self::new(times, weights, biases)
    }
}

impl ScoreModel for TabulatedLinearModel {
    fn evaluate(&self, zeta: &[f64], t: f64) -> Result<Vec<f64>> {
        if zeta.len() != self.n {
            return Err(Error::Dimension(format!("expected input of length {}, got {}", self.n, zeta.len())));
        }
        let z = DVector::from_column_slice(zeta);
        let last = self.times.len() - 1;
        let out = if t <= self.times[0] {
            self.node_eval(0, &z)
        } else if t >= self.times[last] {
            self.node_eval(last, &z)
        } else {
            let k = self.times.partition_point(|&s| s <= t) - 1;
            let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
            self.node_eval(k, &z) * (1.0 - w) + self.node_eval(k + 1, &z) * w
        };
        Ok(out.as_slice().to_vec())
    }

    fn name(&self) -> String {
        "tabulated-linear".into()
    }

    fn describe(&self) -> String {
        format!("tabulated-linear (n = {}, {} time nodes)", self.n, self.times.len())
    }
}
