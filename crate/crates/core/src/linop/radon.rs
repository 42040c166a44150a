use super::{check_len, GridShape, LinearMap};
use crate::error::{Error, Result};

/// Parallel-beam Radon transform with bilinear pixel interpolation.
///
/// Pixel `(r, c)` has its centre at `(c + 0.5 - cols/2, rows/2 - r - 0.5)` in
/// pixel units, image values are zero outside the grid. Angle `k` is
/// `k * span / n_angles`. Detector `d` sits at offset
/// `(d + 0.5 - n_det/2) * cols / n_det` along `(cos θ, sin θ)`, and its ray
/// runs along `(-sin θ, cos θ)`, sampled every half pixel. The forward map is
/// a sparse linear combination of pixel values, and the adjoint scatters the
/// same weights back, so it is the exact discrete transpose.
#[derive(Debug, Clone)]
pub struct RadonOperator {
    shape: GridShape,
    n_angles: usize,
    n_detectors: usize,
    span_degrees: f64,
    // Per (angle, detector) row: (pixel index, weight) pairs, precomputed.
    rows_ptr: Vec<usize>,
    taps: Vec<(u32, f64)>,
}

const STEP: f64 = 0.5;

impl RadonOperator {
    pub fn new(
        shape: GridShape,
        n_angles: usize,
        n_detectors: usize,
        span_degrees: f64,
    ) -> Result<Self> {
        if n_angles == 0 || n_detectors == 0 {
            return Err(Error::InvalidParameter(
                "radon operator needs at least one angle and one detector".into(),
            ));
        }
        if !(span_degrees > 0.0 && span_degrees <= 180.0) {
            return Err(Error::InvalidParameter(format!(
                "angular span must lie in (0, 180] degrees, got {span_degrees}"
            )));
        }
        let mut op = Self {
            shape,
            n_angles,
            n_detectors,
            span_degrees,
            rows_ptr: vec![0],
            taps: Vec::new(),
        };
        op.build();
        Ok(op)
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn angles_degrees(&self) -> Vec<f64> {
        (0..self.n_angles)
            .map(|k| k as f64 * self.span_degrees / self.n_angles as f64)
            .collect()
    }

    fn build(&mut self) {
        let rows = self.shape.rows as f64;
        let cols = self.shape.cols as f64;
        let spacing = cols / self.n_detectors as f64;
        // Rays extend past the inscribed circle of the grid on both sides.
        let half_len = 0.5 * (rows * rows + cols * cols).sqrt() + 1.0;
        let n_samples = (2.0 * half_len / STEP).ceil() as i64;
        let mut scratch: Vec<(u32, f64)> = Vec::new();
        for theta_deg in self.angles_degrees() {
            let theta = theta_deg.to_radians();
            let (s, c) = theta.sin_cos();
            for d in 0..self.n_detectors {
                let offset = (d as f64 + 0.5 - self.n_detectors as f64 / 2.0) * spacing;
                scratch.clear();
                for k in -n_samples / 2..=n_samples / 2 {
                    let u = k as f64 * STEP;
                    let px = offset * c - u * s;
                    let py = offset * s + u * c;
                    self.bilinear_taps(px, py, STEP, &mut scratch);
                }
                scratch.sort_unstable_by_key(|t| t.0);
                let mut last: Option<u32> = None;
                for &(idx, w) in scratch.iter() {
                    if last == Some(idx) {
                        self.taps.last_mut().unwrap().1 += w;
                    } else {
                        self.taps.push((idx, w));
                        last = Some(idx);
                    }
                }
                self.rows_ptr.push(self.taps.len());
            }
        }
    }

    // Bilinear weights of the point (px, py) (centred pixel coordinates).
    fn bilinear_taps(&self, px: f64, py: f64, w: f64, out: &mut Vec<(u32, f64)>) {
        let rows = self.shape.rows as i64;
        let cols = self.shape.cols as i64;
        // Continuous column/row coordinates where pixel centres are integers.
        let fc = px + self.shape.cols as f64 / 2.0 - 0.5;
        let fr = self.shape.rows as f64 / 2.0 - py - 0.5;
        let c0 = fc.floor();
        let r0 = fr.floor();
        let ac = fc - c0;
        let ar = fr - r0;
        let (c0, r0) = (c0 as i64, r0 as i64);
        for (dr, wr) in [(0, 1.0 - ar), (1, ar)] {
            let r = r0 + dr;
            if r < 0 || r >= rows || wr == 0.0 {
                continue;
            }
            for (dc, wc) in [(0, 1.0 - ac), (1, ac)] {
                let c = c0 + dc;
                if c < 0 || c >= cols || wc == 0.0 {
                    continue;
                }
                out.push(((r * cols + c) as u32, w * wr * wc));
            }
        }
    }
}

impl LinearMap for RadonOperator {
    fn domain_dim(&self) -> usize {
        self.shape.len()
    }
    fn codomain_dim(&self) -> usize {
        self.n_angles * self.n_detectors
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.shape.len(), "radon apply");
        (0..self.codomain_dim())
            .map(|row| {
                self.taps[self.rows_ptr[row]..self.rows_ptr[row + 1]]
                    .iter()
                    .map(|&(i, w)| w * x[i as usize])
                    .sum()
            })
            .collect()
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.codomain_dim(), "radon adjoint");
        let mut out = vec![0.0; self.shape.len()];
        for (row, &v) in y.iter().enumerate() {
            for &(i, w) in &self.taps[self.rows_ptr[row]..self.rows_ptr[row + 1]] {
                out[i as usize] += w * v;
            }
        }
        out
    }
    fn name(&self) -> String {
        format!(
            "radon({}, {} angles over {}°, {} detectors)",
            self.shape, self.n_angles, self.span_degrees, self.n_detectors
        )
    }
}
