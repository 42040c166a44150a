use super::{check_len, GridShape, LinearMap};
use crate::error::{Error, Result};

/// 2D convolution with an odd-sized stencil and replicate-edge boundary.
///
/// Out-of-grid reads are clamped to the nearest edge pixel, so a normalized
/// kernel leaves constant images unchanged. The adjoint scatters each output
/// back through the same clamped index map.
#[derive(Debug, Clone)]
pub struct BlurOperator {
    shape: GridShape,
    kernel: Vec<f64>,
    krows: usize,
    kcols: usize,
}

impl BlurOperator {
    /// `kernel` is row-major with `krows x kcols` entries, both odd.
    pub fn new(shape: GridShape, kernel: Vec<f64>, krows: usize, kcols: usize) -> Result<Self> {
        if krows.is_multiple_of(2) || kcols.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "blur kernel must have odd dimensions, got {krows}x{kcols}"
            )));
        }
        if kernel.len() != krows * kcols {
            return Err(Error::Dimension(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                krows * kcols
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("blur kernel has non-finite entries".into()));
        }
        Ok(Self { shape, kernel, krows, kcols })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    fn clamp(v: isize, hi: usize) -> usize {
        v.clamp(0, hi as isize - 1) as usize
    }

    // Visits every (output index, input index, weight) triple of the stencil.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let hr = (self.krows / 2) as isize;
        let hc = (self.kcols / 2) as isize;
        for r in 0..rows {
            for c in 0..cols {
                let out = r * cols + c;
                for kr in 0..self.krows {
                    let sr = Self::clamp(r as isize + kr as isize - hr, rows);
                    for kc in 0..self.kcols {
                        let w = self.kernel[kr * self.kcols + kc];
                        if w == 0.0 {
                            continue;
                        }
                        let sc = Self::clamp(c as isize + kc as isize - hc, cols);
                        f(out, sr * cols + sc, w);
                    }
                }
            }
        }
    }
}

impl LinearMap for BlurOperator {
    fn domain_dim(&self) -> usize {
        self.shape.len()
    }
    fn codomain_dim(&self) -> usize {
        self.shape.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.shape.len(), "blur apply");
        let mut out = vec![0.0; x.len()];
        self.for_each_tap(|o, i, w| out[o] += w * x[i]);
        out
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.shape.len(), "blur adjoint");
        let mut out = vec![0.0; y.len()];
        self.for_each_tap(|o, i, w| out[i] += w * y[o]);
        out
    }
    fn name(&self) -> String {
        format!("blur({}, kernel {}x{})", self.shape, self.krows, self.kcols)
    }
}

/// Normalized Gaussian stencil of standard deviation `sigma` pixels, truncated
/// at `radius` pixels (side `2*radius+1`).
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<(Vec<f64>, usize)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("kernel sigma must be positive, got {sigma}")));
    }
    let side = 2 * radius + 1;
    let mut k = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let dr = i as f64 - radius as f64;
            let dc = j as f64 - radius as f64;
            k.push((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok((k, side))
}
