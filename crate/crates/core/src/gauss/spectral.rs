use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::CovarianceOp;
use crate::error::{Error, Result};
use crate::linop::GridShape;

/// Real 2D DFT on a grid: row-wise real FFT followed by column FFTs over the
/// `cols/2 + 1` retained frequencies. Coefficients are kept column-major
/// (`k * rows + r`) so the column passes run on contiguous chunks.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.rows, self.cols)
    }
}

impl Fft2 {
    pub fn new(shape: GridShape) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self {
            rows: shape.rows,
            cols: shape.cols,
            r2c: rp.plan_fft_forward(shape.cols),
            c2r: rp.plan_fft_inverse(shape.cols),
            col_fwd: cp.plan_fft_forward(shape.rows),
            col_inv: cp.plan_fft_inverse(shape.rows),
        }
    }

    /// Number of retained coefficients, `rows * (cols/2 + 1)`.
    pub fn half_len(&self) -> usize {
        self.rows * (self.cols / 2 + 1)
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let (rows, cols) = (self.rows, self.cols);
        let hc = cols / 2 + 1;
        let mut row_in = vec![0.0; cols];
        let mut row_out = vec![Complex64::new(0.0, 0.0); hc];
        let mut spec = vec![Complex64::new(0.0, 0.0); rows * hc];
        for r in 0..rows {
            row_in.copy_from_slice(&x[r * cols..(r + 1) * cols]);
            self.r2c
                .process(&mut row_in, &mut row_out)
                .expect("row transform length is fixed at planning");
            for k in 0..hc {
                spec[k * rows + r] = row_out[k];
            }
        }
        if rows > 1 {
            self.col_fwd.process(&mut spec);
        }
        spec
    }

    /// Unnormalized inverse transform; consumes the coefficient buffer.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let hc = cols / 2 + 1;
        if rows > 1 {
            self.col_inv.process(&mut spec);
        }
        let mut row_in = vec![Complex64::new(0.0, 0.0); hc];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for k in 0..hc {
                row_in[k] = spec[k * rows + r];
            }
            // Hermitian symmetry forces these to be real; drop round-off.
            row_in[0].im = 0.0;
            if cols % 2 == 0 {
                row_in[hc - 1].im = 0.0;
            }
            self.c2r
                .process(&mut row_in, &mut out[r * cols..(r + 1) * cols])
                .expect("imaginary parts of self-conjugate bins were cleared");
        }
        out
    }

    /// `x -> T* diag(mult) T x` with `mult` in the retained (column-major
    /// half) layout.
    pub fn apply_multiplier(&self, x: &[f64], mult: &[f64]) -> Vec<f64> {
        let n = (self.rows * self.cols) as f64;
        let mut spec = self.forward(x);
        for (c, m) in spec.iter_mut().zip(mult) {
            *c *= m / n;
        }
        self.inverse(spec)
    }
}

/// Covariance diagonal in the orthonormal Fourier basis of a periodic grid.
///
/// Eigenvalues are given per frequency `(r, c)` in row-major order over the
/// full grid and must be Hermitian-symmetric (`λ(r,c) = λ(-r,-c)`), which is
/// what makes the operator real.
#[derive(Clone, Debug)]
pub struct SpectralCovariance {
    shape: GridShape,
    fft: Fft2,
    // Eigenvalues in the retained half layout.
    half: Vec<f64>,
    half_sqrt: Vec<f64>,
    trace: f64,
    max_eig: f64,
}

impl SpectralCovariance {
    pub fn new(shape: GridShape, spectrum: &[f64]) -> Result<Self> {
        let (rows, cols) = (shape.rows, shape.cols);
        if spectrum.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "spectrum has {} entries, grid {shape} needs {}",
                spectrum.len(),
                shape.len()
            )));
        }
        if let Some(bad) = spectrum.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spectral covariance needs positive finite eigenvalues, found {bad}"
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                let a = spectrum[r * cols + c];
                let b = spectrum[((rows - r) % rows) * cols + (cols - c) % cols];
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                    return Err(Error::InvalidParameter(format!(
                        "spectrum is not Hermitian-symmetric at frequency ({r}, {c})"
                    )));
                }
            }
        }
        let hc = cols / 2 + 1;
        let mut half = vec![0.0; rows * hc];
        for k in 0..hc {
            for r in 0..rows {
                half[k * rows + r] = spectrum[r * cols + k];
            }
        }
        let half_sqrt = half.iter().map(|v| v.sqrt()).collect();
        let trace = spectrum.iter().sum();
        let max_eig = spectrum.iter().cloned().fold(0.0, f64::max);
        Ok(Self { shape, fft: Fft2::new(shape), half, half_sqrt, trace, max_eig })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// Eigenvalues in the retained half layout used by [`Fft2::apply_multiplier`].
    pub fn half_spectrum(&self) -> &[f64] {
        &self.half
    }

    /// Full row-major eigenvalue grid.
    pub fn spectrum(&self) -> Vec<f64> {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let hc = cols / 2 + 1;
        let mut full = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                full[r * cols + c] = if c < hc {
                    self.half[c * rows + r]
                } else {
                    self.half[(cols - c) * rows + (rows - r) % rows]
                };
            }
        }
        full
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eig
    }

    /// `f(Λ)` applied to `x`.
    pub fn apply_fn(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mult: Vec<f64> = self.half.iter().map(|&l| f(l)).collect();
        self.fft.apply_multiplier(x, &mult)
    }

    pub fn apply_multiplier(&self, x: &[f64], mult: &[f64]) -> Vec<f64> {
        self.fft.apply_multiplier(x, mult)
    }

    /// True when `other` is diagonal in the same basis (same grid).
    pub fn same_grid(&self, other: &SpectralCovariance) -> bool {
        self.shape == other.shape
    }
}

impl CovarianceOp for SpectralCovariance {
    fn dim(&self) -> usize {
        self.shape.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.fft.apply_multiplier(x, &self.half)
    }
    fn sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        self.fft.apply_multiplier(x, &self.half_sqrt)
    }
    fn inv_sqrt_apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_fn(x, |l| 1.0 / l.sqrt())
    }
    fn solve(&self, x: &[f64]) -> Vec<f64> {
        self.apply_fn(x, |l| 1.0 / l)
    }
    fn trace(&self) -> f64 {
        self.trace
    }
    fn as_spectral(&self) -> Option<&SpectralCovariance> {
        Some(self)
    }
    fn name(&self) -> String {
        format!("spectral({})", self.shape)
    }
}

/// Relative jitter floor on squared-exponential eigenvalues.
pub const SE_JITTER: f64 = 1e-8;

/// Squared-exponential covariance on the periodic embedding of the grid.
///
/// The domain has unit width, so pixels are `1/cols` apart in both
/// directions and `lengthscale` is a fraction of the width. The kernel is
/// the periodic summation of the Gaussian over all images of the torus,
/// rescaled so the pixel variance equals `amplitude`: this keeps it smooth
/// across the wrap (plain wrapped distances leave a kink at half the
/// period, whose slowly decaying spectrum inflates every low-rank
/// representation) and positive definite by construction. Eigenvalues are
/// the DFT of the kernel row, clipped below at `SE_JITTER * amplitude`.
pub fn sq_exp_covariance(
    shape: GridShape,
    lengthscale: f64,
    amplitude: f64,
) -> Result<SpectralCovariance> {
    if !(lengthscale > 0.0) || !(amplitude > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "squared-exponential covariance needs positive lengthscale and amplitude, got {lengthscale}, {amplitude}"
        )));
    }
    let (rows, cols) = (shape.rows, shape.cols);
    let h = 1.0 / cols as f64;
    // 1-D periodic sums g(d) = Σ_j exp(-(d + jP)² / 2ℓ²), separable in 2-D.
    let periodic = |len: usize| -> Vec<f64> {
        let period = len as f64 * h;
        let images = (8.0 * lengthscale / period).ceil() as i64 + 1;
        let g: Vec<f64> = (0..len)
            .map(|k| {
                let d = k as f64 * h;
                (-images..=images)
                    .map(|j| {
                        let dj = d + j as f64 * period;
                        (-dj * dj / (2.0 * lengthscale * lengthscale)).exp()
                    })
                    .sum()
            })
            .collect();
        let g0 = g[0];
        g.into_iter().map(|v| v / g0).collect()
    };
    let (gr, gc) = (periodic(rows), periodic(cols));
    let mut row = vec![0.0; shape.len()];
    for r in 0..rows {
        for c in 0..cols {
            row[r * cols + c] = amplitude * gr[r] * gc[c];
        }
    }
    let fft = Fft2::new(shape);
    let coeffs = fft.forward(&row);
    let hc = cols / 2 + 1;
    let floor = SE_JITTER * amplitude;
    let mut spectrum = vec![0.0; shape.len()];
    for r in 0..rows {
        for c in 0..cols {
            let v = if c < hc {
                coeffs[c * rows + r].re
            } else {
                coeffs[(cols - c) * rows + (rows - r) % rows].re
            };
            spectrum[r * cols + c] = v.max(floor);
        }
    }
    // The kernel row is even, so its DFT is real and symmetric up to
    // round-off; symmetrize exactly before validation.
    let mut sym = spectrum.clone();
    for r in 0..rows {
        for c in 0..cols {
            let mirror = ((rows - r) % rows) * cols + (cols - c) % cols;
            sym[r * cols + c] = 0.5 * (spectrum[r * cols + c] + spectrum[mirror]);
        }
    }
    SpectralCovariance::new(shape, &sym)
}

/// Spectral covariance from user-supplied per-mode variances.
pub fn spectral_covariance(shape: GridShape, spectrum: &[f64]) -> Result<SpectralCovariance> {
    SpectralCovariance::new(shape, spectrum)
}
