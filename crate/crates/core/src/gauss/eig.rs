use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
///
/// nalgebra's implicit QL loses eigenvector accuracy on larger matrices
/// with clustered spectra, so this goes through faer's divide and conquer.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("eigendecomposition of a non-square {}x{} matrix", n, m.ncols())));
    }
    let a = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Breakdown(format!("symmetric eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    Ok((DVector::from_fn(n, |i, _| s[i]), DMatrix::from_fn(n, n, |i, j| u[(i, j)])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::RngStream;

    #[test]
    fn reconstructs_low_rank_clustered_matrix() {
        let n = 200;
        let mut rng = RngStream::new(1, 0);
        let q = DMatrix::from_vec(n, n, rng.normals(n * n)).qr().q();
        let d = DVector::from_fn(n, |i, _| if i < 120 { 10f64.powf(4.0 - i as f64 / 20.0) } else { 1e-14 * i as f64 });
        let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        let res = &m * &vecs - &vecs * DMatrix::from_diagonal(&vals);
        assert!(res.amax() < 1e-9, "{}", res.amax());
        assert!(vals.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }
}
