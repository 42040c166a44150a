use super::{check_len, GridShape, LinearMap};
use crate::error::{Error, Result};

/// Pointwise 0/1 mask. Kept pixels pass through, masked pixels become 0; the
/// operator is self-adjoint and idempotent.
#[derive(Debug, Clone)]
pub struct MaskOperator {
    shape: GridShape,
    keep: Vec<bool>,
}

impl MaskOperator {
    /// `keep` is row-major over `shape`; `true` marks an observed pixel.
    pub fn new(shape: GridShape, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "mask has {} entries but the grid {shape} has {}",
                keep.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, keep })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn observed_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    fn mask(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect()
    }
}

impl LinearMap for MaskOperator {
    fn domain_dim(&self) -> usize {
        self.shape.len()
    }
    fn codomain_dim(&self) -> usize {
        self.shape.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        check_len(x, self.shape.len(), "mask apply");
        self.mask(x)
    }
    fn adjoint_apply(&self, y: &[f64]) -> Vec<f64> {
        check_len(y, self.shape.len(), "mask adjoint");
        self.mask(y)
    }
    fn name(&self) -> String {
        format!("mask({}, {} observed)", self.shape, self.observed_count())
    }
}

/// Keep-mask with a centred square hole of side `hole` pixels (clamped to the
/// grid). Pixels inside the hole are unobserved.
pub fn center_hole_mask(shape: GridShape, hole: usize) -> Vec<bool> {
    let hr = hole.min(shape.rows);
    let hc = hole.min(shape.cols);
    let r0 = (shape.rows - hr) / 2;
    let c0 = (shape.cols - hc) / 2;
    let mut keep = vec![true; shape.len()];
    for r in r0..r0 + hr {
        for c in c0..c0 + hc {
            keep[shape.index(r, c)] = false;
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::validate_adjoint;

    #[test]
    fn diagonal_projection() {
        let shape = GridShape::new(2, 2).unwrap();
        let m = MaskOperator::new(shape, vec![true, false, false, true]).unwrap();
        assert_eq!(m.apply(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn full_mask_is_identity() {
        let shape = GridShape::new(3, 4).unwrap();
        let m = MaskOperator::new(shape, vec![true; 12]).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        assert_eq!(m.apply(&x), x);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let shape = GridShape::new(2, 2).unwrap();
        assert!(MaskOperator::new(shape, vec![true; 3]).is_err());
    }

    #[test]
    fn adjoint_on_16x16() {
        let shape = GridShape::new(16, 16).unwrap();
        let m = MaskOperator::new(shape, center_hole_mask(shape, 6)).unwrap();
        let report = validate_adjoint(&m, 100, 1e-14, 3);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn idempotent() {
        let shape = GridShape::new(8, 8).unwrap();
        let m = MaskOperator::new(shape, center_hole_mask(shape, 3)).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64 * 0.3 - 4.0).collect();
        assert_eq!(m.apply(&m.apply(&x)), m.apply(&x));
    }

    #[test]
    fn centred_hole_geometry() {
        let shape = GridShape::new(6, 6).unwrap();
        let keep = center_hole_mask(shape, 2);
        let holes: Vec<usize> = (0..36).filter(|&i| !keep[i]).collect();
        assert_eq!(holes, vec![14, 15, 20, 21]);
    }
}
