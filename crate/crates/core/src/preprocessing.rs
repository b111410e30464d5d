//! PCA reduction of local descriptors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{
    column_mean, covariance, l2_normalize, project_centered, snap_matrix, snap_vec, top_eigen,
};
use crate::tensor::DescriptorSet;

/// Rotation onto the leading principal axes. No whitening is applied here.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d_in × d_out`, orthonormal columns in descending eigenvalue order.
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        project_centered(row, &self.mean, &self.basis)
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.mean);
        snap_matrix(&mut self.basis);
        snap_vec(&mut self.eigenvalues);
    }
}

/// Population-covariance PCA keeping `d_out` components.
pub fn fit_pca(train: &DescriptorSet, d_out: usize) -> Result<PcaModel> {
    let d_in = train.dim();
    if d_out == 0 || d_out > d_in {
        return Err(Error::InvalidDimensions(format!(
            "cannot keep {d_out} principal components of {d_in}-dim data"
        )));
    }
    if train.len() <= d_out {
        return Err(Error::InsufficientSamples {
            needed: d_out,
            got: train.len(),
        });
    }
    let mean = column_mean(train);
    let cov = covariance(train, &mean);
    let (eigenvalues, basis) = top_eigen(&cov, d_out)?;
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
    })
}

/// Projects every row; with `l2` each non-zero output row is unit-normalised.
pub fn apply_pca(m: &PcaModel, x: &DescriptorSet, l2: bool) -> Result<DescriptorSet> {
    if x.dim() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            actual: x.dim(),
        });
    }
    let mut out = DescriptorSet::with_capacity(m.output_dim(), x.len());
    for row in x.rows() {
        let mut p = m.project(row);
        if l2 {
            l2_normalize(&mut p);
        }
        out.push(&p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, orthogonality_error};

    #[test]
    fn axis_aligned() {
        let x = DescriptorSet::from_rows(2, &[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let m = fit_pca(&x, 1).unwrap();
        assert_eq!(m.basis.column(0).as_slice(), &[1.0, 0.0]);
        assert!((m.eigenvalues[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_preserves_distances() {
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = i as f64;
                [t.sin() * 3.0, (t * 0.7).cos(), (t * 1.3).sin() + 0.1 * t]
            })
            .collect();
        let x = DescriptorSet::from_rows(3, &rows).unwrap();
        let m = fit_pca(&x, 3).unwrap();
        assert!(orthogonality_error(&m.basis) < 1e-12);
        let y = apply_pca(&m, &x, false).unwrap();
        for i in 0..x.len() {
            for j in 0..x.len() {
                let dx: Vec<f64> = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a - b).collect();
                let dy: Vec<f64> = y.row(i).iter().zip(y.row(j)).map(|(a, b)| a - b).collect();
                assert!((norm(&dx) - norm(&dy)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn apply_examples() {
        let m = PcaModel {
            mean: vec![0.0, 0.0],
            basis: DMatrix::identity(2, 2),
            eigenvalues: vec![1.0, 1.0],
        };
        let x = DescriptorSet::from_rows(2, &[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        let y = apply_pca(&m, &x, true).unwrap();
        assert_eq!(y.row(0), &[0.6, 0.8]);
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(apply_pca(&m, &x, false).unwrap().row(0), &[3.0, 4.0]);
        let bad = DescriptorSet::from_rows(3, &[[1.0, 2.0, 3.0]]).unwrap();
        assert!(apply_pca(&m, &bad, true).is_err());
    }

    #[test]
    fn rejects_too_few_samples() {
        let x = DescriptorSet::from_rows(2, &[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            fit_pca(&x, 1),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(fit_pca(&x, 3).is_err());
    }

    #[test]
    fn rank_deficient_pads_zero_eigenvalues() {
        // points on a line in 3-D: one non-zero eigenvalue
        let rows: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let x = DescriptorSet::from_rows(3, &rows).unwrap();
        let m = fit_pca(&x, 3).unwrap();
        assert!(m.eigenvalues[0] > 0.0);
        assert_eq!(&m.eigenvalues[1..], &[0.0, 0.0]);
    }
}
