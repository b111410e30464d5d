//! Power-law normalisation and rotation normalisation of aggregated vectors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, project_centered, snap_matrix, snap_vec};
use crate::preprocessing::fit_pca;
use crate::tensor::DescriptorSet;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_RN_EPSILON: f64 = 1e-6;

/// `sign(x)·|x|^α` element-wise, then l2-normalised. Zeros stay zero, also at `α = 0`.
pub fn power_normalize(v: &[f64], alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                x.signum() * x.abs().powf(alpha)
            }
        })
        .collect();
    l2_normalize(&mut out);
    out
}

/// PCA rotation of aggregated vectors, optionally whitened.
#[derive(Debug, Clone, PartialEq)]
pub struct RnModel {
    pub mean: Vec<f64>,
    /// `D × D_out`, orthonormal columns.
    pub rotation: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
    /// Whitening regulariser, relative to the largest eigenvalue.
    pub epsilon: f64,
}

impl RnModel {
    pub fn input_dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.rotation.ncols()
    }

    /// Per-coordinate scale applied after rotation.
    pub fn scales(&self) -> Vec<f64> {
        if !self.whiten {
            return vec![1.0; self.output_dim()];
        }
        let max = self.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
        let reg = self.epsilon * max;
        self.eigenvalues
            .iter()
            .map(|&e| {
                let denom = (e.max(0.0) + reg).sqrt();
                if denom > 0.0 {
                    1.0 / denom
                } else {
                    1.0
                }
            })
            .collect()
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.mean);
        snap_matrix(&mut self.rotation);
        snap_vec(&mut self.eigenvalues);
    }
}

pub fn fit_rn(train: &DescriptorSet, d_out: usize, whiten: bool) -> Result<RnModel> {
    fit_rn_with_epsilon(train, d_out, whiten, DEFAULT_RN_EPSILON)
}

pub fn fit_rn_with_epsilon(
    train: &DescriptorSet,
    d_out: usize,
    whiten: bool,
    epsilon: f64,
) -> Result<RnModel> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "whitening epsilon {epsilon} is negative"
        )));
    }
    let pca = fit_pca(train, d_out)?;
    Ok(RnModel {
        mean: pca.mean,
        rotation: pca.basis,
        eigenvalues: pca.eigenvalues,
        whiten,
        epsilon,
    })
}

/// Rotates (and whitens), then l2-normalises.
pub fn apply_rn(m: &RnModel, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            actual: v.len(),
        });
    }
    let mut out = project_centered(v, &m.mean, &m.rotation);
    for (o, s) in out.iter_mut().zip(m.scales()) {
        *o *= s;
    }
    l2_normalize(&mut out);
    Ok(out)
}
