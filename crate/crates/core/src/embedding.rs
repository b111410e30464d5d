//! Per-descriptor embeddings into a high-dimensional space.
//!
//! Every embedding returned here is l2-normalised (zero vectors excepted),
//! which democratic pooling relies on.

use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codebooks::{Codebook, DiagonalGmm};
use crate::error::{Error, Result};
use crate::linalg::{
    column_mean, covariance, l2_normalize, norm, project_centered, snap_matrix, snap_vec, top_eigen,
};
use crate::tensor::DescriptorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Temb,
    Vlad,
    Fv,
}

impl EmbedKind {
    /// Output dimension for local dimension `d`, codebook size `c` and T-emb drop count `e`.
    pub fn output_dim(self, d: usize, c: usize, e: usize) -> Option<usize> {
        match self {
            EmbedKind::Temb => (d * c).checked_sub(e).filter(|&v| v > 0),
            EmbedKind::Vlad => Some(d * c),
            EmbedKind::Fv => Some(2 * d * c),
        }
    }
}

impl fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedKind::Temb => "temb",
            EmbedKind::Vlad => "vlad",
            EmbedKind::Fv => "fv",
        })
    }
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "temb" | "t-emb" => Ok(EmbedKind::Temb),
            "vlad" => Ok(EmbedKind::Vlad),
            "fv" | "fisher" => Ok(EmbedKind::Fv),
            other => Err(Error::Config(format!("unknown embedding {other:?}"))),
        }
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Concatenated unit residuals `(x − c_j)/‖x − c_j‖` over all centroids.
/// A residual of zero length yields a zero block.
pub fn embed_temb_raw(c: &Codebook, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(c.dim(), x)?;
    let mut out = Vec::with_capacity(c.dim() * c.len());
    for (j, centroid) in c.centroids().enumerate() {
        let start = out.len();
        out.extend(x.iter().zip(centroid).map(|(a, b)| a - b));
        let block = &mut out[start..];
        if norm(block) == 0.0 {
            debug!("descriptor coincides with centroid {j}; zero residual block");
        }
        l2_normalize(block);
    }
    Ok(out)
}

/// Centring plus removal of the `drop` leading eigen-directions of the raw
/// T-emb distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TembProjection {
    pub mean: Vec<f64>,
    /// `raw × (raw − drop)`: the retained eigenvectors in descending
    /// eigenvalue order. With `drop == 0` this is the identity.
    pub basis: DMatrix<f64>,
    /// `raw × drop`: the removed leading eigenvectors.
    pub drop_basis: DMatrix<f64>,
}

impl TembProjection {
    pub fn raw_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn drop(&self) -> usize {
        self.drop_basis.ncols()
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.mean);
        snap_matrix(&mut self.basis);
        snap_matrix(&mut self.drop_basis);
    }
}

pub fn fit_temb_projection(raw: &DescriptorSet, drop: usize) -> Result<TembProjection> {
    let dim = raw.dim();
    if drop >= dim {
        return Err(Error::Config(format!(
            "cannot drop {drop} components of a {dim}-dim embedding"
        )));
    }
    if raw.len() <= drop {
        return Err(Error::InsufficientSamples {
            needed: drop,
            got: raw.len(),
        });
    }
    let mean = column_mean(raw);
    if drop == 0 {
        return Ok(TembProjection {
            mean,
            basis: DMatrix::identity(dim, dim),
            drop_basis: DMatrix::zeros(dim, 0),
        });
    }
    let cov = covariance(raw, &mean);
    let (_, vectors) = top_eigen(&cov, dim)?;
    Ok(TembProjection {
        mean,
        basis: vectors.columns(drop, dim - drop).into_owned(),
        drop_basis: vectors.columns(0, drop).into_owned(),
    })
}

pub fn embed_temb(p: &TembProjection, raw: &[f64]) -> Result<Vec<f64>> {
    check_dim(p.raw_dim(), raw)?;
    let mut out = project_centered(raw, &p.mean, &p.basis);
    l2_normalize(&mut out);
    Ok(out)
}

/// Residual to the nearest centroid placed in that centroid's block.
pub fn embed_vlad(c: &Codebook, x: &[f64]) -> Result<Vec<f64>> {
    let nn = c.assign_nearest(x)?;
    let d = c.dim();
    let mut out = vec![0.0; d * c.len()];
    for ((o, a), b) in out[nn * d..(nn + 1) * d]
        .iter_mut()
        .zip(x)
        .zip(c.centroid(nn))
    {
        *o = a - b;
    }
    l2_normalize(&mut out);
    Ok(out)
}

/// Fisher vector of a single descriptor: `[mean-gradient blocks | variance-gradient blocks]`.
pub fn embed_fv(g: &DiagonalGmm, x: &[f64]) -> Result<Vec<f64>> {
    let gamma = g.posteriors(x)?;
    let (d, k) = (g.dim, g.len());
    let mut out = vec![0.0; 2 * d * k];
    let (means, vars) = out.split_at_mut(d * k);
    for j in 0..k {
        let w = g.weights[j];
        let (a, b) = (gamma[j] / w.sqrt(), gamma[j] / (2.0 * w).sqrt());
        for i in 0..d {
            let z = (x[i] - g.mean(j)[i]) / g.variance(j)[i].sqrt();
            means[j * d + i] = a * z;
            vars[j * d + i] = b * (z * z - 1.0);
        }
    }
    l2_normalize(&mut out);
    Ok(out)
}
