//! Pooling a set of embedded descriptors into one vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::tensor::DescriptorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Avg,
    Max,
    Democratic,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Sum => "sum",
            PoolMode::Avg => "avg",
            PoolMode::Max => "max",
            PoolMode::Democratic => "democratic",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(PoolMode::Sum),
            "avg" | "average" | "mean" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            "democratic" | "demo" => Ok(PoolMode::Democratic),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub mode: PoolMode,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_exponent: f64,
    /// Clamp negative Gram entries to zero inside the scaling loop.
    pub clamp_negative: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            mode: PoolMode::Democratic,
            sinkhorn_iterations: 10,
            sinkhorn_exponent: 0.5,
            clamp_negative: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sinkhorn_iterations == 0 {
            return Err(Error::Config(
                "sinkhorn_iterations must be at least 1".into(),
            ));
        }
        if !(self.sinkhorn_exponent > 0.0 && self.sinkhorn_exponent <= 1.0) {
            return Err(Error::Config(format!(
                "sinkhorn_exponent {} outside (0, 1]",
                self.sinkhorn_exponent
            )));
        }
        Ok(())
    }
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;
const SIGMA_FLOOR: f64 = 1e-12;

/// Order-independent sum: terms are added in sorted order, so any
/// permutation of the same multiset gives the same bits.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Column-wise sum, mean or max.
pub fn aggregate_pool(v: &DescriptorSet, mode: PoolMode) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("cannot pool an empty descriptor set".into()));
    }
    let d = v.dim();
    match mode {
        PoolMode::Sum | PoolMode::Avg => {
            let mut out = vec![0.0; d];
            for row in v.rows() {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            if mode == PoolMode::Avg {
                let n = v.len() as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
            Ok(out)
        }
        PoolMode::Max => {
            let mut out = vec![f64::NEG_INFINITY; d];
            for row in v.rows() {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = o.max(x);
                }
            }
            Ok(out)
        }
        PoolMode::Democratic => aggregate_democratic(v, &AggregationConfig::default()),
    }
}

fn check_unit_rows(v: &DescriptorSet) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("cannot pool an empty descriptor set".into()));
    }
    for (i, row) in v.rows().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Precondition(format!(
                "democratic pooling needs l2-normalised rows; row {i} has norm {n}"
            )));
        }
    }
    Ok(())
}

/// Gram matrix `V Vᵀ`, negative entries clamped to zero when requested.
pub fn gram(v: &DescriptorSet, clamp_negative: bool) -> Vec<f64> {
    let n = v.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut g = dot(v.row(i), v.row(j));
            if clamp_negative {
                g = g.max(0.0);
            }
            k[i * n + j] = g;
            k[j * n + i] = g;
        }
    }
    k
}

/// `σ_i = λ_i · Σ_j K_ij λ_j`, each inner sum evaluated order-independently.
pub fn sinkhorn_sigma(kernel: &[f64], lambda: &[f64]) -> Vec<f64> {
    let n = lambda.len();
    let mut terms = vec![0.0; n];
    (0..n)
        .map(|i| {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = kernel[i * n + j] * lambda[j];
            }
            lambda[i] * sorted_sum(&mut terms)
        })
        .collect()
}

/// Democratic weights by Sinkhorn-style scaling of the Gram matrix:
/// starting from `λ = 1`, each pass sets `λ_i ← λ_i / σ_i^γ` for all `i`
/// simultaneously, leaving indices with `σ_i < 1e-12` unchanged.
pub fn democratic_weights(v: &DescriptorSet, cfg: &AggregationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_unit_rows(v)?;
    let n = v.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let kernel = gram(v, cfg.clamp_negative);
    let mut lambda = vec![1.0; n];
    for _ in 0..cfg.sinkhorn_iterations {
        let sigma = sinkhorn_sigma(&kernel, &lambda);
        for (l, s) in lambda.iter_mut().zip(&sigma) {
            if *s >= SIGMA_FLOOR {
                *l /= s.powf(cfg.sinkhorn_exponent);
            }
        }
    }
    Ok(lambda)
}

/// `Σ_i λ_i V_i` with democratic weights. Invariant to row order, bit for bit.
pub fn aggregate_democratic(v: &DescriptorSet, cfg: &AggregationConfig) -> Result<Vec<f64>> {
    let lambda = democratic_weights(v, cfg)?;
    let mut terms = vec![0.0; v.len()];
    Ok((0..v.dim())
        .map(|c| {
            for ((t, row), l) in terms.iter_mut().zip(v.rows()).zip(&lambda) {
                *t = l * row[c];
            }
            sorted_sum(&mut terms)
        })
        .collect())
}

pub fn aggregate(v: &DescriptorSet, cfg: &AggregationConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        PoolMode::Democratic => aggregate_democratic(v, cfg),
        mode => aggregate_pool(v, mode),
    }
}
