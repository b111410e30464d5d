//! k-means codebooks and diagonal-covariance Gaussian mixtures.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{snap_vec, squared_distance};
use crate::tensor::DescriptorSet;

pub const MAX_LLOYD_ITERATIONS: usize = 25;
pub const MAX_EM_ITERATIONS: usize = 50;
pub const EM_TOLERANCE: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-8;

/// `k` centroids of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::InvalidDimensions(format!(
                "{} centroid values do not form rows of dimension {dim}",
                centroids.len()
            )));
        }
        if let Some(pos) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dim, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.centroids.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid (0-based) by Euclidean distance; ties go to the lowest index.
    pub fn assign_nearest(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(self.nearest(x).0)
    }

    fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids().enumerate() {
            let d = squared_distance(x, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.centroids);
    }
}

/// Result of a k-means run with the per-iteration distortion trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Mean squared distance to the assigned centroid, one entry per assignment step.
    pub distortions: Vec<f64>,
}

pub fn fit_kmeans(train: &DescriptorSet, k: usize, seed: u64) -> Result<Codebook> {
    fit_kmeans_traced(train, k, seed).map(|f| f.codebook)
}

/// k-means++ seeding followed by at most 25 Lloyd iterations. A cluster that
/// empties is re-seeded with the point farthest from its own centroid.
pub fn fit_kmeans_traced(train: &DescriptorSet, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = train.len();
    if k == 0 {
        return Err(Error::InvalidDimensions("codebook of size 0".into()));
    }
    if n < k {
        return Err(Error::InsufficientSamples {
            needed: k - 1,
            got: n,
        });
    }
    let dim = train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebook = Codebook::new(dim, kmeans_plus_plus(train, k, &mut rng))?;

    let mut distortions = Vec::new();
    let mut assignment: Vec<usize> = Vec::new();
    for iter in 0..MAX_LLOYD_ITERATIONS {
        let assigned: Vec<(usize, f64)> = train
            .as_flat()
            .par_chunks(dim)
            .map(|x| codebook.nearest(x))
            .collect();
        distortions.push(assigned.iter().map(|a| a.1).sum::<f64>() / n as f64);
        let next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if next == assignment {
            break;
        }
        assignment = next;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &j) in train.rows().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                sums[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .for_each(|s| *s /= c);
                continue;
            }
            // farthest point from its current centroid, not already used for a re-seed
            let far = assigned
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .fold(None::<(usize, f64)>, |best, (i, a)| match best {
                    Some((_, d)) if d >= a.1 => best,
                    _ => Some((i, a.1)),
                })
                .map(|(i, _)| i)
                .expect("n >= k leaves a point to re-seed with");
            taken[far] = true;
            debug!("k-means iteration {iter}: cluster {j} emptied, re-seeded with point {far}");
            sums[j * dim..(j + 1) * dim].copy_from_slice(train.row(far));
        }
        codebook = Codebook::new(dim, sums)?;
    }
    Ok(KMeansFit {
        codebook,
        distortions,
    })
}

fn kmeans_plus_plus(train: &DescriptorSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = train.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = train
        .rows()
        .map(|x| squared_distance(x, train.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // round-off can leave acc <= target at the end; take the last candidate
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // all remaining points coincide with a centre
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(pick);
        for (i, x) in train.rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, train.row(pick)));
        }
    }
    chosen
        .into_iter()
        .flat_map(|i| train.row(i).to_vec())
        .collect()
}

/// Gaussian mixture with per-dimension variances.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `k × d` row-major.
    pub means: Vec<f64>,
    /// `k × d` row-major, each at least [`VARIANCE_FLOOR`] after fitting.
    pub variances: Vec<f64>,
}

impl DiagonalGmm {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.means[j * self.dim..(j + 1) * self.dim]
    }

    pub fn variance(&self, j: usize) -> &[f64] {
        &self.variances[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.dim == 0 {
            return Err(Error::InvalidDimensions("empty mixture".into()));
        }
        if self.means.len() != k * self.dim || self.variances.len() != k * self.dim {
            return Err(Error::InvalidDimensions(format!(
                "mixture of {k} components of dim {} has {} means and {} variances",
                self.dim,
                self.means.len(),
                self.variances.len()
            )));
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) || self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Precondition(
                "mixture weights and variances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-component `ln w_j + ln N(x; μ_j, σ²_j)`.
    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.len())
            .map(|j| {
                let mut acc = 0.0;
                for ((xi, mu), var) in x.iter().zip(self.mean(j)).zip(self.variance(j)) {
                    let diff = xi - mu;
                    acc += ln2pi + var.ln() + diff * diff / var;
                }
                self.weights[j].ln() - 0.5 * acc
            })
            .collect()
    }

    /// Soft assignments summing to one, plus the sample log-likelihood.
    fn posteriors_and_ll(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut lj = self.log_joint(x);
        let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in lj.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        lj.iter_mut().for_each(|v| *v /= total);
        (lj, max + total.ln())
    }

    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(self.posteriors_and_ll(x).0)
    }

    /// Mean per-sample log-likelihood of `x`.
    pub fn mean_log_likelihood(&self, x: &DescriptorSet) -> f64 {
        let total: f64 = x
            .as_flat()
            .par_chunks(self.dim)
            .map(|row| self.posteriors_and_ll(row).1)
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / x.len() as f64
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.weights);
        let total: f64 = self.weights.iter().sum();
        self.weights
            .iter_mut()
            .for_each(|w| *w = (*w / total) as f32 as f64);
        snap_vec(&mut self.means);
        snap_vec(&mut self.variances);
    }
}

/// Result of EM with the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: DiagonalGmm,
    /// Mean per-sample log-likelihood evaluated before each M-step.
    pub log_likelihoods: Vec<f64>,
    /// Iterations at which a component was re-seeded; the trace is not
    /// monotone across these.
    pub reseeded_at: Vec<usize>,
}

pub fn fit_gmm(train: &DescriptorSet, k: usize, seed: u64) -> Result<DiagonalGmm> {
    fit_gmm_traced(train, k, seed).map(|f| f.gmm)
}

/// EM from a k-means start, stopping after 50 iterations or when the mean
/// log-likelihood improves by less than 1e-6.
pub fn fit_gmm_traced(train: &DescriptorSet, k: usize, seed: u64) -> Result<GmmFit> {
    let codebook = fit_kmeans(train, k, seed)?;
    let n = train.len();
    let dim = train.dim();

    // initial parameters from the hard k-means partition
    let mut gmm = {
        let assignment: Vec<usize> = train.rows().map(|x| codebook.nearest(x).0).collect();
        let mut counts = vec![0usize; k];
        let mut vars = vec![0.0; k * dim];
        for (x, &j) in train.rows().zip(&assignment) {
            counts[j] += 1;
            for ((v, xi), mu) in vars[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(x)
                .zip(codebook.centroid(j))
            {
                *v += (xi - mu) * (xi - mu);
            }
        }
        for j in 0..k {
            let c = counts[j].max(1) as f64;
            vars[j * dim..(j + 1) * dim]
                .iter_mut()
                .for_each(|v| *v = (*v / c).max(VARIANCE_FLOOR));
        }
        let weights = counts
            .iter()
            .map(|&c| (c.max(1)) as f64)
            .collect::<Vec<_>>();
        let total: f64 = weights.iter().sum();
        DiagonalGmm {
            dim,
            weights: weights.into_iter().map(|w| w / total).collect(),
            means: codebook.as_flat().to_vec(),
            variances: vars,
        }
    };

    let global_var = {
        let mean = crate::linalg::column_mean(train);
        let mut v = vec![0.0; dim];
        for x in train.rows() {
            for ((acc, xi), m) in v.iter_mut().zip(x).zip(&mean) {
                *acc += (xi - m) * (xi - m);
            }
        }
        v.into_iter()
            .map(|s| (s / n as f64).max(VARIANCE_FLOOR))
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut reseeded = vec![false; k];
    let mut reseeded_at = Vec::new();
    let mut lls = Vec::new();
    for iter in 0..MAX_EM_ITERATIONS {
        // E-step
        let stats: Vec<(Vec<f64>, f64)> = train
            .as_flat()
            .par_chunks(dim)
            .map(|x| gmm.posteriors_and_ll(x))
            .collect();
        let ll = stats.iter().map(|s| s.1).sum::<f64>() / n as f64;
        let converged = lls
            .last()
            .is_some_and(|&prev: &f64| ll - prev < EM_TOLERANCE);
        lls.push(ll);
        if converged {
            break;
        }

        // M-step
        let mut nk = vec![0.0; k];
        let mut sx = vec![0.0; k * dim];
        for (x, (gamma, _)) in train.rows().zip(&stats) {
            for j in 0..k {
                let g = gamma[j];
                if g == 0.0 {
                    continue;
                }
                nk[j] += g;
                for (s, xi) in sx[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                    *s += g * xi;
                }
            }
        }
        let mut fresh = vec![false; k];
        for j in 0..k {
            if nk[j] / (n as f64) < MIN_COMPONENT_WEIGHT {
                if reseeded[j] {
                    return Err(Error::DegenerateComponent(j));
                }
                reseeded[j] = true;
                fresh[j] = true;
                let pick = rng.gen_range(0..n);
                debug!("EM iteration {iter}: component {j} collapsed, re-seeded at sample {pick}");
                gmm.means[j * dim..(j + 1) * dim].copy_from_slice(train.row(pick));
                gmm.variances[j * dim..(j + 1) * dim].copy_from_slice(&global_var);
                nk[j] = 1.0;
                continue;
            }
            for (m, s) in gmm.means[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&sx[j * dim..(j + 1) * dim])
            {
                *m = s / nk[j];
            }
        }
        let mut sv = vec![0.0; k * dim];
        for (x, (gamma, _)) in train.rows().zip(&stats) {
            for j in 0..k {
                let g = gamma[j];
                if g == 0.0 {
                    continue;
                }
                for ((s, xi), mu) in sv[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(x)
                    .zip(&gmm.means[j * dim..(j + 1) * dim])
                {
                    *s += g * (xi - mu) * (xi - mu);
                }
            }
        }
        for j in 0..k {
            if fresh[j] {
                continue;
            }
            for (v, s) in gmm.variances[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&sv[j * dim..(j + 1) * dim])
            {
                *v = (s / nk[j]).max(VARIANCE_FLOOR);
            }
        }
        let total: f64 = nk.iter().sum();
        gmm.weights = nk.iter().map(|w| w / total).collect();
        if fresh.iter().any(|&f| f) {
            reseeded_at.push(iter);
        }
    }
    Ok(GmmFit {
        gmm,
        log_likelihoods: lls,
        reseeded_at,
    })
}
