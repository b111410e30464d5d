//! Small dense helpers on top of nalgebra.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DescriptorSet;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit l2 norm in place. Zero vectors are left untouched.
pub fn l2_normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn column_mean(x: &DescriptorSet) -> Vec<f64> {
    let mut mean = vec![0.0; x.dim()];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = x.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Row-centred copy of `x` as an `n × d` matrix.
pub fn centered(x: &DescriptorSet, mean: &[f64]) -> DMatrix<f64> {
    let (n, d) = (x.len(), x.dim());
    DMatrix::from_fn(n, d, |r, c| x.row(r)[c] - mean[c])
}

/// Population covariance (1/n) of `x` about `mean`.
pub fn covariance(x: &DescriptorSet, mean: &[f64]) -> DMatrix<f64> {
    let c = centered(x, mean);
    let mut cov = c.transpose() * &c;
    cov /= x.len().max(1) as f64;
    // exact symmetry so the eigensolver sees a symmetric input
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Flips the sign of every column so its largest-magnitude entry is positive
/// (first such entry on ties).
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue, the
/// top `k` kept, with the sign convention of [`fix_column_signs`].
///
/// Eigenvalues that are negative through round-off are clamped to zero;
/// a kept eigenvalue at or below `1e-12 × max` is reported as rank
/// deficiency and zeroed.
pub fn top_eigen(sym: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = sym.nrows();
    if sym.ncols() != n {
        return Err(Error::InvalidDimensions(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            n,
            sym.ncols()
        )));
    }
    if k > n {
        return Err(Error::InvalidDimensions(format!(
            "requested {k} eigenvectors of a {n}x{n} matrix"
        )));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let max = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let floor = 1e-12 * max;
    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    let mut deficient = 0;
    for (dst, &src) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvalues[src];
        if v <= floor {
            deficient += 1;
            v = 0.0;
        }
        values.push(v);
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    if deficient > 0 {
        warn!("covariance rank is below {k}: {deficient} trailing eigenvalues zeroed");
    }
    fix_column_signs(&mut vectors);
    Ok((values, vectors))
}

/// Solves `max tr(Rᵀ m)` over orthogonal `R` (orthogonal Procrustes): with
/// `m = U Σ Wᵀ`, `R = U Wᵀ`.
///
/// Large square inputs first try a Newton-Schulz polar iteration, which needs
/// only matrix products; it falls back to the SVD when `m` is too badly
/// conditioned for the iteration to converge.
pub fn procrustes(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_square() && m.nrows() >= NEWTON_SCHULZ_MIN_DIM {
        if let Some(r) = polar_newton_schulz(m) {
            return r;
        }
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    u * v_t
}

const NEWTON_SCHULZ_MIN_DIM: usize = 96;

fn spectral_norm_estimate(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..30 {
        let w = m.tr_mul(&(m * &v));
        let len = w.norm();
        if len == 0.0 {
            return 0.0;
        }
        sigma = len.sqrt();
        v = w / len;
    }
    sigma
}

fn polar_newton_schulz(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let sigma = spectral_norm_estimate(m);
    if !(sigma.is_finite() && sigma > 0.0) {
        return None;
    }
    // a little headroom keeps every singular value below sqrt(3)
    let mut x = m / (sigma * 1.05);
    let identity = DMatrix::<f64>::identity(n, n);
    for _ in 0..120 {
        let g = x.transpose() * &x;
        let err = (&g - &identity).amax();
        if !err.is_finite() {
            return None;
        }
        x = (&x * (identity.scale(3.0) - g)).scale(0.5);
        // quadratic convergence: one more step after this lands at round-off
        if err < 1e-9 {
            let g = x.transpose() * &x;
            return Some((&x * (identity.scale(3.0) - g)).scale(0.5));
        }
    }
    None
}

/// Random orthogonal `n × n` matrix: Q factor of a standard Gaussian matrix
/// with column signs tied to diag(R) so the draw is unique.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            g[(r, c)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Largest absolute entry of `mᵀm − I`.
pub fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst = 0.0f64;
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - target).abs());
        }
    }
    worst
}

/// `vᵀ M` for a row vector `v` and `d × k` matrix `M`, after subtracting `mean`.
pub fn project_centered(v: &[f64], mean: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    let centered: Vec<f64> = v.iter().zip(mean).map(|(a, b)| a - b).collect();
    (0..m.ncols())
        .map(|c| dot(&centered, m.column(c).as_slice()))
        .collect()
}

/// Rounds every entry through `f32` so that what is persisted equals what is used.
pub fn snap_vec(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

pub fn snap_matrix(m: &mut DMatrix<f64>) {
    m.iter_mut().for_each(|x| *x = *x as f32 as f64);
}
