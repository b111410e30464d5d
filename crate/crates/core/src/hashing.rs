//! Iterative quantization (ITQ) of global descriptors into packed binary codes.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{procrustes, project_centered, random_orthogonal, snap_matrix, snap_vec};
use crate::preprocessing::fit_pca;
use crate::store::words_for_bits;
use crate::tensor::DescriptorSet;

pub const DEFAULT_ITQ_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ItqModel {
    pub mean: Vec<f64>,
    /// `D × L`, orthonormal columns.
    pub pca: DMatrix<f64>,
    /// `L × L`, orthogonal.
    pub rotation: DMatrix<f64>,
}

impl ItqModel {
    pub fn input_dim(&self) -> usize {
        self.pca.nrows()
    }

    pub fn bits(&self) -> usize {
        self.rotation.ncols()
    }

    /// Real-valued projection `(v − mean)ᵀ · pca · rotation`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: v.len(),
            });
        }
        let reduced = project_centered(v, &self.mean, &self.pca);
        let zero = vec![0.0; reduced.len()];
        Ok(project_centered(&reduced, &zero, &self.rotation))
    }

    pub(crate) fn snap(&mut self) {
        snap_vec(&mut self.mean);
        snap_matrix(&mut self.pca);
        snap_matrix(&mut self.rotation);
    }
}

/// Starting rotation for the alternating minimisation.
#[derive(Debug, Clone, Copy)]
pub enum ItqInit {
    /// Q factor of a seeded Gaussian matrix.
    Random(u64),
    Identity,
}

#[derive(Debug, Clone)]
pub struct ItqFit {
    pub model: ItqModel,
    /// `‖B − V R‖_F` after each rotation update.
    pub losses: Vec<f64>,
    /// `max |RᵀR − I|` after each rotation update.
    pub orthogonality: Vec<f64>,
}

pub fn fit_itq(
    train: &DescriptorSet,
    bits: usize,
    iterations: usize,
    seed: u64,
) -> Result<ItqModel> {
    fit_itq_traced(train, bits, iterations, ItqInit::Random(seed)).map(|f| f.model)
}

pub fn fit_itq_traced(
    train: &DescriptorSet,
    bits: usize,
    iterations: usize,
    init: ItqInit,
) -> Result<ItqFit> {
    if bits == 0 || bits > train.dim() {
        return Err(Error::InvalidDimensions(format!(
            "cannot draw {bits} bits from {}-dim descriptors",
            train.dim()
        )));
    }
    if train.len() <= bits {
        return Err(Error::InsufficientSamples {
            needed: bits,
            got: train.len(),
        });
    }
    let pca = fit_pca(train, bits)?;
    let v = crate::linalg::centered(train, &pca.mean) * &pca.basis;

    let mut rotation = match init {
        ItqInit::Random(seed) => random_orthogonal(bits, &mut ChaCha8Rng::seed_from_u64(seed)),
        ItqInit::Identity => DMatrix::identity(bits, bits),
    };
    let mut losses = Vec::with_capacity(iterations);
    let mut orthogonality = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let b = (&v * &rotation).map(sign);
        rotation = procrustes(&(v.transpose() * &b));
        let loss = (&b - &v * &rotation).norm();
        debug_assert!(losses.last().is_none_or(|&prev| loss <= prev + 1e-9));
        losses.push(loss);
        orthogonality.push(crate::linalg::orthogonality_error(&rotation));
    }
    Ok(ItqFit {
        model: ItqModel {
            mean: pca.mean,
            pca: pca.basis,
            rotation,
        },
        losses,
        orthogonality,
    })
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Packs `bits` into little-endian 64-bit words: bit `i` goes to word
/// `i / 64`, position `i % 64`.
pub fn pack_bits(bits: impl IntoIterator<Item = bool>, len: usize) -> Vec<u64> {
    let mut words = vec![0u64; words_for_bits(len)];
    for (i, b) in bits.into_iter().take(len).enumerate() {
        if b {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

pub fn bit(code: &[u64], i: usize) -> bool {
    code[i / 64] >> (i % 64) & 1 == 1
}

/// Bit `i` is set iff the `i`-th projected coordinate is `>= 0`.
pub fn encode_itq(m: &ItqModel, v: &[f64]) -> Result<Vec<u64>> {
    let p = m.project(v)?;
    Ok(pack_bits(p.iter().map(|&x| x >= 0.0), m.bits()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model() -> ItqModel {
        ItqModel {
            mean: vec![0.0, 0.0],
            pca: DMatrix::identity(2, 2),
            rotation: DMatrix::identity(2, 2),
        }
    }

    #[test]
    fn encode_examples() {
        let m = identity_model();
        assert_eq!(encode_itq(&m, &[3.0, -2.0]).unwrap(), vec![0b01]);
        assert_eq!(encode_itq(&m, &[0.0, 0.0]).unwrap(), vec![0b11]);
        assert!(encode_itq(&m, &[1.0]).is_err());
    }

    #[test]
    fn encode_invariant_to_positive_scaling() {
        let m = ItqModel {
            mean: vec![0.5, -1.0],
            ..identity_model()
        };
        let centered = [0.7, -0.2];
        for c in [0.01, 1.0, 250.0] {
            let v = [centered[0] * c + 0.5, centered[1] * c - 1.0];
            assert_eq!(encode_itq(&m, &v).unwrap(), vec![0b01]);
        }
    }

    #[test]
    fn packing_layout() {
        let mut bits = vec![false; 130];
        bits[0] = true;
        bits[64] = true;
        bits[129] = true;
        let w = pack_bits(bits.iter().copied(), 130);
        assert_eq!(w, vec![1, 1, 0b10]);
        assert!(bit(&w, 129) && !bit(&w, 128));
    }

    #[test]
    fn rejects_too_few_samples() {
        let x = DescriptorSet::from_rows(2, &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(fit_itq(&x, 2, 5, 0).is_err());
        assert!(fit_itq(&x, 3, 5, 0).is_err());
    }
}
