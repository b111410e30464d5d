//! Checks against independent reference computations.

mod common;

use common::*;
use convmask::aggregation::{democratic_weights, gram, sinkhorn_sigma, AggregationConfig};
use convmask::codebooks::{fit_gmm, fit_kmeans, Codebook, DiagonalGmm};
use convmask::embedding::{embed_fv, embed_temb_raw, fit_temb_projection};
use convmask::hashing::{fit_itq_traced, ItqInit};
use convmask::postprocessing::{apply_rn, fit_rn, fit_rn_with_epsilon};
use convmask::preprocessing::fit_pca;
use convmask::retrieval::{average_precision, hamming_distance, QueryTruth};
use convmask::DescriptorSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(rows: &[Vec<f64>]) -> DescriptorSet {
    DescriptorSet::from_rows(rows[0].len(), rows).unwrap()
}

#[test]
fn jacobi_oracle_solves_a_known_matrix() {
    let (values, vectors) = jacobi_eigen(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
    assert!((values[0] - 3.0).abs() < 1e-14 && (values[1] - 1.0).abs() < 1e-14);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!(sign_agnostic_gap(&vectors[0], &[s, s]) < 1e-14);
}

#[test]
fn pca_recovers_a_noisy_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            let t: f64 = rng.gen_range(-5.0..5.0);
            vec![
                t + rng.gen_range(-0.05..0.05),
                t + rng.gen_range(-0.05..0.05),
            ]
        })
        .collect();
    let m = fit_pca(&set(&rows), 1).unwrap();
    let basis: Vec<f64> = m.basis.column(0).iter().copied().collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!(sign_agnostic_gap(&basis, &[s, s]) < 1e-2);
    let (_, cov) = covariance_oracle(&rows);
    let (_, vectors) = jacobi_eigen(&cov);
    assert!(sign_agnostic_gap(&basis, &vectors[0]) < 1e-10);
}

fn assert_matches_oracle(
    rows: &[Vec<f64>],
    mean: &[f64],
    basis: &nalgebra::DMatrix<f64>,
    values: &[f64],
) {
    let (omean, cov) = covariance_oracle(rows);
    let (ovalues, ovectors) = jacobi_eigen(&cov);
    for (a, b) in mean.iter().zip(&omean) {
        assert!((a - b).abs() < 1e-10);
    }
    let top = ovalues[0].abs().max(1e-300);
    for i in 0..basis.ncols() {
        assert!(
            (values[i] - ovalues[i]).abs() <= 1e-8 * top,
            "eigenvalue {i}"
        );
        let separated = (i == 0 || ovalues[i - 1] - ovalues[i] > 1e-6 * top)
            && (i + 1 == ovalues.len() || ovalues[i] - ovalues[i + 1] > 1e-6 * top);
        if separated {
            let col: Vec<f64> = basis.column(i).iter().copied().collect();
            assert!(
                sign_agnostic_gap(&col, &ovectors[i]) < 1e-8,
                "eigenvector {i}"
            );
        }
    }
}

#[test]
fn pca_and_rn_match_the_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in 2..=8 {
        for n in [d + 1, 2 * d + 3, 64] {
            let scales: Vec<f64> = (0..d).map(|j| 1.0 + j as f64).collect();
            let rows = gaussian_rows(n, d, &scales, &mut rng);
            let pca = fit_pca(&set(&rows), d).unwrap();
            assert_matches_oracle(&rows, &pca.mean, &pca.basis, &pca.eigenvalues);
            let rn = fit_rn(&set(&rows), d, true).unwrap();
            assert_matches_oracle(&rows, &rn.mean, &rn.rotation, &rn.eigenvalues);
        }
    }
}

#[test]
fn rn_output_matches_hand_whitening() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = gaussian_rows(50, 4, &[3.0, 2.0, 1.0, 0.5], &mut rng);
    let eps = 1e-3;
    let rn = fit_rn_with_epsilon(&set(&rows), 4, true, eps).unwrap();
    let (mean, cov) = covariance_oracle(&rows);
    let (values, vectors) = jacobi_eigen(&cov);
    for row in rows.iter().take(5) {
        let mut expect: Vec<f64> = vectors
            .iter()
            .zip(&values)
            .map(|(u, l)| {
                let p: f64 = u
                    .iter()
                    .zip(row)
                    .zip(&mean)
                    .map(|((u, x), m)| u * (x - m))
                    .sum();
                p / (l + eps * values[0]).sqrt()
            })
            .collect();
        let norm = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
        expect.iter_mut().for_each(|x| *x /= norm);
        let got = apply_rn(&rn, row).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g.abs() - e.abs()).abs() < 1e-9);
        }
    }
}

/// Covariance of the whitened coordinates before the final normalisation.
fn whitened_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let rn = fit_rn(&set(rows), rows[0].len(), true).unwrap();
    let scales = rn.scales();
    let out: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..rn.output_dim())
                .map(|j| {
                    let p: f64 = (0..r.len())
                        .map(|i| (r[i] - rn.mean[i]) * rn.rotation[(i, j)])
                        .sum();
                    p * scales[j]
                })
                .collect()
        })
        .collect();
    covariance_oracle(&out).1
}

fn assert_near_identity(c: &[Vec<f64>], tol: f64) {
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < tol, "entry ({i},{j}) = {v}");
        }
    }
}

#[test]
fn rn_whitening_gives_identity_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let iso = gaussian_rows(10_000, 4, &[], &mut rng);
    assert_near_identity(&whitened_covariance(&iso), 0.1);
    let aniso = gaussian_rows(10_000, 2, &[10.0, 1.0], &mut rng);
    assert_near_identity(&whitened_covariance(&aniso), 0.1);
}

#[test]
fn kmeans_finds_the_optimal_two_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..14)
        .map(|i| {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            vec![c + rng.gen_range(-1.0..1.0), c + rng.gen_range(-1.0..1.0)]
        })
        .collect();
    // brute force over every 2-partition
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1u32..(1 << rows.len()) - 1 {
        let mut means = vec![];
        let mut sse = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| ((mask >> i) & 1 == 1) == side)
                .map(|(_, r)| r)
                .collect();
            let m: Vec<f64> = (0..2)
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect();
            sse += members
                .iter()
                .map(|r| (r[0] - m[0]).powi(2) + (r[1] - m[1]).powi(2))
                .sum::<f64>();
            means.push(m);
        }
        if sse < best.0 {
            best = (sse, means);
        }
    }
    let c = fit_kmeans(&set(&rows), 2, 3).unwrap();
    for m in &best.1 {
        let found = c
            .centroids()
            .any(|cc| (cc[0] - m[0]).abs() < 1e-6 && (cc[1] - m[1]).abs() < 1e-6);
        assert!(found, "missing centroid {m:?}");
    }
}

#[test]
fn gmm_posteriors_match_direct_densities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rows = gaussian_rows(200, 2, &[], &mut rng);
    for (i, r) in rows.iter_mut().enumerate() {
        if i % 2 == 1 {
            r[0] += 12.0;
            r[1] += 12.0;
        }
    }
    let g = fit_gmm(&set(&rows), 2, 4).unwrap();
    for r in &rows {
        let dens: Vec<f64> = (0..2)
            .map(|j| g.weights[j] * gaussian_density(r, g.mean(j), g.variance(j)))
            .collect();
        let total: f64 = dens.iter().sum();
        let post = g.posteriors(r).unwrap();
        for j in 0..2 {
            assert!((post[j] - dens[j] / total).abs() < 1e-9);
        }
        assert!(post.iter().cloned().fold(0.0, f64::max) >= 0.99);
    }
}

#[test]
fn fisher_vector_matches_direct_densities() {
    let g = DiagonalGmm {
        dim: 2,
        weights: vec![0.3, 0.7],
        means: vec![0.0, 0.0, 1.5, -0.5],
        variances: vec![1.0, 0.5, 2.0, 1.5],
    };
    for x in [[0.2, 0.4], [1.0, -1.0], [3.0, 2.0]] {
        let dens: Vec<f64> = (0..2)
            .map(|j| g.weights[j] * gaussian_density(&x, g.mean(j), g.variance(j)))
            .collect();
        let total: f64 = dens.iter().sum();
        let mut expect = vec![0.0; 8];
        for j in 0..2 {
            let gamma = dens[j] / total;
            for i in 0..2 {
                let z = (x[i] - g.mean(j)[i]) / g.variance(j)[i].sqrt();
                expect[j * 2 + i] = gamma * z / g.weights[j].sqrt();
                expect[4 + j * 2 + i] = gamma * (z * z - 1.0) / (2.0 * g.weights[j]).sqrt();
            }
        }
        let norm = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = embed_fv(&g, &x).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn temb_drops_the_top_raw_eigenvector() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = Codebook::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let raw: Vec<Vec<f64>> = gaussian_rows(300, 3, &[], &mut rng)
        .into_iter()
        .map(|mut x| {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= n);
            embed_temb_raw(&c, &x).unwrap()
        })
        .collect();
    let p = fit_temb_projection(&set(&raw), 1).unwrap();
    let (_, cov) = covariance_oracle(&raw);
    let (_, vectors) = jacobi_eigen(&cov);
    let dropped: Vec<f64> = p.drop_basis.column(0).iter().copied().collect();
    assert!(sign_agnostic_gap(&dropped, &vectors[0]) < 1e-8);
    assert_eq!(p.output_dim(), 5);
}

#[test]
fn itq_loss_is_monotone_on_gaussian_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rows = gaussian_rows(300, 12, &[], &mut rng);
    let fit = fit_itq_traced(&set(&rows), 8, 50, ItqInit::Random(3)).unwrap();
    assert_eq!(fit.losses.len(), 50);
    for w in fit.losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
}

#[test]
fn ap_nineteen_over_twenty_four() {
    let truth = QueryTruth::new("q", ["a", "c"], Vec::<String>::new()).unwrap();
    let ap = average_precision(["a", "b", "c"], &truth).unwrap();
    assert!((ap - 19.0 / 24.0).abs() < 1e-15);
    let oracle = ap_oracle(&[Label::Positive, Label::Negative, Label::Positive], 2);
    assert!((oracle - 19.0 / 24.0).abs() < 1e-15);
}

#[test]
fn ap_matches_the_curve_oracle_on_small_lists() {
    let labels = [Label::Positive, Label::Negative, Label::Junk];
    for len in 1..=5usize {
        for code in 0..3usize.pow(len as u32) {
            let seq: Vec<Label> = (0..len)
                .map(|i| labels[code / 3usize.pow(i as u32) % 3])
                .collect();
            check_ap(&seq, 0);
            check_ap(&seq, 2);
        }
    }
}

fn check_ap(seq: &[Label], unretrieved: usize) {
    let names: Vec<String> = (0..seq.len()).map(|i| format!("i{i}")).collect();
    let mut pos: Vec<String> = names
        .iter()
        .zip(seq)
        .filter(|(_, &l)| l == Label::Positive)
        .map(|(n, _)| n.clone())
        .collect();
    pos.extend((0..unretrieved).map(|i| format!("missing{i}")));
    if pos.is_empty() {
        return;
    }
    let junk: Vec<String> = names
        .iter()
        .zip(seq)
        .filter(|(_, &l)| l == Label::Junk)
        .map(|(n, _)| n.clone())
        .collect();
    let truth = QueryTruth::new("q", pos.clone(), junk).unwrap();
    let ap = average_precision(names.iter().map(String::as_str), &truth).unwrap();
    assert!((ap - ap_oracle(seq, pos.len())).abs() < 1e-12, "{seq:?}");
}

#[test]
fn hamming_matches_bitwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for bits in [1usize, 7, 64, 65, 130, 512] {
        let words = bits.div_ceil(64);
        let mask = |w: usize| {
            if w + 1 == words && bits % 64 != 0 {
                (1u64 << (bits % 64)) - 1
            } else {
                u64::MAX
            }
        };
        for _ in 0..50 {
            let a: Vec<u64> = (0..words).map(|w| rng.gen::<u64>() & mask(w)).collect();
            let b: Vec<u64> = (0..words).map(|w| rng.gen::<u64>() & mask(w)).collect();
            assert_eq!(hamming_distance(&a, &b), hamming_oracle(&a, &b, bits));
        }
    }
}

fn dispersion(s: &[f64]) -> f64 {
    let max = s.iter().cloned().fold(f64::MIN, f64::max);
    let min = s.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

#[test]
fn democratic_weights_reduce_dispersion() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let rows: Vec<Vec<f64>> = (0..16)
        .map(|_| {
            let mut r: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
            r
        })
        .collect();
    let v = set(&rows);
    let k = gram(&v, true);
    let before = dispersion(&sinkhorn_sigma(&k, &vec![1.0; 16]));
    let lambda = democratic_weights(&v, &AggregationConfig::default()).unwrap();
    let after = dispersion(&sinkhorn_sigma(&k, &lambda));
    assert!(after < before, "{after} !< {before}");
}
