#![allow(dead_code)]

use std::path::Path;

use convmask::pipeline::{ImageInput, PipelineConfig};
use convmask::retrieval::{GroundTruth, QueryTruth};
use convmask::store::save_tensor;
use convmask::synthetic::PartScenes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SCENE_SEED: u64 = 20_240_917;
pub const EVAL_OBJECTS: usize = 3;
pub const IMAGES_PER_OBJECT: usize = 20;
pub const QUERIES_PER_OBJECT: usize = 2;
pub const TRAIN_OBJECTS: usize = 30;
pub const TRAIN_PER_OBJECT: usize = 20;

pub struct Scenario {
    pub train: Vec<ImageInput>,
    pub db: Vec<ImageInput>,
    pub queries: Vec<ImageInput>,
    pub gt: GroundTruth,
}

fn image(name: String, t: convmask::FeatureTensor) -> ImageInput {
    ImageInput {
        name,
        layers: vec![t],
        keypoints: None,
    }
}

/// Three objects in the database, twenty images each, plus held-out queries
/// of the same objects. Training images come from a larger object pool.
pub fn scenario() -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(SCENE_SEED);
    let scenes = PartScenes::new(8, 8, 64, TRAIN_OBJECTS, 6, &mut rng);
    let mut train = Vec::new();
    for o in 0..TRAIN_OBJECTS {
        for i in 0..TRAIN_PER_OBJECT {
            train.push(image(
                format!("train_{o:02}_{i:02}"),
                scenes.sample(o, &mut rng),
            ));
        }
    }
    let mut db = Vec::new();
    let mut queries = Vec::new();
    let mut truths = Vec::new();
    for o in 0..EVAL_OBJECTS {
        let members: Vec<String> = (0..IMAGES_PER_OBJECT)
            .map(|i| format!("obj{o}_{i:02}"))
            .collect();
        for name in &members {
            db.push(image(name.clone(), scenes.sample(o, &mut rng)));
        }
        for q in 0..QUERIES_PER_OBJECT {
            let name = format!("query{o}_{q}");
            queries.push(image(name.clone(), scenes.sample(o, &mut rng)));
            truths.push(QueryTruth::new(name, members.clone(), Vec::<String>::new()).unwrap());
        }
    }
    Scenario {
        train,
        db,
        queries,
        gt: GroundTruth::new(truths).unwrap(),
    }
}

pub fn e2e_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::preset("D512").unwrap();
    cfg.set("bits", "512").unwrap();
    cfg.set("mask", "max").unwrap();
    cfg.set("whiten", "off").unwrap();
    cfg
}

/// Writes `<name>.conv5_3.cft` for every image.
pub fn write_images(dir: &Path, images: &[ImageInput]) {
    std::fs::create_dir_all(dir).unwrap();
    for im in images {
        save_tensor(&im.layers[0], dir.join(format!("{}.conv5_3.cft", im.name))).unwrap();
    }
}

/// Oxford-style ground-truth files for `gt`.
pub fn write_gt(dir: &Path, queries: &[ImageInput], gt: &GroundTruth) {
    std::fs::create_dir_all(dir).unwrap();
    for q in queries {
        let truth = gt.get(&q.name).unwrap();
        std::fs::write(
            dir.join(format!("{}_query.txt", q.name)),
            format!("{} 0 0 8 8\n", q.name),
        )
        .unwrap();
        let good: String = truth.positives.iter().map(|p| format!("{p}\n")).collect();
        std::fs::write(dir.join(format!("{}_good.txt", q.name)), good).unwrap();
        std::fs::write(dir.join(format!("{}_ok.txt", q.name)), "").unwrap();
        std::fs::write(dir.join(format!("{}_junk.txt", q.name)), "").unwrap();
    }
}

/// Sample covariance with the `1/n` convention, plain loops.
pub fn covariance_oracle(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-32 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| v.iter().map(|row| row[i]).collect())
        .collect();
    (values, vectors)
}

/// Distance between two vectors up to a global sign.
pub fn sign_agnostic_gap(a: &[f64], b: &[f64]) -> f64 {
    let plus = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let minus = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x + y).abs())
        .fold(0.0, f64::max);
    plus.min(minus)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Label {
    Positive,
    Negative,
    Junk,
}

/// Area under the interpolated precision/recall curve. The curve starts at
/// (recall 0, precision 1); junk items are skipped entirely.
pub fn ap_oracle(labels: &[Label], total_positives: usize) -> f64 {
    let kept: Vec<Label> = labels
        .iter()
        .copied()
        .filter(|&l| l != Label::Junk)
        .collect();
    let mut curve = vec![(0.0f64, 1.0f64)];
    let mut hits = 0usize;
    for (k, &l) in kept.iter().enumerate() {
        if l == Label::Positive {
            hits += 1;
        }
        curve.push((
            hits as f64 / total_positives as f64,
            hits as f64 / (k + 1) as f64,
        ));
    }
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Counts differing bits one position at a time.
pub fn hamming_oracle(a: &[u64], b: &[u64], bits: usize) -> u32 {
    (0..bits)
        .filter(|&i| ((a[i / 64] >> (i % 64)) & 1) != ((b[i / 64] >> (i % 64)) & 1))
        .count() as u32
}

/// Diagonal Gaussian density evaluated directly.
pub fn gaussian_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| {
            (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        })
        .product()
}

/// Seeded standard-normal rows.
pub fn gaussian_rows(n: usize, d: usize, scales: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scales.get(j).copied().unwrap_or(1.0)
                })
                .collect()
        })
        .collect()
}
