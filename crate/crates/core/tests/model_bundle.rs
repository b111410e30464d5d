mod common;

use convmask::model::{load_model, save_model};
use convmask::pipeline::{
    fit_pipeline, run_eval, ImageInput, PipelineConfig, PipelineModel, SearchMode,
};
use convmask::retrieval::{hamming_distance, GroundTruth, QueryTruth};
use convmask::store::{read_matrix, write_matrix};
use convmask::synthetic::PartScenes;
use convmask::tensor::KeypointList;
use convmask::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(embed: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("embed", embed),
        ("dim", "8"),
        ("codebook_size", "4"),
        ("drop", if embed == "temb" { "4" } else { "0" }),
        ("mask", "max"),
        ("bits", "16"),
        ("whiten", "off"),
        ("seed", "3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn images(objects: usize, per_object: usize, seed: u64) -> Vec<ImageInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = PartScenes::new(6, 6, 16, objects, 4, &mut rng);
    (0..objects * per_object)
        .map(|i| ImageInput {
            name: format!("img{:03}_o{}", i, i % objects),
            layers: vec![scenes.sample(i % objects, &mut rng)],
            keypoints: None,
        })
        .collect()
}

fn small_model(embed: &str) -> (PipelineModel, Vec<ImageInput>) {
    let imgs = images(3, 30, 21);
    (fit_pipeline(&imgs, &small_config(embed)).unwrap(), imgs)
}

#[test]
fn bundle_round_trip_encodes_identically() {
    for embed in ["temb", "vlad", "fv"] {
        let (model, imgs) = small_model(embed);
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        for im in imgs.iter().take(10) {
            let a = model.encode_image(im).unwrap();
            let b = loaded.encode_image(im).unwrap();
            assert_eq!(a.descriptor, b.descriptor, "{embed}");
            assert_eq!(a.code, b.code, "{embed}");
        }
    }
}

#[test]
fn missing_blob_and_bad_shape_are_rejected() {
    let (model, _) = small_model("temb");
    let dir = tempfile::tempdir().unwrap();
    save_model(&model, dir.path()).unwrap();

    let basis = dir.path().join("pca_basis.mat");
    let (rows, cols, _) = read_matrix(std::fs::File::open(&basis).unwrap()).unwrap();
    assert_eq!((rows, cols), (16, 8));
    let wide = vec![0.0f32; rows * (cols + 1)];
    write_matrix(
        rows,
        cols + 1,
        &wide,
        std::fs::File::create(&basis).unwrap(),
    )
    .unwrap();
    match load_model(dir.path()) {
        Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "pca_basis"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }

    std::fs::remove_file(&basis).unwrap();
    match load_model(dir.path()) {
        Err(Error::MissingBlob(name)) => assert!(name.contains("pca_basis")),
        other => panic!("expected a missing blob, got {other:?}"),
    }
}

#[test]
fn wrong_format_version_is_rejected() {
    let (model, _) = small_model("vlad");
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_model(&model, dir.path()).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replace("convmask-model/1", "convmask-model/9"),
    )
    .unwrap();
    assert!(matches!(
        load_model(dir.path()),
        Err(Error::VersionMismatch(_))
    ));
}

#[test]
fn identical_tensors_give_identical_codes() {
    let (model, imgs) = small_model("temb");
    let a = model.encode_tensor(&imgs[0].layers[0], None).unwrap();
    let b = model
        .encode_tensor(&imgs[0].layers[0].clone(), None)
        .unwrap();
    assert_eq!(a.descriptor, b.descriptor);
    assert_eq!(a.code, b.code);
}

#[test]
fn sift_mask_falls_back_to_all_locations_without_keypoints_found() {
    let imgs = images(3, 30, 22);
    let mut cfg = small_config("temb");
    cfg.set("mask", "sift").unwrap();
    let train: Vec<ImageInput> = imgs
        .iter()
        .cloned()
        .map(|mut im| {
            im.keypoints = Some(
                KeypointList::new(96, 96, vec![(10.0, 12.0), (50.0, 70.0), (95.0, 3.0)]).unwrap(),
            );
            im
        })
        .collect();
    let model = fit_pipeline(&train, &cfg).unwrap();
    let t = &imgs[0].layers[0];
    let empty = KeypointList::new(96, 96, vec![]).unwrap();
    cfg.set("mask", "none").unwrap();
    let mut unmasked = model.clone();
    unmasked.config = cfg;
    assert_eq!(
        model.encode_tensor(t, Some(&empty)).unwrap().descriptor,
        unmasked.encode_tensor(t, None).unwrap().descriptor
    );
    assert!(model.encode_tensor(t, None).is_err());
}

#[test]
fn codes_are_closer_within_a_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let scenes = PartScenes::new(8, 8, 64, 30, 6, &mut rng);
    let train: Vec<ImageInput> = (0..600)
        .map(|i| ImageInput {
            name: format!("t{i}"),
            layers: vec![scenes.sample(i % 30, &mut rng)],
            keypoints: None,
        })
        .collect();
    let mut cfg = common::e2e_config();
    cfg.set("bits", "64").unwrap();
    let model = fit_pipeline(&train, &cfg).unwrap();
    let codes: Vec<(usize, Vec<u64>)> = (0..3)
        .flat_map(|o| (0..10).map(move |_| o))
        .map(|o| {
            (
                o,
                model
                    .encode_tensor(&scenes.sample(o, &mut rng), None)
                    .unwrap()
                    .code
                    .unwrap(),
            )
        })
        .collect();
    let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
    for (i, (oa, a)) in codes.iter().enumerate() {
        for (ob, b) in &codes[i + 1..] {
            let d = hamming_distance(a, b) as f64;
            let slot = if oa == ob { &mut intra } else { &mut inter };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    assert!(intra.0 / (intra.1 as f64) < inter.0 / (inter.1 as f64));
}

#[test]
fn eval_rejects_queries_missing_from_the_ground_truth() {
    let (model, imgs) = small_model("temb");
    let gt =
        GroundTruth::new([
            QueryTruth::new("someone_else", ["img000_o0"], Vec::<String>::new()).unwrap(),
        ])
        .unwrap();
    let err = run_eval(&model, &imgs[..10], &imgs[10..11], &gt, SearchMode::Real).unwrap_err();
    assert!(err.to_string().contains(&imgs[10].name));
}

#[test]
fn invalid_combinations_fail_before_fitting() {
    let imgs = images(2, 3, 1);
    let mut cfg = small_config("vlad");
    cfg.drop = 4;
    assert!(fit_pipeline(&imgs, &cfg).unwrap_err().is_config());
    let mut cfg = small_config("temb");
    cfg.set("bits", "512").unwrap();
    assert!(fit_pipeline(&imgs, &cfg).unwrap_err().is_config());
}
