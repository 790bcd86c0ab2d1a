//! Corpus construction, blur oracle and preprocessing invariants.

use std::collections::BTreeSet;

use fpdeblur_core::dataops::{
    build_dataset, crop_centered, gabor_ridge_map, gaussian_blur, gaussian_kernel, load_samples,
    preprocess_sample, synth_fingerprint, BlurConfig, DatasetManifest, DatasetSource, GaborParams,
    GrayImage, Split, SplitFractions, synth_impression_with_period, DEFAULT_RIDGE_PERIOD,
};
use proptest::prelude::*;

mod common;

use common::oracles::dense_blur;

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = GrayImage> {
    prop::collection::vec(0.0..=1.0f64, w * h).prop_map(move |d| GrayImage::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn separable_blur_equals_dense(img in image_strategy(64, 64), sigma in prop::sample::select(vec![1.0, 2.5, 3.0, 5.0])) {
        let fast = gaussian_blur(&img, &BlurConfig::from_sigma(sigma).unwrap()).unwrap();
        let slow = dense_blur(&img, sigma);
        let err = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-10, "max error {err}");
    }

    #[test]
    fn kernel_is_normalized(sigma in 0.3..12.0f64) {
        let cfg = BlurConfig::from_sigma(sigma).unwrap();
        prop_assert_eq!(cfg.kernel_size % 2, 1);
        let sum: f64 = gaussian_kernel(&cfg).iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn crops_have_requested_size(cx in -40isize..140, cy in -40isize..140, size in 8usize..80) {
        let img = GrayImage::from_fn(100, 90, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap();
        let c = crop_centered(&img, cx, cy, size).unwrap();
        prop_assert_eq!((c.width(), c.height()), (size, size));
    }

    #[test]
    fn ridge_maps_are_binary(img in image_strategy(32, 32)) {
        let map = gabor_ridge_map(&img, &GaborParams::default()).unwrap();
        prop_assert!(map.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn integer_sigmas_give_paper_kernel_sizes() {
    let sizes: Vec<usize> = [3.0, 5.0, 7.0]
        .iter()
        .map(|&s| BlurConfig::from_sigma(s).unwrap().kernel_size)
        .collect();
    assert_eq!(sizes, vec![17, 29, 41]);
}

#[test]
fn ridge_maps_survive_brightness_offset_on_prints() {
    for seed in 0..3 {
        let (img, _) = synth_fingerprint(seed, 128);
        let dim = GrayImage::from_fn(128, 128, |x, y| 0.7 * img.get(x, y)).unwrap();
        let lit = GrayImage::from_fn(128, 128, |x, y| dim.get(x, y) + 0.3).unwrap();
        let a = gabor_ridge_map(&dim, &GaborParams::default()).unwrap();
        let b = gabor_ridge_map(&lit, &GaborParams::default()).unwrap();
        let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
        assert!(same as f64 >= 0.99 * a.data().len() as f64);
    }
}

#[test]
fn preprocessing_is_idempotent_on_centered_crops() {
    for seed in 0..5 {
        let (img, _) = synth_fingerprint(seed, 256);
        let once = preprocess_sample(&img, 128).unwrap();
        assert_eq!((once.width(), once.height()), (128, 128));
        let (_, core) = fpdeblur_core::dataops::detect_core(&once).unwrap();
        let off = (core.x - 64.0).hypot(core.y - 64.0);
        assert!(off <= 5.0, "seed {seed}: re-detected core {off:.2} px from center");
    }
}

#[test]
fn synthetic_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let source = DatasetSource::Synthetic {
        subjects: 10,
        impressions: 4,
        seed: 3,
        ridge_period: DEFAULT_RIDGE_PERIOD,
    };
    let manifest = build_dataset(
        &source,
        &[3.0, 5.0, 7.0],
        64,
        &SplitFractions::default(),
        &GaborParams::default(),
        dir.path(),
    )
    .unwrap();
    assert_eq!(manifest.records.len(), 120);

    let sets: Vec<BTreeSet<&str>> = Split::ALL.iter().map(|&s| manifest.subjects(s)).collect();
    for i in 0..3 {
        assert!(!sets[i].is_empty());
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }

    let reread = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(reread, manifest);

    // Stored blurred images equal the blur of the stored clean image, up to
    // 8-bit quantization.
    for split in Split::ALL {
        for s in load_samples(&reread, split).unwrap() {
            let again = gaussian_blur(&s.clean, &BlurConfig::from_sigma(s.sigma).unwrap()).unwrap();
            let err = again
                .data()
                .iter()
                .zip(s.blurred.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0, "{} σ={}: {err}", s.subject_id, s.sigma);
            assert!(s.ridge.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}

#[test]
fn directory_source_groups_by_subject() {
    let src = tempfile::tempdir().unwrap();
    for (subject, seed) in [("alice", 1u64), ("bob", 2), ("carol", 3)] {
        let sub = src.path().join(subject);
        std::fs::create_dir(&sub).unwrap();
        for imp in 0..2u64 {
            let (img, _) = fpdeblur_core::dataops::synth_impression(seed, imp, 128);
            img.write_png(&sub.join(format!("{imp}.png"))).unwrap();
        }
    }
    let out = tempfile::tempdir().unwrap();
    let source = DatasetSource::Directory {
        path: src.path().to_path_buf(),
    };
    let m = build_dataset(&source, &[5.0], 64, &SplitFractions::default(), &GaborParams::default(), out.path()).unwrap();
    assert_eq!(m.records.len(), 6);
    let subjects: BTreeSet<&str> = m.records.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(subjects, BTreeSet::from(["alice", "bob", "carol"]));
}

#[test]
fn empty_source_is_an_error() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let source = DatasetSource::Directory {
        path: src.path().to_path_buf(),
    };
    assert!(build_dataset(&source, &[5.0], 64, &SplitFractions::default(), &GaborParams::default(), out.path()).is_err());
}

#[test]
fn unwritable_output_is_an_error() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let source = DatasetSource::Synthetic {
        subjects: 2,
        impressions: 1,
        seed: 0,
        ridge_period: DEFAULT_RIDGE_PERIOD,
    };
    let target = file.path().join("sub");
    assert!(build_dataset(&source, &[5.0], 64, &SplitFractions::default(), &GaborParams::default(), &target).is_err());
}

#[test]
fn synthetic_corpus_matches_the_public_generator() {
    let dir = tempfile::tempdir().unwrap();
    let period = [12.0, 16.0];
    let source = DatasetSource::Synthetic {
        subjects: 2,
        impressions: 2,
        seed: 0,
        ridge_period: period,
    };
    let m = build_dataset(&source, &[3.0], 64, &SplitFractions::default(), &GaborParams::default(), dir.path())
        .unwrap();
    let rec = m.records.iter().find(|r| r.clean_path.ends_with("s0001_01.png")).unwrap();
    let stored = GrayImage::read_png(&m.resolve(&rec.clean_path)).unwrap();
    let seed = 1u64; // subject 1 under corpus seed 0
    let (raw, _) = synth_impression_with_period(seed, 1, 128, period);
    assert_eq!(stored, preprocess_sample(&raw, 64).unwrap().quantized());
}

#[test]
fn invalid_ridge_period_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for period in [[9.0, 9.0], [1.0, 4.0], [10.0, 40.0]] {
        let source = DatasetSource::Synthetic {
            subjects: 2,
            impressions: 1,
            seed: 0,
            ridge_period: period,
        };
        let err = build_dataset(&source, &[3.0], 64, &SplitFractions::default(), &GaborParams::default(), dir.path());
        assert!(matches!(err, Err(fpdeblur_core::Error::Config(_))), "{period:?}");
    }
}
