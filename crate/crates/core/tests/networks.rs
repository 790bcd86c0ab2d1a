//! Architecture contracts of the four networks.

use fpdeblur_core::networks::{
    discriminator_forward, generator_forward, init_params, patch_grid, receptive_field,
    ridge_extractor_forward, shape_table, verifier_forward, ModelParameters, NetConfig, NetKind,
};
use fpdeblur_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, 1, size, size], data).unwrap()
}

/// Random parameters far from the zero-bias initialization.
fn perturbed(kind: NetKind, cfg: &NetConfig, seed: u64) -> ModelParameters {
    let mut p = init_params(kind, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in p.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    p.quantize();
    p
}

#[test]
fn generator_emits_three_scales() {
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::Generator, &cfg, 1);
    let out = generator_forward(&p, &random_images(2, 64, 2)).unwrap();
    assert_eq!(out.quarter.shape(), &[2, 1, 16, 16]);
    assert_eq!(out.half.shape(), &[2, 1, 32, 32]);
    assert_eq!(out.full.shape(), &[2, 1, 64, 64]);
    for t in out.scales() {
        assert!(t.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn paper_generator_taps_are_64_and_128() {
    let cfg = NetConfig::default();
    let p = init_params(NetKind::Generator, &cfg, 3).unwrap();
    let out = generator_forward(&p, &random_images(1, 256, 4)).unwrap();
    assert_eq!(out.quarter.shape(), &[1, 1, 64, 64]);
    assert_eq!(out.half.shape(), &[1, 1, 128, 128]);
    assert_eq!(out.full.shape(), &[1, 1, 256, 256]);
}

#[test]
fn shallow_generator_taps_the_bottleneck() {
    let cfg = NetConfig {
        base_resolution: 16,
        unet_depth: 2,
        disc_kernel: 3,
        ..NetConfig::desk()
    };
    let p = perturbed(NetKind::Generator, &cfg, 5);
    let out = generator_forward(&p, &random_images(1, 16, 6)).unwrap();
    assert_eq!(out.quarter.shape(), &[1, 1, 4, 4]);
    assert_eq!(out.half.shape(), &[1, 1, 8, 8]);
}

#[test]
fn wrong_input_size_is_a_config_error() {
    let cfg = NetConfig::desk();
    let p = init_params(NetKind::Generator, &cfg, 1).unwrap();
    let err = generator_forward(&p, &random_images(1, 32, 1)).unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn ridge_extractor_preserves_size() {
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::RidgeExtractor, &cfg, 7);
    let y = ridge_extractor_forward(&p, &random_images(3, 64, 8)).unwrap();
    assert_eq!(y.shape(), &[3, 1, 64, 64]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn patchgan_receptive_field_and_grids() {
    assert_eq!(receptive_field(3, 4), 70);
    assert_eq!(receptive_field(1, 4), 16);
    assert_eq!(patch_grid(&NetConfig::default(), 2).unwrap(), 30);
    assert_eq!(patch_grid(&NetConfig::desk(), 2).unwrap(), 6);
    let cfg = NetConfig::desk();
    for scale in 0..3 {
        let p = perturbed(NetKind::Discriminator { scale }, &cfg, 9);
        let r = cfg.scale_resolution(scale);
        let logits =
            discriminator_forward(&p, &random_images(2, r, 10), &random_images(2, r, 11)).unwrap();
        let g = patch_grid(&cfg, scale).unwrap();
        assert_eq!(logits.shape(), &[2, 1, g, g]);
    }
}

#[test]
fn paper_patchgan_grid_is_30() {
    let cfg = NetConfig::default();
    let p = init_params(NetKind::Discriminator { scale: 2 }, &cfg, 1).unwrap();
    let x = random_images(1, 256, 2);
    let logits = discriminator_forward(&p, &x, &x).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 30, 30]);
}

#[test]
fn discriminator_distinguishes_condition_from_candidate() {
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::Discriminator { scale: 2 }, &cfg, 12);
    let (a, b) = (random_images(1, 64, 13), random_images(1, 64, 14));
    let ab = discriminator_forward(&p, &a, &b).unwrap();
    let ba = discriminator_forward(&p, &b, &a).unwrap();
    assert_ne!(ab, ba);
}

#[test]
fn discriminator_rejects_foreign_scale() {
    let cfg = NetConfig::desk();
    let p = init_params(NetKind::Discriminator { scale: 0 }, &cfg, 1).unwrap();
    let x = random_images(1, 64, 1);
    assert!(discriminator_forward(&p, &x, &x).is_err());
}

#[test]
fn verifier_shares_weights() {
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::Verifier, &cfg, 15);
    let (a, b) = (random_images(2, 64, 16), random_images(2, 64, 17));
    let (d, fa, fb) = verifier_forward(&p, &a, &a).unwrap();
    assert!(d.iter().all(|&v| v == 0.0));
    assert_eq!(fa, fb);
    assert_eq!(fa.stage_features.len(), 4);
    for i in 0..2 {
        let row = &fa.embedding.data()[i * 128..(i + 1) * 128];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }
    let (dab, _, _) = verifier_forward(&p, &a, &b).unwrap();
    let (dba, _, _) = verifier_forward(&p, &b, &a).unwrap();
    for (x, y) in dab.iter().zip(&dba) {
        assert!((x - y).abs() <= 1e-9);
        assert!(*x > 0.0);
    }
}

#[test]
fn forward_passes_are_deterministic() {
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::Generator, &cfg, 18);
    let x = random_images(2, 64, 19);
    assert_eq!(generator_forward(&p, &x).unwrap(), generator_forward(&p, &x).unwrap());
}

#[test]
fn desk_parameter_counts() {
    let cfg = NetConfig::desk();
    let count = |kind| init_params(kind, &cfg, 0).unwrap().count();
    assert_eq!(count(NetKind::Generator), 386_243);
    assert_eq!(count(NetKind::RidgeExtractor), 386_145);
    assert_eq!(count(NetKind::Discriminator { scale: 0 }), 42_609);
    assert_eq!(count(NetKind::Discriminator { scale: 2 }), 174_833);
    assert_eq!(count(NetKind::Verifier), 323_152);
}

#[test]
fn parameters_match_shape_table() {
    let cfg = NetConfig::desk();
    for kind in [NetKind::Generator, NetKind::Verifier, NetKind::Discriminator { scale: 0 }] {
        let p = init_params(kind, &cfg, 2).unwrap();
        for (name, shape) in shape_table(kind, &cfg).unwrap() {
            assert_eq!(p.tensors[&name].shape(), shape.as_slice());
        }
    }
}

#[test]
fn checkpoint_files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::desk();
    let p = perturbed(NetKind::Generator, &cfg, 20);
    let path = dir.path().join("g.ckpt");
    p.save(&path).unwrap();
    let back = ModelParameters::load(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.digest(), p.digest());
    assert!(ModelParameters::load_kind(&path, NetKind::Verifier).is_err());
}
