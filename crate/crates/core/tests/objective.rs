//! Loss terms: closed forms, oracles and gradient correctness.

mod common;

use common::micro::{micro, plain_total, taped};
use common::{micro_config, perturbed, random_images};
use fpdeblur_core::networks::{generator_forward, ridge_extractor_forward, verifier_embed, NetConfig, NetKind};
use fpdeblur_core::objective::{
    adversarial_losses, downsample_target, feature_loss, reconstruction_loss, ridge_loss, total_generator_loss,
    verifier_feature_loss, AblationFlags, LossWeights, Variant,
};
use fpdeblur_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn micro_generator_is_small() {
    let m = micro();
    assert!(m.generator.count() <= 1000, "{}", m.generator.count());
}

#[test]
fn taped_and_plain_totals_agree() {
    let m = micro();
    let w = LossWeights::default();
    for variant in Variant::ALL {
        let flags = variant.flags();
        let (total, report, ..) = taped(&m, &w, &flags);
        let plain = plain_total(&m, &m.generator, &w, &flags);
        assert!((total - plain).abs() <= 1e-9 * plain.abs().max(1.0), "{variant:?}: {total} vs {plain}");
        assert_eq!(report.active_terms, flags.active_terms());
    }
}

#[test]
fn generator_gradient_matches_central_differences() {
    let m = micro();
    let w = LossWeights::default();
    let flags = AblationFlags::default();
    let (_, report, grads, _, frozen) = taped(&m, &w, &flags);
    assert!(frozen.is_empty(), "frozen networks received gradients");
    assert!(report.ridge > 0.0 && report.verif > 0.0);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (name, grad) in grads {
        for i in 0..grad.len() {
            let mut plus = m.generator.clone();
            plus.tensors.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = m.generator.clone();
            minus.tensors.get_mut(&name).unwrap().data_mut()[i] -= h;
            let numeric = (plain_total(&m, &plus, &w, &flags) - plain_total(&m, &minus, &w, &flags)) / (2.0 * h);
            let analytic = grad.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            assert!(err <= 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric}");
        }
    }
    eprintln!("worst relative gradient error {worst:.2e}");
}

#[test]
fn disabling_a_term_equals_zero_weight() {
    let m = micro();
    let base = LossWeights::default();
    let cases = [
        (
            AblationFlags { no_ridge: true, ..AblationFlags::default() },
            LossWeights { lambda_ridge: 0.0, ..base },
        ),
        (
            AblationFlags { no_verifier: true, ..AblationFlags::default() },
            LossWeights { lambda_verif: 0.0, ..base },
        ),
    ];
    for (flags, zeroed) in cases {
        let a = plain_total(&m, &m.generator, &base, &flags);
        let b = plain_total(&m, &m.generator, &zeroed, &AblationFlags::default());
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        let (ta, ..) = taped(&m, &base, &flags);
        let (tb, ..) = taped(&m, &zeroed, &AblationFlags::default());
        assert!((ta - tb).abs() <= 1e-12, "{ta} vs {tb}");
    }
}

#[test]
fn reconstruction_closed_forms() {
    let cfg = NetConfig { base_resolution: 16, ..micro_config() };
    let y = random_images(1, 16, 3);
    let exact = fpdeblur_core::networks::GeneratorOutputs {
        quarter: downsample_target(&y, 4).unwrap(),
        half: downsample_target(&y, 2).unwrap(),
        full: y.clone(),
    };
    assert_eq!(reconstruction_loss(&exact, &y).unwrap(), [0.0; 3]);

    let ones = Tensor::full(&[1, 1, 16, 16], 1.0);
    let zeros = fpdeblur_core::networks::GeneratorOutputs {
        quarter: Tensor::zeros(&[1, 1, 4, 4]),
        half: Tensor::zeros(&[1, 1, 8, 8]),
        full: Tensor::zeros(&[1, 1, 16, 16]),
    };
    assert_eq!(reconstruction_loss(&zeros, &ones).unwrap(), [1.0; 3]);

    let g = perturbed(NetKind::Generator, &cfg, 4, 0.3);
    let out = generator_forward(&g, &random_images(1, 16, 5)).unwrap();
    let rec = reconstruction_loss(&out, &y).unwrap();
    // Direct summation with block means taken by hand.
    for (s, factor) in [4usize, 2, 1].into_iter().enumerate() {
        let side = 16 / factor;
        let mut total = 0.0;
        for by in 0..side {
            for bx in 0..side {
                let mut mean = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        mean += y.data()[(by * factor + dy) * 16 + bx * factor + dx];
                    }
                }
                mean /= (factor * factor) as f64;
                total += (out.scales()[s].data()[by * side + bx] - mean).abs();
            }
        }
        assert!((rec[s] - total / (side * side) as f64).abs() <= 1e-9);
    }
}

#[test]
fn factor_four_is_factor_two_twice() {
    let y = random_images(2, 16, 6);
    let once = downsample_target(&y, 4).unwrap();
    let twice = downsample_target(&downsample_target(&y, 2).unwrap(), 2).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn ridge_loss_is_forward_then_l1() {
    let m = micro();
    let g = random_images(2, 8, 7);
    let a = ridge_extractor_forward(&m.ridge, &m.y).unwrap();
    let b = ridge_extractor_forward(&m.ridge, &g).unwrap();
    let manual = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
    assert!((ridge_loss(&m.ridge, &m.y, &g).unwrap() - manual).abs() <= 1e-9);
    assert_eq!(ridge_loss(&m.ridge, &m.y, &m.y).unwrap(), 0.0);
}

#[test]
fn single_stage_verifier_loss_by_hand() {
    let cfg = NetConfig { verifier_blocks: 1, ..micro_config() };
    let v = perturbed(NetKind::Verifier, &cfg, 8, 0.3);
    let (y, g) = (random_images(2, 8, 9), random_images(2, 8, 10));
    let fy = verifier_embed(&v, &y).unwrap();
    let fg = verifier_embed(&v, &g).unwrap();
    assert_eq!(fy.stage_features.len(), 1);
    let (a, b) = (&fy.stage_features[0], &fg.stage_features[0]);
    let manual = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    assert!((verifier_feature_loss(&v, &y, &g).unwrap() - manual).abs() <= 1e-9);
    assert_eq!(verifier_feature_loss(&v, &y, &y).unwrap(), 0.0);
}

#[test]
fn doubling_feature_difference_quadruples_loss() {
    let a = random_images(2, 4, 11);
    let b = random_images(2, 4, 12);
    let far = Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + 2.0 * (y - x)).collect(),
    )
    .unwrap();
    let l1 = feature_loss(std::slice::from_ref(&a), &[b]).unwrap();
    let l2 = feature_loss(&[a], &[far]).unwrap();
    assert!((l2 - 4.0 * l1).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adversarial_terms_ignore_patch_order(values in prop::collection::vec(-10.0..10.0f64, 16), shift in 1usize..16) {
        let grid = |v: Vec<f64>| Tensor::new(vec![1, 1, 4, 4], v).unwrap();
        let mut rotated = values.clone();
        rotated.rotate_left(shift);
        let (g1, d1) = adversarial_losses(&[grid(values.clone())], &[grid(values.clone())]).unwrap();
        let (g2, d2) = adversarial_losses(&[grid(rotated.clone())], &[grid(rotated)]).unwrap();
        prop_assert!((g1[0] - g2[0]).abs() <= 1e-12 && (d1[0] - d2[0]).abs() <= 1e-12);
        prop_assert!(g1[0] >= 0.0 && d1[0] >= 0.0);
    }

    #[test]
    fn totals_are_non_negative(g in prop::array::uniform3(0.0..5.0f64), rec in prop::array::uniform3(0.0..1.0f64), ridge in 0.0..1.0f64, verif in 0.0..10.0f64, v in 0usize..6) {
        let flags = Variant::ALL[v].flags();
        let r = total_generator_loss(g, rec, ridge, verif, &LossWeights::default(), &flags).unwrap();
        prop_assert!(r.total >= 0.0);
    }

    #[test]
    fn contrastive_is_non_negative(d in 0.0..3.0f64, same: bool, margin in 0.1..2.0f64) {
        prop_assert!(fpdeblur_core::objective::contrastive_loss(d, same, margin).unwrap() >= 0.0);
    }
}
