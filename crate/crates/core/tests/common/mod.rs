//! Fixtures shared by several test targets.
#![allow(dead_code)]

pub mod micro;
pub mod oracles;

use fpdeblur_core::networks::{init_params, ModelParameters, NetConfig, NetKind};
use fpdeblur_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8² networks small enough for finite differences on every parameter.
pub fn micro_config() -> NetConfig {
    NetConfig {
        base_resolution: 8,
        base_channels: 2,
        unet_depth: 2,
        max_channels: 4,
        verifier_blocks: 2,
        verifier_blocks_per_stage: 1,
        verifier_channels: 2,
        embedding_dim: 4,
        patchgan_layers: 1,
        disc_channels: 2,
        disc_kernel: 3,
        ..NetConfig::default()
    }
}

pub fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, 1, size, size], data).unwrap()
}

/// Initialized parameters shifted by uniform noise in `±spread`, so that
/// biases are non-zero and activations are not degenerate.
pub fn perturbed(kind: NetKind, cfg: &NetConfig, seed: u64, spread: f64) -> ModelParameters {
    let mut p = init_params(kind, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for t in p.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-spread..spread));
    }
    p
}

/// Writes a manifest of smooth random `size²` prints: `subjects` subjects
/// with `impressions` each at blur σ=`sigma`, split 4:1:1 by subject
/// (remaining subjects go to train).
pub fn tiny_manifest(
    dir: &std::path::Path,
    subjects: usize,
    impressions: usize,
    size: usize,
    sigma: f64,
) -> fpdeblur_core::dataops::DatasetManifest {
    use fpdeblur_core::dataops::{
        gaussian_blur, BlurConfig, DatasetManifest, GrayImage, ManifestRecord, Split, MANIFEST_FILE,
        MANIFEST_VERSION,
    };
    for sub in ["clean", "ridge", "blurred"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let blur = BlurConfig {
        sigma,
        kernel_size: 5,
    };
    let mut records = Vec::new();
    for s in 0..subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
        let (fx, fy, ph) = (
            rng.random_range(0.3..1.2),
            rng.random_range(0.3..1.2),
            rng.random_range(0.0..6.0),
        );
        let split = match s {
            4 => Split::Val,
            5 => Split::Test,
            _ => Split::Train,
        };
        for i in 0..impressions {
            let shift = i as f64 * 0.3;
            let clean = GrayImage::from_fn(size, size, |x, y| {
                0.5 + 0.4 * ((x as f64 * fx + shift) + (y as f64 * fy) + ph).sin()
            })
            .unwrap()
            .quantized();
            let ridge = GrayImage::from_fn(size, size, |x, y| {
                if clean.get(x, y) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap();
            let blurred = gaussian_blur(&clean, &blur).unwrap().quantized();
            let stem = format!("s{s:02}_{i}");
            let paths = [
                format!("clean/{stem}.png"),
                format!("ridge/{stem}.png"),
                format!("blurred/{stem}.png"),
            ];
            clean.write_png(&dir.join(&paths[0])).unwrap();
            ridge.write_png(&dir.join(&paths[1])).unwrap();
            blurred.write_png(&dir.join(&paths[2])).unwrap();
            records.push(ManifestRecord {
                subject_id: format!("s{s:02}"),
                sigma,
                blurred_path: paths[2].clone(),
                clean_path: paths[0].clone(),
                ridge_path: paths[1].clone(),
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        crop_size: size,
        records,
        root: dir.to_path_buf(),
    };
    manifest.write(&dir.join(MANIFEST_FILE)).unwrap();
    DatasetManifest::read(dir).unwrap()
}
