//! Data preparation and generator inference on the default rayon pool against
//! a single-thread pool. Build with `--no-default-features` to measure the
//! sequential fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fpdeblur_core::dataops::{crop_centered, gabor_ridge_map, gaussian_blur, synth_fingerprint, BlurConfig, GaborParams};
use fpdeblur_core::networks::{generator_forward, init_params, NetConfig, NetKind};
use fpdeblur_tensor::{par, Tensor};

fn bench(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mode = if par::is_parallel() { "rayon" } else { "sequential-build" };
    let (print, _) = synth_fingerprint(1, 256);
    let blur = BlurConfig::from_sigma(7.0).unwrap();
    let gabor = GaborParams::default();
    let cfg = NetConfig::desk();
    let generator = init_params(NetKind::Generator, &cfg, 1).unwrap();
    let crops: Vec<Tensor> = [(64, 64), (192, 64), (64, 192), (192, 192)]
        .iter()
        .map(|&(x, y)| crop_centered(&print, x, y, 64).unwrap().to_tensor())
        .collect();
    let crops = Tensor::stack(&crops).unwrap();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    let mut pair = |name: &str, f: &(dyn Fn() + Sync)| {
        group.bench_function(BenchmarkId::new(name, mode), |b| b.iter(f));
        group.bench_function(BenchmarkId::new(name, "one-thread"), |b| b.iter(|| single.install(f)));
    };
    pair("blur_sigma7_256", &|| {
        gaussian_blur(&print, &blur).unwrap();
    });
    pair("gabor_ridge_map_256", &|| {
        gabor_ridge_map(&print, &gabor).unwrap();
    });
    pair("generator_forward_4x64", &|| {
        generator_forward(&generator, &crops).unwrap();
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
