//! Seeded synthetic fingerprints.
//!
//! A subject is a ridge orientation field with one singular point (whorl or
//! loop), a ridge period, a low-frequency pressure pattern and a finger
//! outline. Ridges are grown by repeatedly filtering seeded noise with Gabor
//! kernels aligned to the field. Impressions of a subject differ by a small
//! rigid motion, contrast and sensor noise.

use std::f64::consts::PI;

use fpdeblur_tensor::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::clamp_unit;
use super::{CoreLocation, GrayImage};

const ANGLE_BINS: usize = 32;
const GROWTH_ITERATIONS: usize = 12;

/// Default range of the per-subject ridge period, in pixels.
pub const DEFAULT_RIDGE_PERIOD: [f64; 2] = [6.5, 9.5];

/// Smallest supported output side.
pub const MIN_SYNTH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Whorl { twist: f64 },
    Loop { delta: (f64, f64) },
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    amplitude: f64,
}

/// Everything that identifies a finger, in the master frame.
pub(crate) struct Subject {
    pattern: Pattern,
    core: (f64, f64),
    base_angle: f64,
    period: f64,
    /// `(amplitude, kx, ky, phase)` of smooth orientation perturbations.
    warps: Vec<(f64, f64, f64, f64)>,
    pressure: Vec<Blob>,
    outline_center: (f64, f64),
    outline_axes: (f64, f64),
    outline_tilt: f64,
    ridges: Vec<f64>,
    side: usize,
    kernel: usize,
    /// Output side of every impression.
    size: usize,
}

impl Subject {
    /// `size` must already be at least [`MIN_SYNTH_SIZE`]; the period is drawn
    /// from `[period[0], period[1])`.
    pub(crate) fn new(seed: u64, size: usize, period: [f64; 2]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let kernel = 2 * (0.65 * period[1]).round() as usize + 1;
        let pad = (s * 0.15).ceil() + kernel as f64;
        let side = (s + 2.0 * pad) as usize;
        let mid = side as f64 / 2.0;
        let core = (
            mid + rng.random_range(-0.06..0.06) * s,
            mid + rng.random_range(-0.06..0.06) * s,
        );
        let base_angle = rng.random_range(-0.3..0.3);
        let pattern = if rng.random_bool(0.4) {
            Pattern::Whorl {
                twist: rng.random_range(0.0..0.5),
            }
        } else {
            let dist = rng.random_range(0.35..0.5) * s;
            let dir = PI / 2.0 + base_angle + rng.random_range(-0.3..0.3);
            Pattern::Loop {
                delta: (core.0 + dist * dir.cos(), core.1 + dist * dir.sin()),
            }
        };
        let period = rng.random_range(period[0]..period[1]);
        let warps = (0..3)
            .map(|_| {
                let k = rng.random_range(0.5..1.5) * 2.0 * PI / s;
                let dir: f64 = rng.random_range(0.0..2.0 * PI);
                (
                    rng.random_range(0.05..0.15),
                    k * dir.cos(),
                    k * dir.sin(),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let pressure = (0..4)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Blob {
                    x: core.0 + rng.random_range(-0.3..0.3) * s,
                    y: core.1 + rng.random_range(-0.3..0.3) * s,
                    radius: rng.random_range(0.08..0.16) * s,
                    amplitude: sign * rng.random_range(0.08..0.18),
                }
            })
            .collect();
        let outline_center = (
            core.0 + rng.random_range(-0.08..0.08) * s,
            core.1 + rng.random_range(0.05..0.15) * s,
        );
        let outline_axes = (
            rng.random_range(0.38..0.46) * s,
            rng.random_range(0.5..0.6) * s,
        );
        let outline_tilt = rng.random_range(-0.2..0.2);
        let mut subject = Self {
            pattern,
            core,
            base_angle,
            period,
            warps,
            pressure,
            outline_center,
            outline_axes,
            outline_tilt,
            ridges: Vec::new(),
            side,
            kernel,
            size,
        };
        subject.ridges = subject.grow_ridges(&mut rng);
        subject
    }

    /// Ridge direction (mod π) at a master-frame point.
    fn orientation(&self, x: f64, y: f64) -> f64 {
        let (cx, cy) = self.core;
        let around_core = (y - cy).atan2(x - cx);
        let base = match self.pattern {
            Pattern::Whorl { twist } => around_core + PI / 2.0 + twist,
            Pattern::Loop { delta } => {
                let around_delta = (y - delta.1).atan2(x - delta.0);
                0.5 * (around_core - around_delta) + self.base_angle
            }
        };
        let warp: f64 = self
            .warps
            .iter()
            .map(|&(a, kx, ky, ph)| a * (kx * x + ky * y + ph).sin())
            .sum();
        base + warp
    }

    fn pressure_at(&self, x: f64, y: f64) -> f64 {
        0.5 + self
            .pressure
            .iter()
            .map(|b| {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum::<f64>()
    }

    /// Soft finger outline: 1 inside, 0 outside, 2 px ramp.
    fn outline_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.outline_center.0, y - self.outline_center.1);
        let (c, s) = (self.outline_tilt.cos(), self.outline_tilt.sin());
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        let (a, b) = self.outline_axes;
        let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
        // Distance to the boundary along the radius, approximately.
        let edge = (1.0 - r) * a.min(b);
        (edge / 2.0 + 0.5).clamp(0.0, 1.0)
    }

    fn grow_ridges(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.side;
        let size = self.kernel;
        let kernels = ridge_kernels(self.period, size);
        let bins: Vec<usize> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let t = self.orientation(x, y).rem_euclid(PI);
                ((t / PI * ANGLE_BINS as f64).round() as usize) % ANGLE_BINS
            })
            .collect();
        let mut field: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = (size / 2) as isize;
        for _ in 0..GROWTH_ITERATIONS {
            let src = field.clone();
            par::for_each_chunk_mut(&mut field, n, |y, row| {
                for (x, out) in row.iter_mut().enumerate() {
                    let k = &kernels[bins[y * n + x]];
                    let mut acc = 0.0;
                    for ky in 0..size {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        let line = &src[sy as usize * n..(sy as usize + 1) * n];
                        for kx in 0..size {
                            let sx = x as isize + kx as isize - r;
                            if sx >= 0 && sx < n as isize {
                                acc += k[ky * size + kx] * line[sx as usize];
                            }
                        }
                    }
                    *out = acc;
                }
            });
            let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64)
                .sqrt()
                .max(1e-12);
            field.iter_mut().for_each(|v| *v = (2.0 * *v / rms).tanh());
        }
        field
    }

    fn ridge_at(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.ridges, self.side, x - 0.5, y - 0.5)
    }
}

/// Zero-mean Gabor kernels whose wave runs across ridges of each direction bin.
fn ridge_kernels(period: f64, size: usize) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let sigma = 0.45 * period;
    (0..ANGLE_BINS)
        .map(|b| {
            let ridge = PI * b as f64 / ANGLE_BINS as f64;
            let (c, s) = ((ridge + PI / 2.0).cos(), (ridge + PI / 2.0).sin());
            let mut k: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (dx, dy) = ((i % size) as f64 - r, (i / size) as f64 - r);
                    let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    env * (2.0 * PI * (dx * c + dy * s) / period).cos()
                })
                .collect();
            let mean = k.iter().sum::<f64>() / k.len() as f64;
            k.iter_mut().for_each(|v| *v -= mean);
            let norm: f64 = k.iter().map(|v| v.abs()).sum();
            k.iter_mut().for_each(|v| *v /= norm);
            k
        })
        .collect()
}

fn bilinear(data: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (n - 1) as f64);
    let y = y.clamp(0.0, (n - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = data[y0 * n + x0] * (1.0 - fx) + data[y0 * n + x1] * fx;
    let bottom = data[y1 * n + x0] * (1.0 - fx) + data[y1 * n + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// One impression of subject `seed`, `size × size`, with the true core location.
///
/// Impression 0 is [`synth_fingerprint`]. Sizes below [`MIN_SYNTH_SIZE`] are
/// raised to it.
pub fn synth_impression(seed: u64, impression: u64, size: usize) -> (GrayImage, CoreLocation) {
    synth_impression_with_period(seed, impression, size, DEFAULT_RIDGE_PERIOD)
}

/// [`synth_impression`] with the subject's ridge period drawn from
/// `[period[0], period[1])` pixels.
pub fn synth_impression_with_period(
    seed: u64,
    impression: u64,
    size: usize,
    period: [f64; 2],
) -> (GrayImage, CoreLocation) {
    let size = size.max(MIN_SYNTH_SIZE);
    Subject::new(seed, size, period).impression(seed, impression)
}

impl Subject {
    /// Renders impression `impression` of the subject built from `seed`.
    pub(crate) fn impression(&self, seed: u64, impression: u64) -> (GrayImage, CoreLocation) {
        let size = self.size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(impression + 1);
        let s = size as f64;
        let angle: f64 = rng.random_range(-5.0..5.0f64).to_radians();
        let shift = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let contrast = rng.random_range(0.9..1.1);
        let brightness = rng.random_range(-0.03..0.03);
        let noise = Normal::new(0.0, 0.03).expect("valid std");
        let noise: Vec<f64> = (0..size * size).map(|_| noise.sample(&mut rng)).collect();

        let master_mid = self.side as f64 / 2.0;
        let out_mid = s / 2.0;
        let (c, sn) = (angle.cos(), angle.sin());
        // Output point p maps to master point R(−angle)(p − mid − shift) + master_mid.
        let to_master = |x: f64, y: f64| {
            let (dx, dy) = (x - out_mid - shift.0, y - out_mid - shift.1);
            (
                c * dx + sn * dy + master_mid,
                -sn * dx + c * dy + master_mid,
            )
        };
        let img = GrayImage::from_fn(size, size, |x, y| {
            let (mx, my) = to_master(x as f64 + 0.5, y as f64 + 0.5);
            let outline = self.outline_at(mx, my);
            if outline == 0.0 {
                return 0.0;
            }
            let v = contrast * (self.pressure_at(mx, my) + 0.35 * self.ridge_at(mx, my))
                + brightness
                + noise[y * size + x];
            clamp_unit(outline * v)
        })
        .expect("synthetic size is valid");
        let (dx, dy) = (self.core.0 - master_mid, self.core.1 - master_mid);
        let core = CoreLocation {
            x: out_mid + shift.0 + c * dx - sn * dy,
            y: out_mid + shift.1 + sn * dx + c * dy,
            confidence: 1.0,
        };
        (img, core)
    }
}

/// Impression 0 of subject `seed`.
pub fn synth_fingerprint(seed: u64, size: usize) -> (GrayImage, CoreLocation) {
    synth_impression(seed, 0, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataops::{
        detect_core, estimate_orientation, gaussian_blur, locate_core, preprocess_sample, BlurConfig,
        ORIENTATION_BLOCK,
    };

    fn mean_abs_diff(a: &GrayImage, b: &GrayImage) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, ca) = synth_fingerprint(7, 96);
        let (b, cb) = synth_fingerprint(7, 96);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
    }

    #[test]
    fn different_seeds_differ() {
        let (a, _) = synth_fingerprint(1, 128);
        let (b, _) = synth_fingerprint(2, 128);
        let d = mean_abs_diff(&a, &b);
        assert!(d > 0.05, "{d}");
    }

    #[test]
    fn low_frequencies_carry_identity() {
        let blur = BlurConfig::from_sigma(5.0).unwrap();
        let crop = |seed, imp| {
            let (img, _) = synth_impression(seed, imp, 128);
            gaussian_blur(&preprocess_sample(&img, 64).unwrap(), &blur).unwrap()
        };
        for seed in [11, 20, 35] {
            let (a, b, c) = (crop(seed, 0), crop(seed, 1), crop(seed + 1, 0));
            assert_ne!(a, b);
            assert!(mean_abs_diff(&a, &b) < mean_abs_diff(&a, &c), "seed {seed}");
        }
    }

    #[test]
    fn reported_core_matches_detected_core() {
        for seed in 0..8 {
            let (img, truth) = synth_fingerprint(seed, 256);
            let field = estimate_orientation(&img, ORIENTATION_BLOCK).unwrap();
            let found = locate_core(&field).unwrap();
            let err = (found.x - truth.x).hypot(found.y - truth.y);
            assert!(err <= 5.0, "seed {seed}: {found:?} vs {truth:?}");
        }
    }

    #[test]
    fn small_prints_keep_core_near_center() {
        for seed in 0..8 {
            let (img, truth) = synth_fingerprint(seed, 128);
            let (_, found) = detect_core(&img).unwrap();
            let err = (found.x - truth.x).hypot(found.y - truth.y);
            assert!(err <= 5.0, "seed {seed}: {found:?} vs {truth:?}");
        }
    }
}
