//! Zero-mean Gabor filter bank: ridge maps, response energy and foreground
//! segmentation.

use std::f64::consts::PI;

use fpdeblur_tensor::par;
use serde::{Deserialize, Serialize};

use super::{gaussian_blur, reflect_index, BlurConfig, GrayImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaborParams {
    /// Ridge frequency in cycles per pixel.
    pub frequency: f64,
    pub orientations: usize,
    pub kernel_size: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            frequency: 1.0 / 8.0,
            orientations: 8,
            kernel_size: 21,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency < 0.5) {
            return Err(Error::Config(format!(
                "Gabor frequency must lie in (0, 0.5), got {}",
                self.frequency
            )));
        }
        if self.orientations == 0 || self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "need ≥1 orientation and an odd kernel size, got {} / {}",
                self.orientations, self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Quadrature pairs of Gabor kernels, one per wave orientation.
///
/// Even kernels are made exactly zero-mean by removing a scaled copy of the
/// envelope. Both kernels are scaled to unit gain for a matched sinusoid.
#[derive(Debug, Clone)]
pub struct GaborBank {
    pub params: GaborParams,
    pub even: Vec<Vec<f64>>,
    pub odd: Vec<Vec<f64>>,
}

pub fn gabor_bank(params: &GaborParams) -> Result<GaborBank> {
    params.validate()?;
    let k = params.kernel_size;
    let r = (k / 2) as f64;
    let sigma = 0.5 / params.frequency;
    let mut even = Vec::with_capacity(params.orientations);
    let mut odd = Vec::with_capacity(params.orientations);
    for o in 0..params.orientations {
        let theta = PI * o as f64 / params.orientations as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let mut env = vec![0.0; k * k];
        let mut phase = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                let (dx, dy) = (x as f64 - r, y as f64 - r);
                let u = dx * c + dy * s;
                env[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                phase[y * k + x] = 2.0 * PI * params.frequency * u;
            }
        }
        let env_sum: f64 = env.iter().sum();
        let dc: f64 = env.iter().zip(&phase).map(|(e, p)| e * p.cos()).sum::<f64>() / env_sum;
        let mut ev: Vec<f64> = env
            .iter()
            .zip(&phase)
            .map(|(e, p)| e * (p.cos() - dc))
            .collect();
        let mut od: Vec<f64> = env.iter().zip(&phase).map(|(e, p)| e * p.sin()).collect();
        // Unit response to cos/sin of the matched wave at the kernel center.
        let ge: f64 = ev.iter().zip(&phase).map(|(v, p)| v * p.cos()).sum();
        let go: f64 = od.iter().zip(&phase).map(|(v, p)| v * p.sin()).sum();
        ev.iter_mut().for_each(|v| *v /= ge);
        od.iter_mut().for_each(|v| *v /= go);
        even.push(ev);
        odd.push(od);
    }
    Ok(GaborBank {
        params: *params,
        even,
        odd,
    })
}

/// Correlation of `img` with a square kernel, reflect borders.
fn correlate(img: &GrayImage, kernel: &[f64], k: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let r = (k / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0; w * h];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        for ky in 0..k {
            let sy = reflect_index(y as isize + ky as isize - r, h);
            let line = &src[sy * w..(sy + 1) * w];
            let taps = &kernel[ky * k..(ky + 1) * k];
            for (x, o) in row.iter_mut().enumerate() {
                let x0 = x as isize - r;
                let mut acc = 0.0;
                if x0 >= 0 && x0 as usize + k <= w {
                    let seg = &line[x0 as usize..x0 as usize + k];
                    for (t, v) in taps.iter().zip(seg) {
                        acc += t * v;
                    }
                } else {
                    for (kx, t) in taps.iter().enumerate() {
                        acc += t * line[reflect_index(x0 + kx as isize, w)];
                    }
                }
                *o += acc;
            }
        }
    });
    out
}

/// Per-pixel responses of the whole bank: `(even, odd)` per orientation.
fn bank_responses(img: &GrayImage, bank: &GaborBank) -> Vec<(Vec<f64>, Vec<f64>)> {
    let k = bank.params.kernel_size;
    (0..bank.even.len())
        .map(|o| {
            (
                correlate(img, &bank.even[o], k),
                correlate(img, &bank.odd[o], k),
            )
        })
        .collect()
}

/// Maximum quadrature energy `sqrt(even² + odd²)` over orientations, per pixel.
pub fn gabor_energy(img: &GrayImage, bank: &GaborBank) -> Vec<f64> {
    let responses = bank_responses(img, bank);
    let n = img.width() * img.height();
    (0..n)
        .map(|i| {
            responses
                .iter()
                .map(|(e, o)| e[i].hypot(o[i]))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Threshold below which an even response counts as zero.
const RESPONSE_EPS: f64 = 1e-9;

/// Binary ridge map: at each pixel the orientation with the largest quadrature
/// energy is selected and its even (ridge-centered) response is binarized at 0.
pub fn gabor_ridge_map(img: &GrayImage, params: &GaborParams) -> Result<GrayImage> {
    let bank = gabor_bank(params)?;
    let responses = bank_responses(img, &bank);
    let n = img.width() * img.height();
    let data = (0..n)
        .map(|i| {
            let (mut best, mut even) = (-1.0, 0.0);
            for (e, o) in &responses {
                let energy = e[i].hypot(o[i]);
                if energy > best {
                    best = energy;
                    even = e[i];
                }
            }
            if even > RESPONSE_EPS {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    GrayImage::new(img.width(), img.height(), data)
}

/// Foreground mask from Gabor energy, Otsu thresholding and a 5×5 closing.
pub fn segment_foreground(img: &GrayImage) -> GrayImage {
    let bank = gabor_bank(&GaborParams::default()).expect("default Gabor parameters are valid");
    segment_with_bank(img, &bank)
}

pub(crate) fn segment_with_bank(img: &GrayImage, bank: &GaborBank) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let energy = gabor_energy(img, bank);
    let max = energy.iter().cloned().fold(0.0, f64::max);
    if max < 1e-6 {
        return GrayImage::new(w, h, vec![0.0; w * h]).expect("valid dims");
    }
    let normalized = GrayImage::new(w, h, energy.iter().map(|e| e / max).collect())
        .expect("energy normalized to [0, 1]");
    let smooth = match gaussian_blur(&normalized, &SEGMENT_SMOOTHING) {
        Ok(s) => s,
        Err(_) => normalized,
    };
    // Otsu alone splits a print that fills the whole frame; the cap keeps
    // every clearly textured pixel.
    let t = otsu_threshold(smooth.data(), 1.0).min(SEGMENT_CAP * max_of(smooth.data()));
    let mask: Vec<bool> = smooth.data().iter().map(|&e| e > t).collect();
    let closed = erode(&dilate(&mask, w, h, 2), w, h, 2);
    GrayImage::new(w, h, closed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .expect("valid dims")
}

const SEGMENT_SMOOTHING: BlurConfig = BlurConfig {
    sigma: 2.0,
    kernel_size: 11,
};
const SEGMENT_CAP: f64 = 0.4;

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Otsu threshold over a 256-bin histogram of `[0, max]`.
fn otsu_threshold(values: &[f64], max: f64) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = ((v / max) * (BINS - 1) as f64).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = i;
        }
    }
    (best_t as f64 + 0.5) / (BINS - 1) as f64 * max
}

fn morph(mask: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let ys = y.saturating_sub(r)..=(y + r).min(h - 1);
            let mut hit = !dilate;
            'win: for yy in ys {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    if mask[yy * w + xx] == dilate {
                        hit = dilate;
                        break 'win;
                    }
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, true)
}

fn erode(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agreement(a: &GrayImage, b: &GrayImage) -> f64 {
        let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
        same as f64 / a.data().len() as f64
    }

    #[test]
    fn even_kernels_have_no_dc() {
        let bank = gabor_bank(&GaborParams::default()).unwrap();
        for k in bank.even.iter().chain(&bank.odd) {
            assert!(k.iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn parameters_are_validated() {
        let bad = GaborParams {
            frequency: 0.5,
            ..GaborParams::default()
        };
        assert!(gabor_bank(&bad).is_err());
        let even = GaborParams {
            kernel_size: 20,
            ..GaborParams::default()
        };
        assert!(gabor_bank(&even).is_err());
    }

    #[test]
    fn ridge_map_recovers_sinusoid_phase() {
        let f = 1.0 / 8.0;
        for angle in [0.0, 0.5, 1.3, 2.2] {
            let (c, s) = (f64::cos(angle), f64::sin(angle));
            let wave = |x: usize, y: usize| (2.0 * PI * f * (x as f64 * c + y as f64 * s)).cos();
            let img = GrayImage::from_fn(96, 96, |x, y| 0.5 + 0.4 * wave(x, y)).unwrap();
            let truth = GrayImage::from_fn(96, 96, |x, y| if wave(x, y) > 0.0 { 1.0 } else { 0.0 })
                .unwrap();
            let map = gabor_ridge_map(&img, &GaborParams::default()).unwrap();
            assert!(agreement(&map, &truth) >= 0.9, "angle {angle}");
        }
    }

    #[test]
    fn ridge_map_of_uniform_image_is_empty() {
        let img = GrayImage::from_fn(40, 40, |_, _| 0.7).unwrap();
        let map = gabor_ridge_map(&img, &GaborParams::default()).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ridge_map_ignores_brightness_offset() {
        let img = crate::dataops::synth_fingerprint(3, 96).0;
        let dimmed = GrayImage::from_fn(96, 96, |x, y| img.get(x, y) * 0.7).unwrap();
        let bright = GrayImage::from_fn(96, 96, |x, y| dimmed.get(x, y) + 0.3).unwrap();
        let p = GaborParams::default();
        let a = gabor_ridge_map(&dimmed, &p).unwrap();
        let b = gabor_ridge_map(&bright, &p).unwrap();
        assert!(agreement(&a, &b) >= 0.99);
    }

    #[test]
    fn segmentation_finds_ridge_patch() {
        let (size, x0, x1) = (160usize, 32usize, 128usize);
        let inside = |x: usize, y: usize| (x0..x1).contains(&x) && (x0..x1).contains(&y);
        let img = GrayImage::from_fn(size, size, |x, y| {
            if inside(x, y) {
                0.5 + 0.45 * (2.0 * PI * (x as f64 * 0.8 + y as f64 * 0.6) / 8.0).cos()
            } else {
                0.0
            }
        })
        .unwrap();
        let mask = segment_foreground(&img);
        let (mut fg_hit, mut fg, mut bg_hit, mut bg) = (0, 0, 0, 0);
        for y in 0..size {
            for x in 0..size {
                let on = mask.get(x, y) == 1.0;
                if inside(x, y) {
                    fg += 1;
                    fg_hit += on as usize;
                } else {
                    bg += 1;
                    bg_hit += on as usize;
                }
            }
        }
        assert!(fg_hit as f64 >= 0.95 * fg as f64, "{fg_hit}/{fg}");
        assert!(bg_hit as f64 <= 0.05 * bg as f64, "{bg_hit}/{bg}");
    }

    #[test]
    fn segmentation_of_uniform_image_is_empty() {
        let img = GrayImage::from_fn(64, 64, |_, _| 0.5).unwrap();
        assert!(segment_foreground(&img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segmentation_is_binary_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..48 * 48).map(|_| rng.random::<f64>()).collect();
        let img = GrayImage::new(48, 48, noise).unwrap();
        assert!(segment_foreground(&img)
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
    }
}
