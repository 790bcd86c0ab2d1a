//! Block orientation field and Poincaré-index core detection.
//!
//! Angles use image coordinates: `x` to the right, `y` downwards, measured from
//! the `+x` axis towards `+y`, modulo π. A field angle is the direction ridges
//! *flow*, which is perpendicular to the dominant intensity gradient: vertical
//! ridges have a horizontal gradient and report π/2.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{reflect_index, GrayImage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationField {
    pub block_size: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Ridge flow angle per block, in `[0, π)`.
    pub angles: Vec<f64>,
    /// Anisotropy of the block gradients, in `[0, 1]`.
    pub coherence: Vec<f64>,
    /// Stride of the dense field used to refine singular points.
    pub fine_step: usize,
    pub fine_width: usize,
    pub fine_height: usize,
    /// Coherence-weighted doubled-angle ridge vectors on the dense grid, each
    /// estimated over a block-sized window centered on its grid point.
    pub fine: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreLocation {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl OrientationField {
    pub fn angle(&self, bx: usize, by: usize) -> f64 {
        self.angles[by * self.grid_width + bx]
    }

    pub fn coherence_at(&self, bx: usize, by: usize) -> f64 {
        self.coherence[by * self.grid_width + bx]
    }

    /// Pixel center of block `(bx, by)`, clipped to the image for partial blocks.
    pub fn block_center(&self, bx: usize, by: usize) -> (f64, f64) {
        let b = self.block_size as f64;
        let cx = ((bx as f64 + 0.5) * b).min((bx as f64 * b + self.image_width as f64) / 2.0);
        let cy = ((by as f64 + 0.5) * b).min((by as f64 * b + self.image_height as f64) / 2.0);
        (cx, cy)
    }

    /// Zeroes coherence (and angle) of blocks whose foreground fraction in
    /// `mask` is below `min_fraction`.
    pub fn mask_background(&mut self, mask: &GrayImage, min_fraction: f64) {
        let b = self.block_size;
        for by in 0..self.grid_height {
            for bx in 0..self.grid_width {
                let (x1, y1) = (
                    ((bx + 1) * b).min(mask.width()),
                    ((by + 1) * b).min(mask.height()),
                );
                let mut on = 0usize;
                let mut total = 0usize;
                for y in by * b..y1 {
                    for x in bx * b..x1 {
                        total += 1;
                        if mask.get(x, y) > 0.5 {
                            on += 1;
                        }
                    }
                }
                if total == 0 || (on as f64) < min_fraction * total as f64 {
                    let i = by * self.grid_width + bx;
                    self.coherence[i] = 0.0;
                    self.angles[i] = 0.0;
                }
            }
        }
        for fy in 0..self.fine_height {
            for fx in 0..self.fine_width {
                let bx = ((fx * self.fine_step) / b).min(self.grid_width - 1);
                let by = ((fy * self.fine_step) / b).min(self.grid_height - 1);
                if self.coherence[by * self.grid_width + bx] == 0.0 {
                    self.fine[fy * self.fine_width + fx] = [0.0, 0.0];
                }
            }
        }
    }

    /// Coherence-weighted doubled-angle vector of each block.
    fn doubled_vectors(&self) -> Vec<(f64, f64)> {
        self.angles
            .iter()
            .zip(&self.coherence)
            .map(|(&a, &c)| (c * (2.0 * a).cos(), c * (2.0 * a).sin()))
            .collect()
    }
}

/// Sobel gradients with reflect borders.
fn sobel(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let px = |x: isize, y: isize| img.get(reflect_index(x, w), reflect_index(y, h));
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            gy[i] = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Least-squares dominant ridge orientation per `block_size` block.
///
/// Flat blocks (no gradient energy) get coherence 0 and angle 0.
pub fn estimate_orientation(img: &GrayImage, block_size: usize) -> Result<OrientationField> {
    let (w, h) = (img.width(), img.height());
    if block_size == 0 || block_size >= w.max(h) {
        return Err(Error::Config(format!(
            "block size {block_size} does not fit a {w}x{h} image"
        )));
    }
    let (gx, gy) = sobel(img);
    let gw = w.div_ceil(block_size);
    let gh = h.div_ceil(block_size);
    let mut angles = vec![0.0; gw * gh];
    let mut coherence = vec![0.0; gw * gh];
    for by in 0..gh {
        for bx in 0..gw {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for y in by * block_size..((by + 1) * block_size).min(h) {
                for x in bx * block_size..((bx + 1) * block_size).min(w) {
                    let (a, b) = (gx[y * w + x], gy[y * w + x]);
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let energy = sxx + syy;
            let i = by * gw + bx;
            if energy <= 1e-12 {
                continue;
            }
            let gradient = 0.5 * (2.0 * sxy).atan2(sxx - syy);
            angles[i] = (gradient + FRAC_PI_2).rem_euclid(PI);
            coherence[i] = (((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt() / energy).clamp(0.0, 1.0);
        }
    }
    let fine_step = (block_size / 4).max(1);
    let (fine_width, fine_height) = (w.div_ceil(fine_step), h.div_ceil(fine_step));
    let sums = [
        integral(&gx, &gx, w, h),
        integral(&gy, &gy, w, h),
        integral(&gx, &gy, w, h),
    ];
    let half = block_size as f64 / 2.0;
    let mut fine = vec![[0.0, 0.0]; fine_width * fine_height];
    for fy in 0..fine_height {
        for fx in 0..fine_width {
            let span = |i: usize, n: usize| {
                let c = (i as f64 + 0.5) * fine_step as f64;
                let lo = (c - half).round().max(0.0) as usize;
                let hi = ((c + half).round() as usize).min(n);
                (lo, hi)
            };
            let (x0, x1) = span(fx, w);
            let (y0, y1) = span(fy, h);
            let [sxx, syy, sxy] = sums.each_ref().map(|s| window_sum(s, w, x0, y0, x1, y1));
            let energy = sxx + syy;
            if energy > 1e-12 {
                // Ridge direction is the gradient direction turned by π/2,
                // which negates the doubled-angle vector.
                fine[fy * fine_width + fx] = [-(sxx - syy) / energy, -2.0 * sxy / energy];
            }
        }
    }
    Ok(OrientationField {
        block_size,
        grid_width: gw,
        grid_height: gh,
        image_width: w,
        image_height: h,
        angles,
        coherence,
        fine_step,
        fine_width,
        fine_height,
        fine,
    })
}

/// Summed-area table of `a·b` with a zero first row and column.
fn integral(a: &[f64], b: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += a[y * w + x] * b[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let at = |x: usize, y: usize| s[y * (w + 1) + x];
    at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)
}

/// Orientation difference wrapped into `(−π/2, π/2]`.
fn wrap_half(d: f64) -> f64 {
    let mut d = d.rem_euclid(PI);
    if d > FRAC_PI_2 {
        d -= PI;
    }
    d
}

/// Poincaré sum (radians) of a closed loop of doubled-angle vectors.
fn loop_sum(vectors: &[(f64, f64)]) -> f64 {
    let angle = |v: &(f64, f64)| 0.5 * v.1.atan2(v.0);
    let mut total = 0.0;
    for k in 0..vectors.len() {
        let a = angle(&vectors[k]);
        let b = angle(&vectors[(k + 1) % vectors.len()]);
        total += wrap_half(b - a);
    }
    total
}

/// Minimum Poincaré sum, in radians, that counts as a core (index ≥ ½ with slack).
const CORE_SUM: f64 = 0.75 * PI;

/// Locates the core as the strongest positive Poincaré singularity.
///
/// Candidates are blocks whose ring of 8 neighbours winds by at least half a
/// turn in orientation. The winner has the highest index, then the highest
/// coherence-weighted response, then comes first in row-major order. Its
/// position is refined by sliding a circular loop over the bilinearly
/// interpolated field and taking the centroid of loop centers that enclose
/// the singularity. Without any candidate the image center is returned with
/// confidence 0.
pub fn locate_core(field: &OrientationField) -> Result<CoreLocation> {
    let (gw, gh) = (field.grid_width, field.grid_height);
    if gw < 4 || gh < 4 {
        return Err(Error::Data(format!(
            "orientation field {gw}x{gh} is smaller than 4x4 blocks"
        )));
    }
    let fallback = CoreLocation {
        x: field.image_width as f64 / 2.0,
        y: field.image_height as f64 / 2.0,
        confidence: 0.0,
    };
    let smoothed = smooth_vectors(&field.doubled_vectors(), gw, gh);
    const RING: [(isize, isize); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
        (-1, 0),
    ];
    let mut best: Option<(i64, f64, usize, usize)> = None;
    for by in 1..gh - 1 {
        for bx in 1..gw - 1 {
            let ring: Vec<(f64, f64)> = RING
                .iter()
                .map(|(dx, dy)| {
                    smoothed[(by as isize + dy) as usize * gw + (bx as isize + dx) as usize]
                })
                .collect();
            let weight = ring
                .iter()
                .map(|v| v.0.hypot(v.1))
                .fold(f64::INFINITY, f64::min);
            if weight < 1e-6 {
                continue;
            }
            let sum = loop_sum(&ring);
            if sum < CORE_SUM {
                continue;
            }
            let level = (sum / PI).round() as i64;
            let response = weight * sum / PI;
            let better = match best {
                None => true,
                Some((bl, br, _, _)) => level > bl || (level == bl && response > br),
            };
            if better {
                best = Some((level, response, bx, by));
            }
        }
    }
    let Some((level, _, bx, by)) = best else {
        log::debug!("no core candidate in {gw}x{gh} field; using image center");
        return Ok(fallback);
    };
    let (cx, cy) = field.block_center(bx, by);
    let (mut x, mut y) = (cx, cy);
    for _ in 0..3 {
        match refine(field, x, y, level) {
            Some(p) => (x, y) = p,
            None => break,
        }
    }
    let confidence = (level as f64 / 2.0).clamp(0.0, 1.0);
    Ok(CoreLocation {
        x: x.clamp(0.0, field.image_width as f64 - 1.0),
        y: y.clamp(0.0, field.image_height as f64 - 1.0),
        confidence,
    })
}

fn smooth_vectors(v: &[(f64, f64)], gw: usize, gh: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); v.len()];
    for by in 0..gh {
        for bx in 0..gw {
            let mut acc = (0.0, 0.0);
            let mut n = 0.0;
            for y in by.saturating_sub(1)..=(by + 1).min(gh - 1) {
                for x in bx.saturating_sub(1)..=(bx + 1).min(gw - 1) {
                    acc.0 += v[y * gw + x].0;
                    acc.1 += v[y * gw + x].1;
                    n += 1.0;
                }
            }
            out[by * gw + bx] = (acc.0 / n, acc.1 / n);
        }
    }
    out
}

/// Bilinear interpolation of the dense field at pixel `(x, y)`; `None`
/// outside the hull of grid points.
fn interpolate(field: &OrientationField, x: f64, y: f64) -> Option<(f64, f64)> {
    let step = field.fine_step as f64;
    let gx = x / step - 0.5;
    let gy = y / step - 0.5;
    if gx < 0.0 || gy < 0.0 {
        return None;
    }
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    if x0 + 1 >= field.fine_width || y0 + 1 >= field.fine_height {
        return None;
    }
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let at = |xx: usize, yy: usize| field.fine[yy * field.fine_width + xx];
    let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
    let lerp = |k: usize| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    };
    Some((lerp(0), lerp(1)))
}

/// Centroid of the centers of circular loops that enclose a singularity of
/// at least `level` half-turns, searched within 2.5 blocks of `(cx, cy)`.
fn refine(field: &OrientationField, cx: f64, cy: f64, level: i64) -> Option<(f64, f64)> {
    const SAMPLES: usize = 32;
    let threshold = (level as f64 - 0.5) * PI;
    let b = field.block_size as f64;
    let radius = b;
    let reach = 2.5 * b;
    let step = (b / 8.0).max(1.0);
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    let steps = (reach / step).ceil() as isize;
    for iy in -steps..=steps {
        for ix in -steps..=steps {
            let (px, py) = (cx + ix as f64 * step, cy + iy as f64 * step);
            let ring: Option<Vec<(f64, f64)>> = (0..SAMPLES)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / SAMPLES as f64;
                    interpolate(field, px + radius * t.cos(), py + radius * t.sin())
                })
                .collect();
            let Some(ring) = ring else { continue };
            if ring.iter().any(|p| p.0.hypot(p.1) < 1e-9) {
                continue;
            }
            if loop_sum(&ring) >= threshold {
                sx += px;
                sy += py;
                count += 1;
            }
        }
    }
    (count > 0).then(|| (sx / count as f64, sy / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sinusoid(size: usize, ridge_angle: f64, period: f64) -> GrayImage {
        // Intensity varies along the normal to the ridge direction.
        let (nx, ny) = (-ridge_angle.sin(), ridge_angle.cos());
        GrayImage::from_fn(size, size, |x, y| {
            0.5 + 0.4 * (2.0 * PI * (x as f64 * nx + y as f64 * ny) / period).cos()
        })
        .unwrap()
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        wrap_half(a - b).abs()
    }

    #[test]
    fn vertical_ridges_report_half_pi() {
        let img = GrayImage::from_fn(128, 128, |x, _| 0.5 + 0.4 * (2.0 * PI * x as f64 / 8.0).cos())
            .unwrap();
        let f = estimate_orientation(&img, 16).unwrap();
        assert_eq!((f.grid_width, f.grid_height), (8, 8));
        for (a, c) in f.angles.iter().zip(&f.coherence) {
            assert!(*c > 0.9);
            assert!(angle_diff(*a, FRAC_PI_2) <= 0.05, "angle {a}");
        }
    }

    #[test]
    fn rotation_shifts_angles() {
        let base = estimate_orientation(&sinusoid(128, 0.3, 8.0), 16).unwrap();
        for theta in [0.4, 1.1, 2.0, 2.9] {
            let rot = estimate_orientation(&sinusoid(128, 0.3 + theta, 8.0), 16).unwrap();
            for i in 0..base.angles.len() {
                if base.coherence[i] > 0.8 && rot.coherence[i] > 0.8 {
                    let expected = (base.angles[i] + theta).rem_euclid(PI);
                    assert!(angle_diff(rot.angles[i], expected) < 0.1);
                }
            }
        }
    }

    #[test]
    fn uniform_image_has_zero_coherence() {
        let img = GrayImage::from_fn(64, 48, |_, _| 0.6).unwrap();
        let f = estimate_orientation(&img, 16).unwrap();
        assert_eq!((f.grid_width, f.grid_height), (4, 3));
        assert!(f.coherence.iter().all(|&c| c == 0.0));
        assert!(f.angles.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn partial_blocks_round_up() {
        let img = GrayImage::from_fn(70, 33, |x, y| ((x + y) % 5) as f64 / 4.0).unwrap();
        let f = estimate_orientation(&img, 16).unwrap();
        assert_eq!((f.grid_width, f.grid_height), (5, 3));
    }

    fn whorl(size: usize, cx: f64, cy: f64) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            let r = (x as f64 - cx).hypot(y as f64 - cy);
            0.5 + 0.4 * (2.0 * PI * r / 8.0).cos()
        })
        .unwrap()
    }

    #[test]
    fn whorl_core_is_found() {
        let img = whorl(256, 128.0, 128.0);
        let core = locate_core(&estimate_orientation(&img, 16).unwrap()).unwrap();
        assert!((core.x - 128.0).hypot(core.y - 128.0) <= 5.0, "{core:?}");
        assert!(core.confidence > 0.0);
    }

    #[test]
    fn whorl_core_translates() {
        let a = locate_core(&estimate_orientation(&whorl(256, 128.0, 128.0), 16).unwrap()).unwrap();
        let b = locate_core(&estimate_orientation(&whorl(256, 148.0, 138.0), 16).unwrap()).unwrap();
        assert!((b.x - a.x - 20.0).abs() <= 5.0 && (b.y - a.y - 10.0).abs() <= 5.0, "{a:?} {b:?}");
    }

    #[test]
    fn uniform_field_falls_back_to_center() {
        let f = estimate_orientation(&sinusoid(128, 0.7, 9.0), 16).unwrap();
        let core = locate_core(&f).unwrap();
        assert_eq!((core.x, core.y, core.confidence), (64.0, 64.0, 0.0));
    }

    #[test]
    fn small_field_is_an_error() {
        let f = estimate_orientation(&sinusoid(48, 0.7, 9.0), 16).unwrap();
        assert!(locate_core(&f).is_err());
    }
}
