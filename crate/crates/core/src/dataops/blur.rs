use fpdeblur_tensor::par;
use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::{Error, Result};

/// Gaussian blur parameters. The kernel is `kernel_size` taps wide on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    pub sigma: f64,
    pub kernel_size: usize,
}

impl BlurConfig {
    /// Kernel size `6σ − 1`, rounded to the nearest odd integer (ties go up).
    pub fn from_sigma(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
        }
        let raw = 6.0 * sigma - 1.0;
        let half = ((raw - 1.0) / 2.0).round().max(0.0);
        Ok(Self {
            sigma,
            kernel_size: 2 * half as usize + 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "blur kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps for `cfg`, centered on index `kernel_size / 2`.
pub fn gaussian_kernel(cfg: &BlurConfig) -> Vec<f64> {
    let r = (cfg.kernel_size / 2) as f64;
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let taps: Vec<f64> = (0..cfg.kernel_size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / denom).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without edge repetition (`dcb|abcd|cba`), for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &GrayImage, cfg: &BlurConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if cfg.kernel_size > 2 * w.min(h) {
        return Err(Error::Config(format!(
            "blur kernel {} exceeds twice the smaller side of a {w}x{h} image",
            cfg.kernel_size
        )));
    }
    let taps = gaussian_kernel(cfg);
    let r = (cfg.kernel_size / 2) as isize;
    let src = img.data();

    let mut horizontal = vec![0.0; w * h];
    par::for_each_chunk_mut(&mut horizontal, w, |y, row| {
        let line = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            *out = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * line[reflect_index(x as isize + k as isize - r, w)])
                .sum();
        }
    });

    let mut out = vec![0.0; w * h];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        for (k, t) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - r, h);
            let line = &horizontal[sy * w..(sy + 1) * w];
            for (o, v) in row.iter_mut().zip(line) {
                *o += t * v;
            }
        }
    });
    GrayImage::new(w, h, out.into_iter().map(super::image::clamp_unit).collect())
}
