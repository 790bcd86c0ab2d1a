//! Paired training corpus construction.
//!
//! Clean prints are segmented, their ridge orientation field and core point
//! are estimated, and a square crop centered on the core is taken. Each crop
//! yields one record per blur level with the Gaussian-blurred input, the clean
//! target and a Gabor ridge map.

mod blur;
mod dataset;
mod gabor;
mod image;
mod orientation;
mod synth;

pub use blur::{gaussian_blur, gaussian_kernel, reflect_index, BlurConfig};
pub use dataset::{
    build_dataset, load_clean, load_samples, CleanSample, DatasetManifest, DatasetSource, ManifestRecord, SamplePair, Split,
    SplitFractions, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use gabor::{gabor_bank, gabor_energy, gabor_ridge_map, segment_foreground, GaborBank, GaborParams};
pub use image::GrayImage;
pub use orientation::{estimate_orientation, locate_core, CoreLocation, OrientationField};
pub use synth::{synth_fingerprint, synth_impression, synth_impression_with_period, DEFAULT_RIDGE_PERIOD, MIN_SYNTH_SIZE};

use crate::{Error, Result};

/// Default block size for orientation estimation, in pixels.
pub const ORIENTATION_BLOCK: usize = 16;

/// Crops a `crop_size`² window centered on the detected core.
///
/// The window is `[cx − crop/2, cx + crop/2)` on each axis; pixels outside the
/// source are zero.
pub fn preprocess_sample(img: &GrayImage, crop_size: usize) -> Result<GrayImage> {
    let (_, core) = detect_core(img)?;
    crop_centered(img, core.x.round() as isize, core.y.round() as isize, crop_size)
}

/// Segmentation, masked orientation field and core location of a print.
pub fn detect_core(img: &GrayImage) -> Result<(GrayImage, CoreLocation)> {
    let mask = segment_foreground(img);
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Rejected("empty foreground mask".into()));
    }
    let mut field = estimate_orientation(img, ORIENTATION_BLOCK)?;
    field.mask_background(&mask, 0.5);
    let core = locate_core(&field)?;
    Ok((mask, core))
}

/// Zero-padded `size × size` crop whose top-left corner is `(cx − size/2, cy − size/2)`.
pub fn crop_centered(img: &GrayImage, cx: isize, cy: isize, size: usize) -> Result<GrayImage> {
    let half = (size / 2) as isize;
    let (x0, y0) = (cx - half, cy - half);
    let (w, h) = (img.width() as isize, img.height() as isize);
    GrayImage::from_fn(size, size, |x, y| {
        let (sx, sy) = (x0 + x as isize, y0 + y as isize);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            0.0
        } else {
            img.get(sx as usize, sy as usize)
        }
    })
}
