use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::dataops::{gabor_bank, gabor_energy, segment_foreground, GaborParams, GrayImage};
use crate::{Error, Result};

/// Mean foreground Gabor energy that maps to the top score. Clean synthetic
/// prints land around 70 to 85.
const PROXY_FULL_SCALE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySource {
    External,
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub name: String,
    /// Integer score in `[1, 100]`.
    pub score: u8,
    pub source: QualitySource,
    /// Set when an external tool was configured but failed for this image.
    pub warning: Option<String>,
}

/// Internal stand-in for a fingerprint quality tool: mean Gabor energy over
/// the segmented foreground, mapped linearly onto `[1, 100]`.
pub fn proxy_quality(img: &GrayImage) -> u8 {
    let bank = gabor_bank(&GaborParams::default()).expect("default Gabor parameters are valid");
    let mask = segment_foreground(img);
    let energy = gabor_energy(img, &bank);
    let (mut sum, mut n) = (0.0, 0usize);
    for (e, m) in energy.iter().zip(mask.data()) {
        if *m > 0.5 {
            sum += e;
            n += 1;
        }
    }
    if n == 0 {
        return 1;
    }
    let frac = (sum / n as f64 / PROXY_FULL_SCALE).clamp(0.0, 1.0);
    (1.0 + 99.0 * frac).round() as u8
}

/// Parses the standard output of an external quality tool.
pub fn parse_quality(stdout: &str) -> Result<u8> {
    let text = stdout.trim();
    let v: i64 = text
        .parse()
        .map_err(|_| Error::Data(format!("quality tool printed `{text}`, expected an integer")))?;
    if !(1..=100).contains(&v) {
        return Err(Error::Data(format!("quality score {v} outside 1..=100")));
    }
    Ok(v as u8)
}

fn run_tool(tool: &Path, img: &GrayImage, dir: &Path, index: usize) -> Result<u8> {
    let path = dir.join(format!("q{index:05}.png"));
    img.write_png(&path)?;
    let out = Command::new(tool).arg(&path).output().map_err(|e| Error::io(tool, e))?;
    if !out.status.success() {
        return Err(Error::Data(format!("{} exited with {}", tool.display(), out.status)));
    }
    parse_quality(&String::from_utf8_lossy(&out.stdout))
}

/// Scores each named image with the external tool when one is given,
/// falling back to [`proxy_quality`] (with a warning) whenever it fails.
pub fn quality_report(images: &[(String, GrayImage)], tool: Option<&Path>) -> Result<Vec<QualityScore>> {
    let scratch = match tool {
        Some(_) => Some(tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?),
        None => None,
    };
    let mut out = Vec::with_capacity(images.len());
    for (i, (name, img)) in images.iter().enumerate() {
        let external = match (tool, &scratch) {
            (Some(t), Some(dir)) => Some(run_tool(t, img, dir.path(), i)),
            _ => None,
        };
        let score = match external {
            Some(Ok(score)) => QualityScore {
                name: name.clone(),
                score,
                source: QualitySource::External,
                warning: None,
            },
            Some(Err(e)) => {
                log::warn!("quality tool failed on {name}, using the proxy: {e}");
                QualityScore {
                    name: name.clone(),
                    score: proxy_quality(img),
                    source: QualitySource::Proxy,
                    warning: Some(e.to_string()),
                }
            }
            None => QualityScore {
                name: name.clone(),
                score: proxy_quality(img),
                source: QualitySource::Proxy,
                warning: None,
            },
        };
        out.push(score);
    }
    Ok(out)
}
