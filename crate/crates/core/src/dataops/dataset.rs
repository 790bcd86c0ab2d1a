//! Paired corpus on disk: PNG images plus a JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use fpdeblur_tensor::par;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{Subject, DEFAULT_RIDGE_PERIOD, MIN_SYNTH_SIZE};
use super::{gabor_ridge_map, gaussian_blur, preprocess_sample, BlurConfig, GaborParams, GrayImage};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Fractions of subjects per split, and the seed of the subject shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split fractions {all:?}")));
        }
        Ok(())
    }

    /// Assigns each subject to a split. Val and test get at least one subject
    /// when their fraction is positive and enough subjects exist; train keeps
    /// the remainder and never ends up empty.
    pub fn assign(&self, subjects: &[String]) -> Result<BTreeMap<String, Split>> {
        self.validate()?;
        let n = subjects.len();
        if n == 0 {
            return Err(Error::Data("no subjects to split".into()));
        }
        let total = self.train + self.val + self.test;
        let count = |f: f64| {
            let c = (n as f64 * f / total).round() as usize;
            if f > 0.0 && n >= 3 {
                c.max(1)
            } else {
                c
            }
        };
        let mut n_test = count(self.test);
        let mut n_val = count(self.val);
        while n_test + n_val >= n && (n_test > 0 || n_val > 0) {
            if n_val >= n_test && n_val > 0 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let mut order: Vec<&String> = subjects.iter().collect();
        order.sort();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        Ok(order
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let split = if i < n_test {
                    Split::Test
                } else if i < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                };
                (s.clone(), split)
            })
            .collect())
    }
}

fn default_ridge_period() -> [f64; 2] {
    DEFAULT_RIDGE_PERIOD
}

/// Where clean prints come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Seeded synthetic subjects, `impressions` prints each, with ridge
    /// periods drawn from `ridge_period` pixels.
    Synthetic {
        subjects: usize,
        impressions: usize,
        seed: u64,
        #[serde(default = "default_ridge_period")]
        ridge_period: [f64; 2],
    },
    /// Either one subdirectory per subject, or flat `<subject>_<anything>.png`
    /// files.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub sigma: f64,
    pub blurred_path: String,
    pub clean_path: String,
    pub ridge_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub crop_size: usize,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to; set when reading.
    #[serde(skip)]
    pub root: PathBuf,
}

/// One loaded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub subject_id: String,
    pub sigma: f64,
    pub blurred: GrayImage,
    pub clean: GrayImage,
    pub ridge: GrayImage,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file, or `manifest.json` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                &file,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        if manifest.crop_size == 0 || manifest.records.iter().any(|r| !(r.sigma > 0.0)) {
            return Err(Error::format(&file, "invalid crop size or sigma"));
        }
        manifest.root = file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(manifest)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<&str> {
        self.records_in(split).map(|r| r.subject_id.as_str()).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.records.iter().map(|r| r.sigma).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }

    /// Copy restricted to records with the given blur level.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| r.sigma == sigma)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Loads the images of every record in `split`, in manifest order.
pub fn load_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<SamplePair>> {
    let records: Vec<&ManifestRecord> = manifest.records_in(split).collect();
    par::map(&records, |r| {
        let load = |p: &str| {
            let img = GrayImage::read_png(&manifest.resolve(p))?;
            if img.width() != manifest.crop_size || img.height() != manifest.crop_size {
                return Err(Error::Data(format!(
                    "{p}: expected {0}x{0}, found {1}x{2}",
                    manifest.crop_size,
                    img.width(),
                    img.height()
                )));
            }
            Ok(img)
        };
        Ok(SamplePair {
            subject_id: r.subject_id.clone(),
            sigma: r.sigma,
            blurred: load(&r.blurred_path)?,
            clean: load(&r.clean_path)?,
            ridge: load(&r.ridge_path)?,
        })
    })
    .into_iter()
    .collect()
}

/// A clean crop with its ridge map, without blur.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanSample {
    pub subject_id: String,
    pub clean: GrayImage,
    pub ridge: GrayImage,
}

/// Loads each distinct clean crop of `split` once, in manifest order.
pub fn load_clean(manifest: &DatasetManifest, split: Split) -> Result<Vec<CleanSample>> {
    let mut seen = BTreeSet::new();
    let records: Vec<&ManifestRecord> = manifest
        .records_in(split)
        .filter(|r| seen.insert(r.clean_path.as_str()))
        .collect();
    par::map(&records, |r| {
        Ok(CleanSample {
            subject_id: r.subject_id.clone(),
            clean: GrayImage::read_png(&manifest.resolve(&r.clean_path))?,
            ridge: GrayImage::read_png(&manifest.resolve(&r.ridge_path))?,
        })
    })
    .into_iter()
    .collect()
}

/// A clean source print before cropping.
struct SourceImage {
    subject: String,
    stem: String,
    load: Box<dyn Fn() -> Result<GrayImage> + Send + Sync>,
}

fn synthetic_sources(
    subjects: usize,
    impressions: usize,
    seed: u64,
    period: [f64; 2],
    crop: usize,
) -> Result<Vec<SourceImage>> {
    if !(period[0] >= 3.0 && period[1] > period[0] && period[1] <= 32.0) {
        return Err(Error::Config(format!(
            "ridge period range {period:?} must satisfy 3 <= low < high <= 32"
        )));
    }
    let size = (2 * crop).max(MIN_SYNTH_SIZE);
    let mut out = Vec::new();
    for s in 0..subjects {
        let subject_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64);
        // Grown once, on first use, and shared by the subject's impressions.
        let master: Arc<OnceLock<Subject>> = Arc::default();
        for i in 0..impressions {
            let master = Arc::clone(&master);
            out.push(SourceImage {
                subject: format!("s{s:04}"),
                stem: format!("s{s:04}_{i:02}"),
                load: Box::new(move || {
                    let subject = master.get_or_init(|| Subject::new(subject_seed, size, period));
                    Ok(subject.impression(subject_seed, i as u64).0)
                }),
            });
        }
    }
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn directory_sources(root: &Path) -> Result<Vec<SourceImage>> {
    let mut out = Vec::new();
    let mut push = |subject: String, path: PathBuf| {
        let stem = format!("{subject}_{}", file_stem(&path));
        out.push(SourceImage {
            subject,
            stem,
            load: Box::new(move || GrayImage::read_png(&path)),
        });
    };
    for entry in sorted_entries(root)? {
        if entry.is_dir() {
            let subject = file_stem(&entry);
            for file in sorted_entries(&entry)? {
                if file.is_file() && is_png(&file) {
                    push(subject.clone(), file);
                }
            }
        } else if is_png(&entry) {
            let stem = file_stem(&entry);
            let subject = stem.split('_').next().unwrap_or(&stem).to_string();
            push(subject, entry);
        }
    }
    Ok(out)
}

fn sigma_label(sigma: f64) -> String {
    format!("sigma{sigma}")
}

/// Builds the corpus under `out_dir` and writes `out_dir/manifest.json`.
///
/// Every accepted clean crop yields one record per σ. Prints whose
/// segmentation is empty are skipped with a warning. Ridge maps use the
/// `ridge` filter bank.
pub fn build_dataset(
    source: &DatasetSource,
    sigmas: &[f64],
    crop_size: usize,
    splits: &SplitFractions,
    ridge: &GaborParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    ridge.validate()?;
    if sigmas.is_empty() {
        return Err(Error::Config("at least one blur sigma is required".into()));
    }
    let blurs = sigmas
        .iter()
        .map(|&s| BlurConfig::from_sigma(s))
        .collect::<Result<Vec<_>>>()?;
    if crop_size < super::image::MIN_SIDE {
        return Err(Error::Config(format!("crop size {crop_size} is too small")));
    }
    let sources = match source {
        DatasetSource::Synthetic {
            subjects,
            impressions,
            seed,
            ridge_period,
        } => synthetic_sources(*subjects, *impressions, *seed, *ridge_period, crop_size)?,
        DatasetSource::Directory { path } => directory_sources(path)?,
    };
    if sources.is_empty() {
        return Err(Error::Data("dataset source contains no images".into()));
    }
    for dir in ["clean", "ridge"]
        .into_iter()
        .map(String::from)
        .chain(sigmas.iter().map(|&s| format!("blurred/{}", sigma_label(s))))
    {
        let d = out_dir.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let processed = par::map(&sources, |src| -> Result<Option<Vec<(f64, String)>>> {
        let raw = (src.load)()?;
        let clean = match preprocess_sample(&raw, crop_size) {
            Ok(c) => c.quantized(),
            Err(Error::Rejected(why)) => {
                log::warn!("skipping {}: {why}", src.stem);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let name = format!("{}.png", src.stem);
        clean.write_png(&out_dir.join("clean").join(&name))?;
        gabor_ridge_map(&clean, ridge)?.write_png(&out_dir.join("ridge").join(&name))?;
        let mut blurred = Vec::with_capacity(blurs.len());
        for blur in &blurs {
            let rel = format!("blurred/{}/{name}", sigma_label(blur.sigma));
            gaussian_blur(&clean, blur)?.write_png(&out_dir.join(&rel))?;
            blurred.push((blur.sigma, rel));
        }
        Ok(Some(blurred))
    });

    let mut accepted = Vec::new();
    for (src, result) in sources.iter().zip(processed) {
        if let Some(blurred) = result? {
            accepted.push((src, blurred));
        }
    }
    if accepted.is_empty() {
        return Err(Error::Data("every source image was rejected".into()));
    }
    let subjects: Vec<String> = accepted
        .iter()
        .map(|(s, _)| s.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let assignment = splits.assign(&subjects)?;
    let records = accepted
        .iter()
        .flat_map(|(src, blurred)| {
            let name = format!("{}.png", src.stem);
            let split = assignment[&src.subject];
            blurred.iter().map(move |(sigma, rel)| ManifestRecord {
                subject_id: src.subject.clone(),
                sigma: *sigma,
                blurred_path: rel.clone(),
                clean_path: format!("clean/{name}"),
                ridge_path: format!("ridge/{name}"),
                split,
            })
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        crop_size,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    log::info!(
        "dataset: {} records from {} of {} prints",
        manifest.records.len(),
        accepted.len(),
        sources.len()
    );
    Ok(manifest)
}
