use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gan::{run_training, FrozenNets, FINAL_DIR};
use super::{create_dir, TrainConfig};
use crate::dataops::DatasetManifest;
use crate::networks::NetKind;
use crate::objective::{AblationFlags, Variant};
use crate::{Error, Result};

pub const VARIANTS_FILE: &str = "variants.json";

/// One trained ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub name: String,
    pub slug: String,
    pub flags: AblationFlags,
    pub active_terms: Vec<String>,
    /// Generator checkpoint, relative to the manifest file's directory.
    pub generator: PathBuf,
    pub generator_sha256: String,
}

/// Machine-readable table of the ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantManifest {
    pub sigma: f64,
    pub seed: u64,
    pub variants: Vec<VariantEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl VariantManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(VARIANTS_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn generator_path(&self, entry: &VariantEntry) -> PathBuf {
        self.root.join(&entry.generator)
    }
}

/// Trains every variant in table order on the `sigma` records of `manifest`,
/// all with the seed and data order of `base`. Each variant lands in
/// `out_dir/variants/<slug>/`; the table is written to `variants.json`.
pub fn run_ablation_suite(
    manifest: &DatasetManifest,
    base: &TrainConfig,
    frozen: &FrozenNets,
    sigma: f64,
    out_dir: &Path,
) -> Result<VariantManifest> {
    let subset = manifest.with_sigma(sigma);
    if subset.records.is_empty() {
        return Err(Error::Data(format!("the manifest has no records with sigma {sigma}")));
    }
    create_dir(out_dir)?;
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            ablation: variant.flags(),
            ..base.clone()
        };
        let rel = PathBuf::from("variants").join(variant.slug());
        log::info!("training variant `{}`", variant.display_name());
        let outcome = run_training(&subset, &cfg, frozen, &out_dir.join(&rel))?;
        variants.push(VariantEntry {
            name: variant.display_name().into(),
            slug: variant.slug().into(),
            flags: cfg.ablation,
            active_terms: cfg.ablation.active_terms(),
            generator: rel.join(FINAL_DIR).join(NetKind::Generator.file_name()),
            generator_sha256: outcome.state.generator.digest(),
        });
    }
    let table = VariantManifest {
        sigma,
        seed: base.seed,
        variants,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(VARIANTS_FILE);
    let json = serde_json::to_string_pretty(&table).expect("variant table serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
