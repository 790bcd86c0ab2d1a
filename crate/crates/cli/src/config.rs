//! Pipeline configuration: a TOML file overlaid with dotted `key=value`
//! overrides, deserialized with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use fpdeblur_core::dataops::{DatasetSource, GaborParams, SplitFractions, DEFAULT_RIDGE_PERIOD};
use fpdeblur_core::training::{TrainConfig, VerifierTrainConfig};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Read clean prints from this directory instead of synthesizing them.
    pub directory: Option<PathBuf>,
    pub subjects: usize,
    pub impressions: usize,
    pub seed: u64,
    /// Range of synthetic ridge periods, in pixels.
    pub ridge_period: [f64; 2],
    pub sigmas: Vec<f64>,
    pub crop_size: usize,
    pub splits: SplitFractions,
    /// Filter bank of the ridge ground truth.
    pub ridge_filter: GaborParams,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            directory: None,
            subjects: 30,
            impressions: 4,
            seed: 0,
            ridge_period: DEFAULT_RIDGE_PERIOD,
            sigmas: vec![3.0, 5.0, 7.0],
            crop_size: 256,
            splits: SplitFractions::default(),
            ridge_filter: GaborParams::default(),
        }
    }
}

impl DatasetSection {
    pub fn source(&self) -> DatasetSource {
        match &self.directory {
            Some(path) => DatasetSource::Directory { path: path.clone() },
            None => DatasetSource::Synthetic {
                subjects: self.subjects,
                impressions: self.impressions,
                seed: self.seed,
                ridge_period: self.ridge_period,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub pair_seed: u64,
    /// Only evaluate this blur level; all levels of the manifest otherwise.
    pub sigma: Option<f64>,
    pub quality: bool,
    /// External quality program; the built-in proxy is used when unset.
    pub quality_tool: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            pair_seed: 0,
            sigma: None,
            quality: true,
            quality_tool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub sigma: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { sigma: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurSection {
    pub input: Option<PathBuf>,
    pub preprocess: bool,
}

impl Default for DeblurSection {
    fn default() -> Self {
        Self {
            input: None,
            preprocess: true,
        }
    }
}

/// Inputs produced by earlier stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory or its `manifest.json`.
    pub manifest: Option<PathBuf>,
    pub ridge: Option<PathBuf>,
    pub verifier: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    /// Epoch directory to resume training from.
    pub resume: Option<PathBuf>,
    /// Output directory of `eval`.
    pub evaluation: Option<PathBuf>,
    /// Output directory of `ablate`.
    pub ablation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub ridge: TrainConfig,
    pub verifier: VerifierTrainConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub deblur: DeblurSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out: None,
            dataset: DatasetSection::default(),
            ridge: TrainConfig::ridge_default(),
            verifier: VerifierTrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            deblur: DeblurSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (when given), applies `overrides` in order and resolves.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &PipelineConfig) -> String {
    toml::to_string_pretty(cfg).expect("the pipeline config serializes to TOML")
}
