//! One function per subcommand, each driven by a resolved [`PipelineConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fpdeblur_core::dataops::{build_dataset, load_samples, preprocess_sample, DatasetManifest, GrayImage, Split};
use fpdeblur_core::evaluation::{
    deblur_images, emit_report, evaluate_variant, quality_report, AblationRow, QualityScore, Report, SigmaRow,
    VariantEvaluation,
};
use fpdeblur_core::networks::{generator_forward, ModelParameters, NetKind};
use fpdeblur_core::training::{
    pretrain_ridge_extractor, pretrain_verifier, resume_training, run_ablation_suite, run_training, FrozenNets,
    VariantManifest,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::ConfigError;

pub const EVALUATION_FILE: &str = "evaluation.json";
pub const ABLATION_EVAL_FILE: &str = "ablation_eval.json";

/// Output of `eval`, read back by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub split: String,
    pub generator_sha256: String,
    pub verifier_sha256: String,
    pub rows: Vec<SigmaEvaluation>,
    pub quality: Vec<QualityScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaEvaluation {
    pub sigma: f64,
    pub evaluation: VariantEvaluation,
}

/// Output of `ablate`, read back by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEvalFile {
    pub sigma: f64,
    pub split: String,
    pub verifier_sha256: String,
    pub variants: Vec<AblationVariantEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationVariantEval {
    pub name: String,
    pub slug: String,
    pub generator_sha256: String,
    pub evaluation: VariantEvaluation,
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| ConfigError(format!("`{key}` is not set")).into())
}

fn manifest(cfg: &PipelineConfig) -> anyhow::Result<DatasetManifest> {
    Ok(DatasetManifest::read(required(&cfg.paths.manifest, "paths.manifest")?)?)
}

fn split(cfg: &PipelineConfig) -> anyhow::Result<Split> {
    cfg.eval
        .split
        .parse()
        .map_err(|_| ConfigError(format!("eval.split `{}` is not train, val or test", cfg.eval.split)).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn dataset(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let d = &cfg.dataset;
    let m = build_dataset(&d.source(), &d.sigmas, d.crop_size, &d.splits, &d.ridge_filter, out)?;
    log::info!(
        "wrote {} records of {} subjects to {}",
        m.records.len(),
        m.records.iter().map(|r| &r.subject_id).collect::<std::collections::BTreeSet<_>>().len(),
        out.display()
    );
    Ok(())
}

pub fn pretrain_ridge(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let outcome = pretrain_ridge_extractor(&manifest(cfg)?, &cfg.ridge, out)?;
    log::info!(
        "ridge extractor val L1 {:.4} -> {:.4}, saved {}",
        outcome.initial_val_l1,
        outcome.val_l1.last().copied().unwrap_or(f64::NAN),
        outcome.checkpoint.display()
    );
    Ok(())
}

pub fn pretrain_verifier_cmd(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let outcome = pretrain_verifier(&manifest(cfg)?, &cfg.verifier, out)?;
    if let Some(s) = outcome.separation {
        log::info!("verifier held-out margin {:.4}", s.margin());
    }
    log::info!("saved {}", outcome.checkpoint.display());
    Ok(())
}

fn frozen(cfg: &PipelineConfig) -> anyhow::Result<FrozenNets> {
    Ok(FrozenNets::load(
        &cfg.train.ablation,
        cfg.paths.ridge.as_deref(),
        cfg.paths.verifier.as_deref(),
    )?)
}

pub fn train(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let nets = frozen(cfg)?;
    let outcome = match &cfg.paths.resume {
        Some(from) => resume_training(&m, &cfg.train, &nets, from, out)?,
        None => run_training(&m, &cfg.train, &nets, out)?,
    };
    log::info!("final checkpoint in {}", outcome.final_dir.display());
    Ok(())
}

fn sigmas(cfg: &PipelineConfig, m: &DatasetManifest) -> Vec<f64> {
    match cfg.eval.sigma {
        Some(s) => vec![s],
        None => m.sigmas(),
    }
}

pub fn eval(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let split = split(cfg)?;
    let generator = ModelParameters::load_kind(required(&cfg.paths.generator, "paths.generator")?, NetKind::Generator)?;
    let verifier = ModelParameters::load_kind(required(&cfg.paths.verifier, "paths.verifier")?, NetKind::Verifier)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    let mut quality = Vec::new();
    for sigma in sigmas(cfg, &m) {
        let subset = m.with_sigma(sigma);
        if subset.records.is_empty() {
            return Err(ConfigError(format!("the manifest has no records with sigma {sigma}")).into());
        }
        let evaluation = evaluate_variant(&generator, &verifier, &subset, split, cfg.eval.pair_seed)?;
        log::info!(
            "sigma {sigma}: EER {:.4} -> {:.4}, AUC {:.4} -> {:.4}",
            evaluation.blurred.eer,
            evaluation.deblurred.eer,
            evaluation.blurred.auc,
            evaluation.deblurred.auc
        );
        if cfg.eval.quality {
            let samples = load_samples(&subset, split)?;
            let blurred: Vec<GrayImage> = samples.iter().map(|s| s.blurred.clone()).collect();
            let deblurred = deblur_images(&generator, &blurred)?;
            let mut named = Vec::with_capacity(2 * samples.len());
            for (i, s) in samples.iter().enumerate() {
                named.push((format!("sigma{sigma}_blurred_{i:04}_{}", s.subject_id), blurred[i].clone()));
                named.push((format!("sigma{sigma}_deblurred_{i:04}_{}", s.subject_id), deblurred[i].clone()));
            }
            quality.extend(quality_report(&named, cfg.eval.quality_tool.as_deref())?);
        }
        rows.push(SigmaEvaluation { sigma, evaluation });
    }
    let file = EvaluationFile {
        split: split.name().into(),
        generator_sha256: generator.digest(),
        verifier_sha256: verifier.digest(),
        rows,
        quality,
    };
    write_json(&out.join(EVALUATION_FILE), &file)
}

pub fn ablate(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let split = split(cfg)?;
    let nets = FrozenNets::load(
        &Default::default(),
        cfg.paths.ridge.as_deref(),
        cfg.paths.verifier.as_deref(),
    )?;
    let verifier = nets.verifier.clone().expect("the full objective loads the verifier");
    let sigma = cfg.ablation.sigma;
    let suite = run_ablation_suite(&m, &cfg.train, &nets, sigma, out)?;
    let subset = m.with_sigma(sigma);
    let mut variants = Vec::with_capacity(suite.variants.len());
    for v in &suite.variants {
        let generator = ModelParameters::load_kind(&suite.generator_path(v), NetKind::Generator)?;
        let evaluation = evaluate_variant(&generator, &verifier, &subset, split, cfg.eval.pair_seed)?;
        log::info!("{}: EER {:.4}, AUC {:.4}", v.name, evaluation.deblurred.eer, evaluation.deblurred.auc);
        variants.push(AblationVariantEval {
            name: v.name.clone(),
            slug: v.slug.clone(),
            generator_sha256: v.generator_sha256.clone(),
            evaluation,
        });
    }
    let file = AblationEvalFile {
        sigma,
        split: split.name().into(),
        verifier_sha256: verifier.digest(),
        variants,
    };
    write_json(&out.join(ABLATION_EVAL_FILE), &file)
}

pub fn deblur(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let generator = ModelParameters::load_kind(required(&cfg.paths.generator, "paths.generator")?, NetKind::Generator)?;
    let input = required(&cfg.deblur.input, "deblur.input")?;
    let img = GrayImage::read_png(input)?;
    let crop = generator.config.base_resolution;
    let img = if cfg.deblur.preprocess {
        preprocess_sample(&img, crop)?
    } else if img.width() != crop || img.height() != crop {
        return Err(anyhow!(fpdeblur_core::Error::Data(format!(
            "{} is {}x{}, the generator expects {crop}x{crop}; drop --no-preprocess to crop it",
            input.display(),
            img.width(),
            img.height()
        ))));
    } else {
        img
    };
    let full = generator_forward(&generator, &img.to_tensor())?.full;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    GrayImage::from_tensor(&full, 0)?.write_png(out)?;
    Ok(())
}

pub fn report(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let mut rep = Report::default();
    let mut meta: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    if let Some(dir) = &cfg.paths.evaluation {
        let e: EvaluationFile = read_json(&dir.join(EVALUATION_FILE))?;
        meta.insert("split".into(), e.split.clone().into());
        meta.insert("generator_sha256".into(), e.generator_sha256.clone().into());
        meta.insert("verifier_sha256".into(), e.verifier_sha256.clone().into());
        for r in e.rows {
            meta.insert(
                format!("sigma{}_pairs", r.sigma),
                serde_json::json!({
                    "seed": r.evaluation.pair_seed,
                    "count": r.evaluation.pair_count,
                    "sha256": r.evaluation.pair_sha256,
                }),
            );
            rep.sigma_rows.push(SigmaRow {
                sigma: r.sigma,
                blurred: r.evaluation.blurred,
                deblurred: r.evaluation.deblurred,
            });
        }
        rep.quality = e.quality;
    }
    if let Some(dir) = &cfg.paths.ablation {
        let a: AblationEvalFile = read_json(&dir.join(ABLATION_EVAL_FILE))?;
        let suite = VariantManifest::read(dir)?;
        let mut variants = serde_json::Map::new();
        for v in &a.variants {
            variants.insert(v.slug.clone(), v.generator_sha256.clone().into());
        }
        let hashes: Vec<&str> = a.variants.iter().map(|v| v.evaluation.pair_sha256.as_str()).collect();
        if hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(anyhow!(fpdeblur_core::Error::Data(
                "ablation variants were scored on different pair lists".into()
            )));
        }
        meta.insert(
            "ablation".into(),
            serde_json::json!({
                "sigma": a.sigma,
                "split": a.split,
                "seed": suite.seed,
                "verifier_sha256": a.verifier_sha256,
                "pair_sha256": hashes.first(),
                "generators_sha256": variants,
            }),
        );
        for v in a.variants {
            rep.ablation_rows.push(AblationRow {
                name: v.name,
                slug: v.slug,
                roc: v.evaluation.deblurred,
            });
        }
    }
    if rep.sigma_rows.is_empty() && rep.ablation_rows.is_empty() {
        return Err(ConfigError("set paths.evaluation or paths.ablation (--eval / --ablation)".into()).into());
    }
    rep.meta = meta;
    emit_report(&rep, out)?;
    Ok(())
}
