//! `fpdeblur`: dataset synthesis, pretraining, GAN training, evaluation,
//! ablation and reporting for fingerprint deblurring.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use config::{PipelineConfig, SNAPSHOT_FILE};

/// A configuration problem; reported as `error[config]` with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "fpdeblur", version, about = "Fingerprint deblurring pipeline")]
struct Cli {
    /// More log output on standard error (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every setting has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output location (sets `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a blurred/clean/ridge corpus and its manifest.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Synthesize this many subjects.
        #[arg(long, value_name = "SUBJECTS", conflicts_with = "from_dir")]
        synthetic: Option<usize>,
        /// Read clean prints from a directory instead.
        #[arg(long, value_name = "DIR")]
        from_dir: Option<PathBuf>,
        /// Comma-separated blur levels.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        crop_size: Option<usize>,
    },
    /// Pretrain the ridge extractor.
    PretrainRidge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Pretrain the Siamese verifier.
    PretrainVerifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the deblurring GAN.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Ridge extractor checkpoint.
        #[arg(long)]
        ridge: Option<PathBuf>,
        /// Verifier checkpoint.
        #[arg(long)]
        verifier: Option<PathBuf>,
        /// Epoch directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Verification ROC with and without deblurring.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        verifier: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Only this blur level.
        #[arg(long)]
        sigma: Option<f64>,
        /// External quality program printing an integer 1 to 100.
        #[arg(long)]
        quality_tool: Option<PathBuf>,
        #[arg(long)]
        no_quality: bool,
    },
    /// Train and evaluate the six ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ridge: Option<PathBuf>,
        #[arg(long)]
        verifier: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Deblur one image.
    Deblur {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input PNG.
        #[arg(long = "in", value_name = "PNG")]
        input: Option<PathBuf>,
        /// Feed the image as is instead of cropping around the core.
        #[arg(long)]
        no_preprocess: bool,
    },
    /// Tables, ROC curves and quality scores from `eval` and `ablate` outputs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory of `eval`.
        #[arg(long = "eval", value_name = "DIR")]
        evaluation: Option<PathBuf>,
        /// Output directory of `ablate`.
        #[arg(long, value_name = "DIR")]
        ablation: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Resolves the configuration: file, then `--set`, then dedicated flags.
fn resolve(command: Command) -> anyhow::Result<(&'static str, PipelineConfig)> {
    let load = |c: &Common| -> anyhow::Result<PipelineConfig> {
        let mut cfg = config::load(c.config.as_deref(), &c.overrides).map_err(|e| ConfigError(format!("{e:#}")))?;
        set_some(&mut cfg.out, c.out.clone());
        Ok(cfg)
    };
    Ok(match command {
        Command::Dataset {
            common,
            synthetic,
            from_dir,
            sigmas,
            crop_size,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = synthetic {
                cfg.dataset.subjects = n;
                cfg.dataset.directory = None;
            }
            set_some(&mut cfg.dataset.directory, from_dir);
            set(&mut cfg.dataset.sigmas, sigmas);
            set(&mut cfg.dataset.crop_size, crop_size);
            ("dataset", cfg)
        }
        Command::PretrainRidge { common, manifest } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.manifest, manifest);
            ("pretrain-ridge", cfg)
        }
        Command::PretrainVerifier { common, manifest } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.manifest, manifest);
            ("pretrain-verifier", cfg)
        }
        Command::Train {
            common,
            manifest,
            ridge,
            verifier,
            resume,
        } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.manifest, manifest);
            set_some(&mut cfg.paths.ridge, ridge);
            set_some(&mut cfg.paths.verifier, verifier);
            set_some(&mut cfg.paths.resume, resume);
            ("train", cfg)
        }
        Command::Eval {
            common,
            manifest,
            generator,
            verifier,
            split,
            sigma,
            quality_tool,
            no_quality,
        } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.manifest, manifest);
            set_some(&mut cfg.paths.generator, generator);
            set_some(&mut cfg.paths.verifier, verifier);
            set(&mut cfg.eval.split, split);
            set_some(&mut cfg.eval.sigma, sigma);
            set_some(&mut cfg.eval.quality_tool, quality_tool);
            if no_quality {
                cfg.eval.quality = false;
            }
            ("eval", cfg)
        }
        Command::Ablate {
            common,
            manifest,
            ridge,
            verifier,
            sigma,
        } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.manifest, manifest);
            set_some(&mut cfg.paths.ridge, ridge);
            set_some(&mut cfg.paths.verifier, verifier);
            set(&mut cfg.ablation.sigma, sigma);
            ("ablate", cfg)
        }
        Command::Deblur {
            common,
            checkpoint,
            input,
            no_preprocess,
        } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.generator, checkpoint);
            set_some(&mut cfg.deblur.input, input);
            if no_preprocess {
                cfg.deblur.preprocess = false;
            }
            ("deblur", cfg)
        }
        Command::Report {
            common,
            evaluation,
            ablation,
        } => {
            let mut cfg = load(&common)?;
            set_some(&mut cfg.paths.evaluation, evaluation);
            set_some(&mut cfg.paths.ablation, ablation);
            ("report", cfg)
        }
    })
}

/// Where the resolved configuration of a run is written: inside the output
/// directory, or next to the output file for `deblur`.
fn snapshot_path(name: &str, out: &Path) -> PathBuf {
    if name == "deblur" {
        out.with_extension("config.toml")
    } else {
        out.join(SNAPSHOT_FILE)
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let (name, cfg) = resolve(command)?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| ConfigError("no output location: pass --out or set `out`".into()))?;
    let snapshot = snapshot_path(name, &out);
    if let Some(dir) = snapshot.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = format!("# fpdeblur {name}\n{}", config::to_toml(&cfg));
    fs::write(&snapshot, text).with_context(|| format!("writing {}", snapshot.display()))?;
    log::debug!("resolved configuration written to {}", snapshot.display());
    match name {
        "dataset" => commands::dataset(&cfg, &out),
        "pretrain-ridge" => commands::pretrain_ridge(&cfg, &out),
        "pretrain-verifier" => commands::pretrain_verifier_cmd(&cfg, &out),
        "train" => commands::train(&cfg, &out),
        "eval" => commands::eval(&cfg, &out),
        "ablate" => commands::ablate(&cfg, &out),
        "deblur" => commands::deblur(&cfg, &out),
        "report" => commands::report(&cfg, &out),
        _ => unreachable!("resolve only returns known subcommands"),
    }
}

/// `(category, exit status)` of a failure.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use fpdeblur_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return ("config", 2);
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => ("config", 2),
                E::Data(_) => ("data", 1),
                E::Rejected(_) => ("rejected", 1),
                E::Tensor(_) => ("tensor", 1),
                E::NonFinite { .. } => ("non_finite", 1),
                E::MissingDependency(_) => ("missing_dependency", 1),
                E::Io { .. } => ("io", 1),
                E::Format { .. } => ("format", 1),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 1);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("format", 1);
        }
    }
    ("runtime", 1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        (false, _) => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = classify(&err);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            ExitCode::from(code)
        }
    }
}
