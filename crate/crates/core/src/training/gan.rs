use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fpdeblur_tensor::{Gradients, Tape, Tensor};

use super::log::{JsonLog, LogRecord};
use super::state::{mean_report, EpochRecord, TrainState};
use super::{create_dir, epoch_order, stack_images, Adam, TrainConfig};
use crate::dataops::{load_samples, DatasetManifest, SamplePair, Split};
use crate::networks::{generator_graph, init_params, BoundParams, ModelParameters, NetKind};
use crate::objective::{
    discriminator_loss_graph, generator_loss_graph, pyramid, AblationFlags, LossNetworks, LossReport,
};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_DIR: &str = "final";

/// Pretrained networks held fixed during GAN training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenNets {
    pub ridge: Option<ModelParameters>,
    pub verifier: Option<ModelParameters>,
}

impl FrozenNets {
    /// Loads the checkpoints `flags` needs; a needed but absent path is an error.
    pub fn load(flags: &AblationFlags, ridge: Option<&Path>, verifier: Option<&Path>) -> Result<Self> {
        let get = |needed: bool, path: Option<&Path>, kind: NetKind, what: &str| -> Result<_> {
            if !needed {
                return Ok(None);
            }
            let path = path.ok_or_else(|| {
                Error::MissingDependency(format!("{what} checkpoint is required but not configured"))
            })?;
            if !path.exists() {
                return Err(Error::MissingDependency(format!(
                    "{what} checkpoint {} does not exist",
                    path.display()
                )));
            }
            ModelParameters::load_kind(path, kind).map(Some)
        };
        Ok(Self {
            ridge: get(flags.uses_ridge(), ridge, NetKind::RidgeExtractor, "ridge extractor")?,
            verifier: get(flags.uses_verifier(), verifier, NetKind::Verifier, "verifier")?,
        })
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        let res = cfg.net.base_resolution;
        let nets = [
            (cfg.ablation.uses_ridge(), &self.ridge, "ridge extractor"),
            (cfg.ablation.uses_verifier(), &self.verifier, "verifier"),
        ];
        for (needed, net, what) in nets {
            match net {
                None if needed => {
                    return Err(Error::MissingDependency(format!("pretrained {what} is required")))
                }
                Some(p) if needed && p.config.base_resolution != res => {
                    return Err(Error::Config(format!(
                        "{what} was trained at {}², the run uses {res}²",
                        p.config.base_resolution
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Final state of a run and where its artifacts went.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_dir: PathBuf,
    pub log_path: PathBuf,
}

/// Fresh parameters and optimizers. The generator is seeded with `seed`,
/// discriminator `s` with `seed + 1 + s`.
pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let generator = init_params(NetKind::Generator, &cfg.net, cfg.seed)?;
    let opt = |p: &ModelParameters| Adam::new(p, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut discriminators = [None, None, None];
    let mut opt_discriminators = [None, None, None];
    for s in 0..3 {
        if cfg.ablation.scale_enabled(s) {
            let d = init_params(
                NetKind::Discriminator { scale: s },
                &cfg.net,
                cfg.seed.wrapping_add(1 + s as u64),
            )?;
            opt_discriminators[s] = Some(opt(&d));
            discriminators[s] = Some(d);
        }
    }
    Ok(TrainState {
        epoch: 0,
        step: 0,
        seed: cfg.seed,
        opt_generator: opt(&generator),
        generator,
        discriminators,
        opt_discriminators,
        history: Vec::new(),
    })
}

fn batch_tensors(batch: &[&SamplePair], res: usize) -> Result<(Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    for s in batch {
        if s.blurred.width() != res || s.blurred.height() != res {
            return Err(Error::Data(format!(
                "sample of {} is {}x{}, the network expects {res}x{res}",
                s.subject_id,
                s.blurred.width(),
                s.blurred.height()
            )));
        }
    }
    Ok((
        stack_images(batch.iter().map(|s| &s.blurred))?,
        stack_images(batch.iter().map(|s| &s.clean))?,
    ))
}

pub(crate) fn take_grads(bound: &BoundParams, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    bound
        .vars
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect()
}

fn non_finite(term: &str, state: &TrainState, detail: String) -> Error {
    Error::NonFinite {
        term: term.into(),
        epoch: state.epoch + 1,
        step: state.step + 1,
        detail,
    }
}

fn check_params(p: &ModelParameters, state: &TrainState) -> Result<()> {
    match p.tensors.iter().find(|(_, t)| !t.is_finite()) {
        Some((name, _)) => Err(non_finite(
            "parameters",
            state,
            format!("{:?} parameter `{name}` became non-finite", p.kind),
        )),
        None => Ok(()),
    }
}

/// Discriminator half of a step: every enabled discriminator takes one Adam
/// step on its adversarial term against the current (fixed) generator.
/// Returns the per-scale discriminator losses.
pub fn discriminator_update(state: &mut TrainState, batch: &[&SamplePair], cfg: &TrainConfig) -> Result<[f64; 3]> {
    let (x, y) = batch_tensors(batch, cfg.net.base_resolution)?;
    let mut tape = Tape::new();
    let g = state.generator.bind(&mut tape, false);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let conditions = pyramid(&mut tape, xv)?;
    let targets = pyramid(&mut tape, yv)?;
    let fakes = generator_graph(&mut tape, &g, xv)?.scales();
    let bound: Vec<Option<BoundParams>> = state
        .discriminators
        .iter()
        .map(|d| d.as_ref().map(|d| d.bind(&mut tape, true)))
        .collect();
    let refs = [bound[0].as_ref(), bound[1].as_ref(), bound[2].as_ref()];
    let (terms, total) = discriminator_loss_graph(&mut tape, &refs, &conditions, &targets, &fakes)?;
    let values = terms.map(|t| t.map_or(0.0, |t| tape.value(t).item()));
    for (s, v) in values.iter().enumerate() {
        if !v.is_finite() {
            let detail = format!("discriminator losses {values:?}");
            return Err(non_finite(crate::objective::ADV_TERMS[s], state, detail));
        }
    }
    let mut grads = tape.backward(total)?;
    for s in 0..3 {
        let (Some(b), Some(d), Some(opt)) = (
            &bound[s],
            state.discriminators[s].as_mut(),
            state.opt_discriminators[s].as_mut(),
        ) else {
            continue;
        };
        opt.step(d, &take_grads(b, &mut grads))?;
    }
    for d in state.discriminators.iter().flatten() {
        check_params(d, state)?;
    }
    Ok(values)
}

/// Generator half of a step: one Adam step on the full generator objective
/// with discriminators, ridge extractor and verifier held fixed.
pub fn generator_update(
    state: &mut TrainState,
    batch: &[&SamplePair],
    frozen: &FrozenNets,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    frozen.check(cfg)?;
    let (x, y) = batch_tensors(batch, cfg.net.base_resolution)?;
    let mut tape = Tape::new();
    let g = state.generator.bind(&mut tape, true);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let conditions = pyramid(&mut tape, xv)?;
    let targets = pyramid(&mut tape, yv)?;
    let outputs = generator_graph(&mut tape, &g, xv)?;
    let discs: Vec<Option<BoundParams>> = state
        .discriminators
        .iter()
        .map(|d| d.as_ref().map(|d| d.bind(&mut tape, false)))
        .collect();
    let ridge = frozen.ridge.as_ref().map(|p| p.bind(&mut tape, false));
    let verifier = frozen.verifier.as_ref().map(|p| p.bind(&mut tape, false));
    let nets = LossNetworks {
        discriminators: [discs[0].as_ref(), discs[1].as_ref(), discs[2].as_ref()],
        ridge: ridge.as_ref(),
        verifier: verifier.as_ref(),
    };
    let vars = generator_loss_graph(
        &mut tape,
        &outputs,
        &conditions,
        &targets,
        &nets,
        &cfg.weights,
        &cfg.ablation,
    )?;
    let report = vars.report(&tape, &cfg.ablation);
    if let Some((term, _)) = report.first_non_finite() {
        let detail = serde_json::to_string(&report).expect("report serializes");
        return Err(non_finite(&term, state, detail));
    }
    let mut grads = tape.backward(vars.total)?;
    state.opt_generator.step(&mut state.generator, &take_grads(&g, &mut grads))?;
    check_params(&state.generator, state)?;
    Ok(report)
}

/// One alternating update: discriminators first, then the generator.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&SamplePair],
    frozen: &FrozenNets,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let adv_d = discriminator_update(state, batch, cfg)?;
    let mut report = generator_update(state, batch, frozen, cfg)?;
    report.adv_d = adv_d;
    state.step += 1;
    Ok(report)
}

/// Losses of the current state on `samples` without updating anything,
/// averaged over batches of `cfg.batch_size`.
pub fn evaluate_losses(
    state: &TrainState,
    samples: &[SamplePair],
    frozen: &FrozenNets,
    cfg: &TrainConfig,
) -> Result<Option<LossReport>> {
    frozen.check(cfg)?;
    let mut reports = Vec::new();
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs, cfg.net.base_resolution)?;
        let mut tape = Tape::new();
        let g = state.generator.bind(&mut tape, false);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let conditions = pyramid(&mut tape, xv)?;
        let targets = pyramid(&mut tape, yv)?;
        let outputs = generator_graph(&mut tape, &g, xv)?;
        let discs: Vec<Option<BoundParams>> = state
            .discriminators
            .iter()
            .map(|d| d.as_ref().map(|d| d.bind(&mut tape, false)))
            .collect();
        let disc_refs = [discs[0].as_ref(), discs[1].as_ref(), discs[2].as_ref()];
        let ridge = frozen.ridge.as_ref().map(|p| p.bind(&mut tape, false));
        let verifier = frozen.verifier.as_ref().map(|p| p.bind(&mut tape, false));
        let nets = LossNetworks {
            discriminators: disc_refs,
            ridge: ridge.as_ref(),
            verifier: verifier.as_ref(),
        };
        let vars = generator_loss_graph(
            &mut tape,
            &outputs,
            &conditions,
            &targets,
            &nets,
            &cfg.weights,
            &cfg.ablation,
        )?;
        let mut report = vars.report(&tape, &cfg.ablation);
        let (terms, _) =
            discriminator_loss_graph(&mut tape, &disc_refs, &conditions, &targets, &outputs.scales())?;
        report.adv_d = terms.map(|t| t.map_or(0.0, |t| tape.value(t).item()));
        reports.push(report);
    }
    Ok(mean_report(&reports))
}

fn load_split(manifest: &DatasetManifest, split: Split, cfg: &TrainConfig) -> Result<Vec<SamplePair>> {
    let samples = load_samples(manifest, split)?;
    let res = cfg.net.base_resolution;
    if let Some(s) = samples.iter().find(|s| s.blurred.width() != res || s.blurred.height() != res) {
        return Err(Error::Data(format!(
            "{} sample of {} is {}x{}, the network expects {res}x{res}",
            split.name(),
            s.subject_id,
            s.blurred.width(),
            s.blurred.height()
        )));
    }
    Ok(samples)
}

fn continue_training(
    mut state: TrainState,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    frozen: &FrozenNets,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    frozen.check(cfg)?;
    let train = load_split(manifest, Split::Train, cfg)?;
    if train.is_empty() {
        return Err(Error::Data("the train split is empty".into()));
    }
    let val = load_split(manifest, Split::Val, cfg)?;
    create_dir(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = JsonLog::append(&log_path)?;
    let start = Instant::now();
    for epoch in state.epoch + 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &train[i]).collect();
            let report = train_step(&mut state, &batch, frozen, cfg)?;
            log.write(&LogRecord::Step {
                epoch,
                step: state.step,
                wall_time: start.elapsed().as_secs_f64(),
                report: report.clone(),
            })?;
            reports.push(report);
        }
        state.epoch = epoch;
        let val_report = evaluate_losses(&state, &val, frozen, cfg)?;
        if let Some(r) = &val_report {
            log.write(&LogRecord::Val {
                epoch,
                step: state.step,
                wall_time: start.elapsed().as_secs_f64(),
                report: r.clone(),
            })?;
        }
        log.flush()?;
        let train_mean = mean_report(&reports).expect("at least one batch");
        log::info!(
            "epoch {epoch}/{}: total {:.4}, rec_full {:.4}",
            cfg.epochs,
            train_mean.total,
            train_mean.rec[2]
        );
        state.history.push(EpochRecord {
            epoch,
            train: train_mean,
            val: val_report,
        });
        state.save(&out_dir.join(format!("epoch_{epoch:03}")))?;
    }
    let final_dir = out_dir.join(FINAL_DIR);
    state.save(&final_dir)?;
    Ok(TrainOutcome {
        state,
        final_dir,
        log_path,
    })
}

/// Trains from scratch, writing `epoch_NNN/` checkpoints, `final/` and the
/// step log under `out_dir`.
pub fn run_training(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    frozen: &FrozenNets,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let state = init_state(cfg)?;
    frozen.check(cfg)?;
    let log_path = out_dir.join(LOG_FILE);
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    continue_training(state, manifest, cfg, frozen, out_dir)
}

/// Continues a run from a saved epoch directory up to `cfg.epochs`.
pub fn resume_training(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    frozen: &FrozenNets,
    from: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scales = [0, 1, 2].map(|s| cfg.ablation.scale_enabled(s));
    let state = TrainState::load(from, scales)?;
    if state.seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, config has {}",
            state.seed, cfg.seed
        )));
    }
    if state.generator.config != cfg.net {
        return Err(Error::Config("checkpoint network config differs from the run config".into()));
    }
    continue_training(state, manifest, cfg, frozen, out_dir)
}
