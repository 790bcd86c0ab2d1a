use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fpdeblur_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gan::take_grads;
use super::log::JsonLog;
use super::{create_dir, epoch_order, stack_images, Adam, TrainConfig, VerifierTrainConfig};
use crate::dataops::{load_clean, CleanSample, DatasetManifest, Split};
use crate::networks::{
    discriminator_graph, init_params, ridge_extractor_forward, ridge_extractor_graph, verifier_embed, verifier_graph, ModelParameters, NetKind,
};
use crate::{Error, Result};

pub const RIDGE_LOG_FILE: &str = "ridge_log.jsonl";
pub const VERIFIER_LOG_FILE: &str = "verifier_log.jsonl";
const RIDGE_DISC_SCALE: usize = 2;

/// Result of ridge extractor pretraining.
#[derive(Debug, Clone)]
pub struct RidgeOutcome {
    pub params: ModelParameters,
    /// Validation L1 of the untrained network.
    pub initial_val_l1: f64,
    /// Validation L1 after each epoch.
    pub val_l1: Vec<f64>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct RidgeStep {
    epoch: usize,
    step: usize,
    adv_g: f64,
    adv_d: f64,
    l1: f64,
    total: f64,
}

#[derive(Serialize)]
struct EpochValue {
    kind: &'static str,
    epoch: usize,
    value: f64,
}

fn fresh_log(path: &Path) -> Result<JsonLog> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    JsonLog::append(path)
}

fn check_resolution(samples: &[CleanSample], res: usize) -> Result<()> {
    match samples.iter().find(|s| s.clean.width() != res || s.clean.height() != res) {
        Some(s) => Err(Error::Data(format!(
            "clean crop of {} is {}x{}, the network expects {res}x{res}",
            s.subject_id,
            s.clean.width(),
            s.clean.height()
        ))),
        None => Ok(()),
    }
}

fn non_finite(term: &str, epoch: usize, step: usize, value: f64) -> Error {
    Error::NonFinite {
        term: term.into(),
        epoch,
        step,
        detail: format!("value {value}"),
    }
}

/// Mean absolute difference between predicted and reference ridge maps.
pub fn ridge_l1(params: &ModelParameters, samples: &[CleanSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = stack_images(chunk.iter().map(|s| &s.clean))?;
        let want = stack_images(chunk.iter().map(|s| &s.ridge))?;
        let got = ridge_extractor_forward(params, &x)?;
        sum += got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += got.len();
    }
    Ok(sum / count as f64)
}

/// Trains the clean → ridge map cGAN: L1 weighted by `lambda_rec` plus an
/// adversarial term from one full-resolution PatchGAN conditioned on the
/// clean print. Validation uses the val split, or the train split when the
/// val split is empty. Writes `ridge_extractor.ckpt` and a step log.
pub fn pretrain_ridge_extractor(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RidgeOutcome> {
    cfg.validate()?;
    let train = load_clean(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Data("the train split is empty".into()));
    }
    let val = load_clean(manifest, Split::Val)?;
    let val = if val.is_empty() { train.clone() } else { val };
    let res = cfg.net.base_resolution;
    check_resolution(&train, res)?;
    check_resolution(&val, res)?;
    create_dir(out_dir)?;
    let mut log = fresh_log(&out_dir.join(RIDGE_LOG_FILE))?;

    let mut g = init_params(NetKind::RidgeExtractor, &cfg.net, cfg.seed)?;
    let mut d = init_params(
        NetKind::Discriminator {
            scale: RIDGE_DISC_SCALE,
        },
        &cfg.net,
        cfg.seed.wrapping_add(1),
    )?;
    let mut opt_g = Adam::new(&g, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_d = Adam::new(&d, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let initial_val_l1 = ridge_l1(&g, &val, cfg.batch_size)?;
    log.write(&EpochValue {
        kind: "val_l1",
        epoch: 0,
        value: initial_val_l1,
    })?;
    let mut val_l1 = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for chunk in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            step += 1;
            let x = stack_images(chunk.iter().map(|&i| &train[i].clean))?;
            let y = stack_images(chunk.iter().map(|&i| &train[i].ridge))?;

            let mut tape = Tape::new();
            let gb = g.bind(&mut tape, false);
            let db = d.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let fake = ridge_extractor_graph(&mut tape, &gb, xv)?;
            let real_logits = discriminator_graph(&mut tape, &db, xv, yv)?;
            let fake_logits = discriminator_graph(&mut tape, &db, xv, fake)?;
            let lr = tape.bce_with_logits(real_logits, 1.0);
            let lf = tape.bce_with_logits(fake_logits, 0.0);
            let d_loss = tape.weighted_sum(&[(lr, 1.0), (lf, 1.0)])?;
            let adv_d = tape.value(d_loss).item();
            if !adv_d.is_finite() {
                return Err(non_finite("adv_full (discriminator)", epoch, step, adv_d));
            }
            let mut grads = tape.backward(d_loss)?;
            opt_d.step(&mut d, &take_grads(&db, &mut grads))?;

            let mut tape = Tape::new();
            let gb = g.bind(&mut tape, true);
            let db = d.bind(&mut tape, false);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let fake = ridge_extractor_graph(&mut tape, &gb, xv)?;
            let logits = discriminator_graph(&mut tape, &db, xv, fake)?;
            let adv = tape.bce_with_logits(logits, 1.0);
            let l1 = tape.mean_abs_diff(fake, yv)?;
            let total = tape.weighted_sum(&[(adv, 1.0), (l1, cfg.weights.lambda_rec)])?;
            let record = RidgeStep {
                epoch,
                step,
                adv_g: tape.value(adv).item(),
                adv_d,
                l1: tape.value(l1).item(),
                total: tape.value(total).item(),
            };
            if !record.total.is_finite() {
                return Err(non_finite("ridge total", epoch, step, record.total));
            }
            log.write(&record)?;
            let mut grads = tape.backward(total)?;
            opt_g.step(&mut g, &take_grads(&gb, &mut grads))?;
        }
        let v = ridge_l1(&g, &val, cfg.batch_size)?;
        log.write(&EpochValue {
            kind: "val_l1",
            epoch,
            value: v,
        })?;
        log.flush()?;
        log::info!("ridge epoch {epoch}/{}: val L1 {v:.4}", cfg.epochs);
        val_l1.push(v);
    }
    let checkpoint = out_dir.join(NetKind::RidgeExtractor.file_name());
    g.save(&checkpoint)?;
    Ok(RidgeOutcome {
        params: g,
        initial_val_l1,
        val_l1,
        checkpoint,
    })
}

/// Draws genuine and impostor pairs with equal probability.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
    multi: Vec<usize>,
}

impl PairSampler {
    /// `subjects[i]` is the identity of item `i`. Needs at least two subjects
    /// with two or more items each.
    pub fn new<S: AsRef<str>>(subjects: &[S]) -> Result<Self> {
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in subjects.iter().enumerate() {
            by_subject.entry(s.as_ref()).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_subject.into_values().collect();
        let multi: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() >= 2).collect();
        if multi.len() < 2 {
            return Err(Error::Data(format!(
                "pair sampling needs two subjects with at least two impressions, found {}",
                multi.len()
            )));
        }
        Ok(Self { groups, multi })
    }

    /// `(a, b, genuine)` with `a != b`.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize, bool) {
        if rng.random_bool(0.5) {
            let g = &self.groups[self.multi[rng.random_range(0..self.multi.len())]];
            let i = rng.random_range(0..g.len());
            let j = (i + rng.random_range(1..g.len())) % g.len();
            (g[i], g[j], true)
        } else {
            let n = self.groups.len();
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            let (ga, gb) = (&self.groups[a], &self.groups[b]);
            (
                ga[rng.random_range(0..ga.len())],
                gb[rng.random_range(0..gb.len())],
                false,
            )
        }
    }
}

/// Mean embedding distances over all genuine and impostor pairs of a set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separation {
    pub genuine_mean: f64,
    pub impostor_mean: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

impl Separation {
    pub fn margin(&self) -> f64 {
        self.impostor_mean - self.genuine_mean
    }
}

pub fn verifier_separation(params: &ModelParameters, samples: &[CleanSample]) -> Result<Separation> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let x = stack_images(chunk.iter().map(|s| &s.clean))?;
        let e = verifier_embed(params, &x)?.embedding;
        rows.extend(e.data().chunks(e.shape()[1]).map(<[f64]>::to_vec));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let (mut gs, mut gn, mut is, mut in_) = (0.0, 0, 0.0, 0);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = dist(&rows[i], &rows[j]);
            if samples[i].subject_id == samples[j].subject_id {
                gs += d;
                gn += 1;
            } else {
                is += d;
                in_ += 1;
            }
        }
    }
    if gn == 0 || in_ == 0 {
        return Err(Error::Data("separation needs genuine and impostor pairs".into()));
    }
    Ok(Separation {
        genuine_mean: gs / gn as f64,
        impostor_mean: is / in_ as f64,
        genuine_pairs: gn,
        impostor_pairs: in_,
    })
}

/// Result of verifier pretraining.
#[derive(Debug, Clone)]
pub struct VerifierOutcome {
    pub params: ModelParameters,
    /// Mean contrastive loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Held-out separation on the val split, when it has both pair kinds.
    pub separation: Option<Separation>,
    pub checkpoint: PathBuf,
}

/// Trains the Siamese verifier with the contrastive loss on balanced pairs
/// of clean train-split crops. Writes `verifier.ckpt` and a step log.
pub fn pretrain_verifier(
    manifest: &DatasetManifest,
    cfg: &VerifierTrainConfig,
    out_dir: &Path,
) -> Result<VerifierOutcome> {
    cfg.validate()?;
    let train = load_clean(manifest, Split::Train)?;
    let subjects: Vec<&str> = train.iter().map(|s| s.subject_id.as_str()).collect();
    let sampler = PairSampler::new(&subjects)?;
    check_resolution(&train, cfg.net.base_resolution)?;
    let val = load_clean(manifest, Split::Val)?;
    check_resolution(&val, cfg.net.base_resolution)?;
    create_dir(out_dir)?;
    let mut log = fresh_log(&out_dir.join(VERIFIER_LOG_FILE))?;

    let mut params = init_params(NetKind::Verifier, &cfg.net, cfg.seed)?;
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let pairs: Vec<(usize, usize, bool)> =
            (0..cfg.pairs_per_epoch).map(|_| sampler.sample(&mut rng)).collect();
        let mut sum = 0.0;
        for chunk in pairs.chunks(cfg.batch_size) {
            step += 1;
            let a = stack_images(chunk.iter().map(|p| &train[p.0].clean))?;
            let b = stack_images(chunk.iter().map(|p| &train[p.1].clean))?;
            let genuine: Vec<bool> = chunk.iter().map(|p| p.2).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let av = tape.constant(a);
            let bv = tape.constant(b);
            let ea = verifier_graph(&mut tape, &p, av)?.embedding;
            let eb = verifier_graph(&mut tape, &p, bv)?.embedding;
            let loss = tape.pair_contrastive(ea, eb, &genuine, cfg.margin)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(non_finite("contrastive", epoch, step, value));
            }
            log.write(&serde_json::json!({ "epoch": epoch, "step": step, "contrastive": value }))?;
            sum += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            opt.step(&mut params, &take_grads(&p, &mut grads))?;
        }
        let mean = sum / pairs.len() as f64;
        log::info!("verifier epoch {epoch}/{}: contrastive {mean:.4}", cfg.epochs);
        epoch_loss.push(mean);
    }
    log.flush()?;
    let separation = verifier_separation(&params, &val).ok();
    let checkpoint = out_dir.join(NetKind::Verifier.file_name());
    params.save(&checkpoint)?;
    Ok(VerifierOutcome {
        params,
        epoch_loss,
        separation,
        checkpoint,
    })
}
