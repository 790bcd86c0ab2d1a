use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::create_dir;
use crate::networks::{ModelParameters, NetKind};
use crate::objective::LossReport;
use crate::{Error, Result};

const STATE_FILE: &str = "state.json";

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub val: Option<LossReport>,
}

/// Everything needed to continue a run: parameters, optimizer moments and
/// counters. The data order is derived from `(seed, epoch)`, so the seed is
/// the whole sampling state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: usize,
    pub seed: u64,
    pub generator: ModelParameters,
    pub discriminators: [Option<ModelParameters>; 3],
    pub opt_generator: Adam,
    pub opt_discriminators: [Option<Adam>; 3],
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: usize,
    seed: u64,
    history: Vec<EpochRecord>,
}

fn opt_name(kind: NetKind) -> String {
    kind.file_name().replace(".ckpt", ".opt")
}

impl TrainState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.generator.save(&dir.join(NetKind::Generator.file_name()))?;
        self.opt_generator.save(&dir.join(opt_name(NetKind::Generator)))?;
        for s in 0..3 {
            if let (Some(d), Some(o)) = (&self.discriminators[s], &self.opt_discriminators[s]) {
                let kind = NetKind::Discriminator { scale: s };
                d.save(&dir.join(kind.file_name()))?;
                o.save(&dir.join(opt_name(kind)))?;
            }
        }
        let meta = StateMeta {
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            history: self.history.clone(),
        };
        let path = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&meta).expect("state serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a state saved by [`TrainState::save`]; `scales` lists the
    /// discriminators the run expects.
    pub fn load(dir: &Path, scales: [bool; 3]) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let generator = ModelParameters::load_kind(&dir.join(NetKind::Generator.file_name()), NetKind::Generator)?;
        let opt_generator = Adam::load(&dir.join(opt_name(NetKind::Generator)))?;
        let mut discriminators = [None, None, None];
        let mut opt_discriminators = [None, None, None];
        for s in 0..3 {
            if !scales[s] {
                continue;
            }
            let kind = NetKind::Discriminator { scale: s };
            discriminators[s] = Some(ModelParameters::load_kind(&dir.join(kind.file_name()), kind)?);
            opt_discriminators[s] = Some(Adam::load(&dir.join(opt_name(kind)))?);
        }
        Ok(Self {
            epoch: meta.epoch,
            step: meta.step,
            seed: meta.seed,
            generator,
            discriminators,
            opt_generator,
            opt_discriminators,
            history: meta.history,
        })
    }
}

/// Element-wise mean of reports sharing the same active terms.
pub(crate) fn mean_report(reports: &[LossReport]) -> Option<LossReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mut out = LossReport {
        adv_g: [0.0; 3],
        adv_d: [0.0; 3],
        rec: [0.0; 3],
        ridge: 0.0,
        verif: 0.0,
        total: 0.0,
        active_terms: first.active_terms.clone(),
    };
    for r in reports {
        for s in 0..3 {
            out.adv_g[s] += r.adv_g[s] / n;
            out.adv_d[s] += r.adv_d[s] / n;
            out.rec[s] += r.rec[s] / n;
        }
        out.ridge += r.ridge / n;
        out.verif += r.verif / n;
        out.total += r.total / n;
    }
    Some(out)
}
