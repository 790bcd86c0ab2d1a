//! Verifier-based matching, ROC analysis, quality scores and report files.

mod protocol;
mod quality;
mod report;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use protocol::{deblur_images, evaluate_probes, evaluate_variant, protocol_pairs, PairList, VariantEvaluation};
pub use quality::{parse_quality, proxy_quality, quality_report, QualityScore, QualitySource};
pub use report::{emit_report, AblationRow, Report, SigmaRow, CURVE_PREFIX, PLOT_FILE, QUALITY_FILE, REPORT_FILE, META_FILE};

use crate::dataops::GrayImage;
use crate::networks::{verifier_embed, ModelParameters};
use crate::training::stack_images;
use crate::{Error, Result};

/// One comparison. Higher scores mean more alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub subject_a: String,
    pub subject_b: String,
    pub score: f64,
    pub genuine: bool,
}

impl MatchScore {
    pub fn new(subject_a: &str, subject_b: &str, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::Data(format!("match score {score} is not finite")));
        }
        Ok(Self {
            subject_a: subject_a.into(),
            subject_b: subject_b.into(),
            score,
            genuine: subject_a == subject_b,
        })
    }
}

/// ROC curve over the unique scores, highest threshold first.
///
/// `tar[i]` and `far[i]` are the accepted fractions at `score >= thresholds[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub thresholds: Vec<f64>,
    pub tar: Vec<f64>,
    pub far: Vec<f64>,
    pub eer: f64,
    pub auc: f64,
}

/// Unit-norm embeddings of `images`, one row each.
pub(crate) fn embed_all(verifier: &ModelParameters, images: &[GrayImage]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 32;
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let e = verifier_embed(verifier, &stack_images(chunk)?)?.embedding;
        let dim = e.shape()[1];
        rows.extend(e.data().chunks(dim).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_ids(images: usize, ids: &[String], what: &str) -> Result<()> {
    if images != ids.len() {
        return Err(Error::Data(format!(
            "{images} {what} images but {} identifiers",
            ids.len()
        )));
    }
    Ok(())
}

/// Scores every probe against every gallery image; `score = -distance`.
pub fn score_pairs(
    verifier: &ModelParameters,
    probes: &[GrayImage],
    probe_ids: &[String],
    gallery: &[GrayImage],
    gallery_ids: &[String],
) -> Result<Vec<MatchScore>> {
    check_ids(probes.len(), probe_ids, "probe")?;
    check_ids(gallery.len(), gallery_ids, "gallery")?;
    let subjects: BTreeSet<&String> = probe_ids.iter().chain(gallery_ids).collect();
    if subjects.len() < 2 {
        return Err(Error::Data("scoring needs at least two subjects".into()));
    }
    let p = embed_all(verifier, probes)?;
    let g = embed_all(verifier, gallery)?;
    let mut out = Vec::with_capacity(p.len() * g.len());
    for (i, pe) in p.iter().enumerate() {
        for (j, ge) in g.iter().enumerate() {
            out.push(MatchScore::new(&probe_ids[i], &gallery_ids[j], -distance(pe, ge))?);
        }
    }
    Ok(out)
}

/// Threshold sweep over the unique scores.
///
/// AUC is the trapezoid area of the curve from `(0, 0)`, so tied genuine and
/// impostor scores count one half. EER is read where `TAR + FAR` crosses 1,
/// interpolating linearly between the straddling thresholds; a point that
/// lies exactly on the crossing is taken as is, which favours the lower FAR.
pub fn compute_roc(scores: &[MatchScore]) -> Result<RocResult> {
    let mut genuine: Vec<f64> = Vec::new();
    let mut impostor: Vec<f64> = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::Data(format!("match score {} is not finite", s.score)));
        }
        if s.genuine {
            genuine.push(s.score);
        } else {
            impostor.push(s.score);
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Data(format!(
            "ROC needs genuine and impostor scores, got {} and {}",
            genuine.len(),
            impostor.len()
        )));
    }
    let mut all: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.genuine)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let (mut thresholds, mut tar, mut far) = (Vec::new(), Vec::new(), Vec::new());
    let (mut acc_g, mut acc_i) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                acc_g += 1;
            } else {
                acc_i += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tar.push(acc_g as f64 / ng);
        far.push(acc_i as f64 / ni);
    }
    let mut auc = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for (&x, &y) in far.iter().zip(&tar) {
        auc += (x - px) * (y + py) / 2.0;
        (px, py) = (x, y);
    }
    let eer = equal_error_rate(&far, &tar);
    Ok(RocResult {
        thresholds,
        tar,
        far,
        eer,
        auc,
    })
}

fn equal_error_rate(far: &[f64], tar: &[f64]) -> f64 {
    let (mut px, mut py) = (0.0, 0.0);
    for (&x, &y) in far.iter().zip(tar) {
        let g = x + y - 1.0;
        if g >= 0.0 {
            let g0 = px + py - 1.0;
            let a = if g == g0 { 1.0 } else { -g0 / (g - g0) };
            return px + a * (x - px);
        }
        (px, py) = (x, y);
    }
    unreachable!("the last point of a sweep is (1, 1)")
}
