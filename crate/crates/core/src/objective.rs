//! Loss terms of the multi-scale deblurring objective.
//!
//! Every term exists twice: as a plain function over tensors, and as a graph
//! recorded on a [`Tape`] for training. Both paths weight terms through
//! [`TermCoefficients`], so a disabled term and a zero weight are the same
//! thing.

use fpdeblur_tensor::{self as tensor, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::networks::{
    discriminator_graph, ridge_extractor_forward, ridge_extractor_graph, verifier_embed,
    verifier_graph, BoundParams, GeneratorOutputs, GeneratorVars, ModelParameters, SCALE_FACTORS,
};
use crate::{Error, Result};

pub const ADV_TERMS: [&str; 3] = ["adv_quarter", "adv_half", "adv_full"];
pub const REC_TERMS: [&str; 3] = ["rec_quarter", "rec_half", "rec_full"];
pub const RIDGE_TERM: &str = "ridge";
pub const VERIF_STAGES_TERM: &str = "verif_stages";
pub const VERIF_EMBEDDING_TERM: &str = "verif_embedding";

/// Margin of the contrastive verifier loss, for unit-length embeddings.
pub const CONTRASTIVE_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_ridge: f64,
    pub lambda_verif: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 100.0,
            lambda_ridge: 5.0,
            lambda_verif: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_ridge", self.lambda_ridge),
            ("lambda_verif", self.lambda_verif),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Switches that remove parts of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Drop the verifier feature term.
    pub no_verifier: bool,
    /// Drop the ridge term.
    pub no_ridge: bool,
    /// Match only the final verifier embedding instead of the stage features.
    pub no_verifier_intermediate: bool,
    /// Keep only the full-scale discriminator and reconstruction term.
    pub single_discriminator: bool,
    /// Plain conditional GAN; requires every other flag.
    pub plain_cgan: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.plain_cgan
            && !(self.no_verifier
                && self.no_ridge
                && self.no_verifier_intermediate
                && self.single_discriminator)
        {
            return Err(Error::Config(
                "plain_cgan requires no_verifier, no_ridge, no_verifier_intermediate and single_discriminator".into(),
            ));
        }
        Ok(())
    }

    pub fn scale_enabled(&self, scale: usize) -> bool {
        !self.single_discriminator || scale == 2
    }

    pub fn uses_ridge(&self) -> bool {
        !self.no_ridge
    }

    pub fn uses_verifier(&self) -> bool {
        !self.no_verifier
    }

    pub fn verif_term(&self) -> &'static str {
        if self.no_verifier_intermediate {
            VERIF_EMBEDDING_TERM
        } else {
            VERIF_STAGES_TERM
        }
    }

    /// Names of the generator loss terms these flags keep.
    pub fn active_terms(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in 0..3 {
            if self.scale_enabled(s) {
                out.push(ADV_TERMS[s].to_string());
            }
        }
        for s in 0..3 {
            if self.scale_enabled(s) {
                out.push(REC_TERMS[s].to_string());
            }
        }
        if self.uses_ridge() {
            out.push(RIDGE_TERM.to_string());
        }
        if self.uses_verifier() {
            out.push(self.verif_term().to_string());
        }
        out
    }
}

/// The six models compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PlainCgan,
    NoVerifier,
    NoRidge,
    NoVerifierIntermediate,
    SingleDiscriminator,
    Proposed,
}

impl Variant {
    /// Table order.
    pub const ALL: [Variant; 6] = [
        Variant::PlainCgan,
        Variant::NoVerifier,
        Variant::NoRidge,
        Variant::NoVerifierIntermediate,
        Variant::SingleDiscriminator,
        Variant::Proposed,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::PlainCgan => "Plain cGAN model",
            Variant::NoVerifier => "Deblurring without verifier",
            Variant::NoRidge => "Deblurring without ridge extractor",
            Variant::NoVerifierIntermediate => "Deblurring without verifier intermediate features",
            Variant::SingleDiscriminator => "Deblurring without multiple discriminators",
            Variant::Proposed => "Proposed deblurring model",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::PlainCgan => "plain_cgan",
            Variant::NoVerifier => "no_verifier",
            Variant::NoRidge => "no_ridge",
            Variant::NoVerifierIntermediate => "no_verifier_intermediate",
            Variant::SingleDiscriminator => "single_discriminator",
            Variant::Proposed => "proposed",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let none = AblationFlags::default();
        match self {
            Variant::PlainCgan => AblationFlags {
                no_verifier: true,
                no_ridge: true,
                no_verifier_intermediate: true,
                single_discriminator: true,
                plain_cgan: true,
            },
            Variant::NoVerifier => AblationFlags {
                no_verifier: true,
                ..none
            },
            Variant::NoRidge => AblationFlags {
                no_ridge: true,
                ..none
            },
            Variant::NoVerifierIntermediate => AblationFlags {
                no_verifier_intermediate: true,
                ..none
            },
            Variant::SingleDiscriminator => AblationFlags {
                single_discriminator: true,
                ..none
            },
            Variant::Proposed => none,
        }
    }
}

/// Multipliers of each generator term in the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermCoefficients {
    pub adv: [f64; 3],
    pub rec: [f64; 3],
    pub ridge: f64,
    pub verif: f64,
}

impl TermCoefficients {
    pub fn new(weights: &LossWeights, flags: &AblationFlags) -> Self {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let scale = |s: usize| on(flags.scale_enabled(s));
        Self {
            adv: [scale(0), scale(1), scale(2)],
            rec: [0, 1, 2].map(|s| weights.lambda_rec * scale(s)),
            ridge: weights.lambda_ridge * on(flags.uses_ridge()),
            verif: weights.lambda_verif * on(flags.uses_verifier()),
        }
    }
}

/// Per-step record of every loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: [f64; 3],
    pub adv_d: [f64; 3],
    pub rec: [f64; 3],
    pub ridge: f64,
    pub verif: f64,
    pub total: f64,
    pub active_terms: Vec<String>,
}

impl LossReport {
    /// Name and value of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<(String, f64)> {
        let named = ADV_TERMS
            .iter()
            .zip(self.adv_g)
            .map(|(n, v)| (format!("{n} (generator)"), v))
            .chain(ADV_TERMS.iter().zip(self.adv_d).map(|(n, v)| (format!("{n} (discriminator)"), v)))
            .chain(REC_TERMS.iter().zip(self.rec).map(|(n, v)| (n.to_string(), v)))
            .chain([
                (RIDGE_TERM.to_string(), self.ridge),
                ("verif".to_string(), self.verif),
                ("total".to_string(), self.total),
            ]);
        named.into_iter().find(|(_, v)| !v.is_finite())
    }
}

fn check_finite(what: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: what.into(),
            epoch: 0,
            step: 0,
            detail: "non-finite input".into(),
        })
    }
}

fn mean_bce(logits: &Tensor, target: f64) -> f64 {
    logits.data().iter().map(|&l| tensor::bce_with_logits(l, target)).sum::<f64>()
        / logits.len() as f64
}

/// Per-scale `(g_term, d_term)` from discriminator logits on real and fake
/// pairs: `d = BCE(real→1) + BCE(fake→0)`, `g = BCE(fake→1)`, averaged over
/// patches.
pub fn adversarial_losses(real: &[Tensor], fake: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    if real.len() != fake.len() {
        return Err(Error::Config(format!(
            "{} real and {} fake logit grids",
            real.len(),
            fake.len()
        )));
    }
    let mut g = Vec::with_capacity(real.len());
    let mut d = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return Err(Error::Config(format!(
                "logit grids differ: {:?} vs {:?}",
                r.shape(),
                f.shape()
            )));
        }
        check_finite("adversarial logits", r)?;
        check_finite("adversarial logits", f)?;
        g.push(mean_bce(f, 1.0));
        d.push(mean_bce(r, 1.0) + mean_bce(f, 0.0));
    }
    Ok((g, d))
}

/// Area downsampling of `[N, C, H, W]` by `factor`.
pub fn downsample_target(y: &Tensor, factor: usize) -> Result<Tensor> {
    Ok(tensor::avg_pool(y, factor)?)
}

fn mean_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn mean_sq(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// L1 distance of each output scale to the area-downsampled target.
pub fn reconstruction_loss(outputs: &GeneratorOutputs, y: &Tensor) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (s, g) in outputs.scales().into_iter().enumerate() {
        out[s] = mean_abs(g, &downsample_target(y, SCALE_FACTORS[s])?)?;
    }
    Ok(out)
}

/// Mean |G_R(y) − G_R(g_full)|.
pub fn ridge_loss(ridge: &ModelParameters, y: &Tensor, g_full: &Tensor) -> Result<f64> {
    mean_abs(
        &ridge_extractor_forward(ridge, y)?,
        &ridge_extractor_forward(ridge, g_full)?,
    )
}

/// Σ over verifier stages of the mean squared feature difference.
pub fn verifier_feature_loss(verifier: &ModelParameters, y: &Tensor, g_full: &Tensor) -> Result<f64> {
    let a = verifier_embed(verifier, y)?;
    let b = verifier_embed(verifier, g_full)?;
    feature_loss(&a.stage_features, &b.stage_features)
}

/// `Σᵢ mean((aᵢ − bᵢ)²)` over matching feature tensors.
pub fn feature_loss(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("{} vs {} feature sets", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, z)| mean_sq(x, z)).sum()
}

/// Mean over the batch of the squared distance between unit embeddings.
pub fn verifier_embedding_loss(verifier: &ModelParameters, y: &Tensor, g_full: &Tensor) -> Result<f64> {
    let a = verifier_embed(verifier, y)?;
    let b = verifier_embed(verifier, g_full)?;
    let e = a.embedding.shape()[1] as f64;
    Ok(e * mean_sq(&a.embedding, &b.embedding)?)
}

/// `d²` for genuine pairs, `max(0, margin − d)²` for impostors.
pub fn contrastive_loss(distance: f64, same_id: bool, margin: f64) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(Error::Data(format!("distance must be ≥ 0, got {distance}")));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    Ok(if same_id {
        distance * distance
    } else {
        (margin - distance).max(0.0).powi(2)
    })
}

/// Weighted total of the generator terms.
///
/// Disabled terms contribute exactly zero and are missing from
/// `active_terms`. The discriminator terms of the report are left at zero.
pub fn total_generator_loss(
    g_terms: [f64; 3],
    rec_terms: [f64; 3],
    ridge: f64,
    verif: f64,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<LossReport> {
    weights.validate()?;
    flags.validate()?;
    let c = TermCoefficients::new(weights, flags);
    let mut report = LossReport {
        adv_g: [0.0; 3],
        adv_d: [0.0; 3],
        rec: [0.0; 3],
        ridge: 0.0,
        verif: 0.0,
        total: 0.0,
        active_terms: flags.active_terms(),
    };
    for s in 0..3 {
        if flags.scale_enabled(s) {
            report.adv_g[s] = g_terms[s];
            report.rec[s] = rec_terms[s];
        }
    }
    if flags.uses_ridge() {
        report.ridge = ridge;
    }
    if flags.uses_verifier() {
        report.verif = verif;
    }
    report.total = weighted_total(&report, &c);
    if let Some((term, value)) = report.first_non_finite() {
        return Err(Error::NonFinite {
            term,
            epoch: 0,
            step: 0,
            detail: format!("value {value}"),
        });
    }
    Ok(report)
}

fn weighted_total(r: &LossReport, c: &TermCoefficients) -> f64 {
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(8);
    for s in 0..3 {
        terms.push((c.adv[s], r.adv_g[s]));
    }
    for s in 0..3 {
        terms.push((c.rec[s], r.rec[s]));
    }
    terms.push((c.ridge, r.ridge));
    terms.push((c.verif, r.verif));
    terms
        .into_iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|(w, v)| w * v)
        .sum()
}

/// Frozen or trainable networks taking part in a generator loss graph.
pub struct LossNetworks<'a> {
    /// Discriminators per scale; `None` for disabled scales.
    pub discriminators: [Option<&'a BoundParams>; 3],
    pub ridge: Option<&'a BoundParams>,
    pub verifier: Option<&'a BoundParams>,
}

/// Tape handles of every generator term and the total.
#[derive(Debug, Clone)]
pub struct GeneratorLossVars {
    pub adv: [Option<Var>; 3],
    pub rec: [Option<Var>; 3],
    pub ridge: Option<Var>,
    pub verif: Option<Var>,
    pub total: Var,
}

impl GeneratorLossVars {
    /// Plain values of the recorded terms; discriminator terms left at zero.
    pub fn report(&self, tape: &Tape, flags: &AblationFlags) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossReport {
            adv_g: self.adv.map(val),
            adv_d: [0.0; 3],
            rec: self.rec.map(val),
            ridge: val(self.ridge),
            verif: val(self.verif),
            total: tape.value(self.total).item(),
            active_terms: flags.active_terms(),
        }
    }
}

/// Pooled copies of a `[N, 1, R, R]` batch at the three output scales.
pub fn pyramid(tape: &mut Tape, x: Var) -> Result<[Var; 3]> {
    let quarter = tape.avg_pool(x, SCALE_FACTORS[0])?;
    let half = tape.avg_pool(x, SCALE_FACTORS[1])?;
    Ok([quarter, half, x])
}

/// Records the generator objective.
///
/// `conditions` and `targets` are the blurred input and the clean image at
/// the three scales (see [`pyramid`]). Terms disabled by `flags` are not
/// recorded at all.
pub fn generator_loss_graph(
    tape: &mut Tape,
    g: &GeneratorVars,
    conditions: &[Var; 3],
    targets: &[Var; 3],
    nets: &LossNetworks<'_>,
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<GeneratorLossVars> {
    weights.validate()?;
    flags.validate()?;
    let c = TermCoefficients::new(weights, flags);
    let outputs = g.scales();
    let mut adv = [None; 3];
    let mut rec = [None; 3];
    let mut weighted = Vec::new();
    for s in 0..3 {
        if !flags.scale_enabled(s) {
            continue;
        }
        let d = nets.discriminators[s]
            .ok_or_else(|| Error::MissingDependency(format!("discriminator for scale {s}")))?;
        let logits = discriminator_graph(tape, d, conditions[s], outputs[s])?;
        let a = tape.bce_with_logits(logits, 1.0);
        weighted.push((a, c.adv[s]));
        adv[s] = Some(a);
    }
    for s in 0..3 {
        if !flags.scale_enabled(s) {
            continue;
        }
        let r = tape.mean_abs_diff(outputs[s], targets[s])?;
        weighted.push((r, c.rec[s]));
        rec[s] = Some(r);
    }
    let mut ridge = None;
    if flags.uses_ridge() {
        let net = nets
            .ridge
            .ok_or_else(|| Error::MissingDependency("ridge extractor".into()))?;
        let want = ridge_extractor_graph(tape, net, targets[2])?;
        let want = tape.detach(want);
        let got = ridge_extractor_graph(tape, net, g.full)?;
        let r = tape.mean_abs_diff(got, want)?;
        weighted.push((r, c.ridge));
        ridge = Some(r);
    }
    let mut verif = None;
    if flags.uses_verifier() {
        let net = nets
            .verifier
            .ok_or_else(|| Error::MissingDependency("verifier".into()))?;
        let want = verifier_graph(tape, net, targets[2])?;
        let got = verifier_graph(tape, net, g.full)?;
        let v = if flags.no_verifier_intermediate {
            let e = tape.value(want.embedding).shape()[1] as f64;
            let fixed = tape.detach(want.embedding);
            let sq = tape.mean_sq_diff(got.embedding, fixed)?;
            tape.weighted_sum(&[(sq, e)])?
        } else {
            let mut stages = Vec::with_capacity(got.stages.len());
            for (&a, &b) in got.stages.iter().zip(&want.stages) {
                let fixed = tape.detach(b);
                stages.push((tape.mean_sq_diff(a, fixed)?, 1.0));
            }
            tape.weighted_sum(&stages)?
        };
        weighted.push((v, c.verif));
        verif = Some(v);
    }
    weighted.retain(|(_, w)| *w != 0.0);
    let total = tape.weighted_sum(&weighted)?;
    Ok(GeneratorLossVars {
        adv,
        rec,
        ridge,
        verif,
        total,
    })
}

/// Records `Σ_s BCE(D_s(x_s, y_s)→1) + BCE(D_s(x_s, fake_s)→0)` over the
/// enabled scales. Returns the per-scale terms and their sum.
pub fn discriminator_loss_graph(
    tape: &mut Tape,
    discriminators: &[Option<&BoundParams>; 3],
    conditions: &[Var; 3],
    targets: &[Var; 3],
    fakes: &[Var; 3],
) -> Result<([Option<Var>; 3], Var)> {
    let mut terms = [None; 3];
    let mut parts = Vec::new();
    for s in 0..3 {
        let Some(d) = discriminators[s] else { continue };
        let real = discriminator_graph(tape, d, conditions[s], targets[s])?;
        let fake = discriminator_graph(tape, d, conditions[s], fakes[s])?;
        let lr = tape.bce_with_logits(real, 1.0);
        let lf = tape.bce_with_logits(fake, 0.0);
        let t = tape.weighted_sum(&[(lr, 1.0), (lf, 1.0)])?;
        parts.push((t, 1.0));
        terms[s] = Some(t);
    }
    if parts.is_empty() {
        return Err(Error::Config("no discriminator is enabled".into()));
    }
    let total = tape.weighted_sum(&parts)?;
    Ok((terms, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn t(shape: &[usize], v: f64) -> Tensor {
        Tensor::full(shape, v)
    }

    #[test]
    fn zero_logits_give_log_two() {
        let z = vec![t(&[1, 1, 3, 3], 0.0); 3];
        let (g, d) = adversarial_losses(&z, &z).unwrap();
        for s in 0..3 {
            assert!((g[s] - LN_2).abs() < 1e-15);
            assert!((d[s] - 2.0 * LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_logits() {
        let (g, d) = adversarial_losses(&[t(&[1, 1, 2, 2], 20.0)], &[t(&[1, 1, 2, 2], -20.0)]).unwrap();
        assert!(d[0] < 1e-8);
        assert!((g[0] - 20.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let bad = t(&[1, 1, 1, 1], f64::NAN);
        let bad = [bad];
        assert!(adversarial_losses(&bad, &bad).is_err());
    }

    #[test]
    fn contrastive_endpoints() {
        assert_eq!(contrastive_loss(0.0, true, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.0, false, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(0.0, false, 1.0).unwrap(), 1.0);
        assert!((contrastive_loss(0.3, true, 1.0).unwrap() - 0.09).abs() < 1e-15);
        assert!(contrastive_loss(-0.1, true, 1.0).is_err());
    }

    #[test]
    fn total_with_default_weights() {
        let r = total_generator_loss(
            [LN_2; 3],
            [0.1; 3],
            0.2,
            4.0,
            &LossWeights::default(),
            &AblationFlags::default(),
        )
        .unwrap();
        assert!((r.total - (3.0 * LN_2 + 31.04)).abs() < 1e-12);
        assert_eq!(r.active_terms.len(), 8);
    }

    #[test]
    fn plain_cgan_keeps_full_scale_only() {
        let flags = Variant::PlainCgan.flags();
        assert_eq!(flags.active_terms(), vec!["adv_full", "rec_full"]);
        let r = total_generator_loss([1.0, 2.0, 3.0], [0.1, 0.2, 0.3], 9.0, 9.0, &LossWeights::default(), &flags)
            .unwrap();
        assert!((r.total - (3.0 + 100.0 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_plain_cgan_is_rejected() {
        let flags = AblationFlags {
            plain_cgan: true,
            ..AblationFlags::default()
        };
        assert!(flags.validate().is_err());
    }

    #[test]
    fn downsampling_contracts() {
        let c = downsample_target(&t(&[1, 1, 8, 8], 0.3), 4).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let checker = Tensor::new(
            vec![1, 1, 4, 4],
            (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect(),
        )
        .unwrap();
        let d = downsample_target(&checker, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
        assert!(downsample_target(&t(&[1, 1, 6, 6], 0.0), 4).is_err());
    }

    #[test]
    fn variant_names_are_distinct() {
        let mut names: Vec<&str> = Variant::ALL.iter().map(|v| v.display_name()).collect();
        names.dedup();
        assert_eq!(names.len(), 6);
        for v in Variant::ALL {
            v.flags().validate().unwrap();
        }
    }
}
