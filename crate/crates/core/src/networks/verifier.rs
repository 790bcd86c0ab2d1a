//! Siamese residual verifier.
//!
//! Stem: 4×4 stride-2 convolution, instance norm, ReLU. Then `n` stages of
//! basic residual blocks (two 3×3 convolutions with instance norm; a 1×1
//! projection shortcut where the shape changes). Stage `i` has
//! `verifier_channels·2^i` channels and halves the resolution for `i > 0`.
//! Global average pooling, a linear layer and L2 normalization give the
//! embedding. Both inputs of a pair go through the same weights.

use fpdeblur_tensor::{Tape, Tensor, Var};

use super::{BoundParams, ModelParameters, NetConfig, NetKind, NORM_EPS};
use crate::{Error, Result};

const EMBED_EPS: f64 = 1e-12;

fn stage_channels(cfg: &NetConfig, i: usize) -> usize {
    cfg.verifier_channels << i
}

pub(crate) fn shapes(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = cfg.verifier_channels;
    let mut out = vec![
        ("stem.w".to_string(), vec![c0, 1, 4, 4]),
        ("stem.b".to_string(), vec![c0]),
    ];
    let mut cin = c0;
    for s in 0..cfg.verifier_blocks {
        let c = stage_channels(cfg, s);
        for b in 0..cfg.verifier_blocks_per_stage {
            let name = format!("stage{s}.block{b}");
            out.push((format!("{name}.conv1.w"), vec![c, cin, 3, 3]));
            out.push((format!("{name}.conv1.b"), vec![c]));
            out.push((format!("{name}.conv2.w"), vec![c, c, 3, 3]));
            out.push((format!("{name}.conv2.b"), vec![c]));
            if b == 0 && (s > 0 || cin != c) {
                out.push((format!("{name}.proj.w"), vec![c, cin, 1, 1]));
                out.push((format!("{name}.proj.b"), vec![c]));
            }
            cin = c;
        }
    }
    out.push(("embed.w".into(), vec![cfg.embedding_dim, cin]));
    out.push(("embed.b".into(), vec![cfg.embedding_dim]));
    out
}

/// Tape handles of a verifier pass: unit embeddings `[N, E]` and the output
/// of every stage.
#[derive(Debug, Clone)]
pub struct VerifierVars {
    pub embedding: Var,
    pub stages: Vec<Var>,
}

pub fn verifier_graph(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<VerifierVars> {
    p.expect_kind(|k| k == NetKind::Verifier, "verifier")?;
    let cfg = &p.config;
    let r = cfg.base_resolution;
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != 1 || s[2] != r || s[3] != r {
        return Err(Error::Config(format!("verifier expects [N, 1, {r}, {r}], got {s:?}")));
    }
    let conv = |tape: &mut Tape, h: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
        let w = p.var(&format!("{name}.w"))?;
        let b = p.var(&format!("{name}.b"))?;
        Ok(tape.conv2d(h, w, Some(b), stride, pad)?)
    };
    let mut h = conv(tape, x, "stem", 2, 1)?;
    h = tape.instance_norm(h, NORM_EPS)?;
    h = tape.relu(h);
    let mut stages = Vec::with_capacity(cfg.verifier_blocks);
    for s in 0..cfg.verifier_blocks {
        for b in 0..cfg.verifier_blocks_per_stage {
            let name = format!("stage{s}.block{b}");
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let mut y = conv(tape, h, &format!("{name}.conv1"), stride, 1)?;
            y = tape.instance_norm(y, NORM_EPS)?;
            y = tape.relu(y);
            y = conv(tape, y, &format!("{name}.conv2"), 1, 1)?;
            y = tape.instance_norm(y, NORM_EPS)?;
            let shortcut = if p.vars.contains_key(&format!("{name}.proj.w")) {
                conv(tape, h, &format!("{name}.proj"), stride, 0)?
            } else {
                h
            };
            let sum = tape.add(y, shortcut)?;
            h = tape.relu(sum);
        }
        stages.push(h);
    }
    let pooled = tape.global_avg_pool(h)?;
    let e = tape.linear(pooled, p.var("embed.w")?, Some(p.var("embed.b")?))?;
    let embedding = tape.l2_normalize(e, EMBED_EPS)?;
    Ok(VerifierVars { embedding, stages })
}

/// Unit embedding `[N, E]` and stage outputs of a batch `[N, 1, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierFeatures {
    pub embedding: Tensor,
    pub stage_features: Vec<Tensor>,
}

pub fn verifier_embed(params: &ModelParameters, imgs: &Tensor) -> Result<VerifierFeatures> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(imgs.clone());
    let v = verifier_graph(&mut tape, &p, x)?;
    Ok(VerifierFeatures {
        embedding: tape.value(v.embedding).clone(),
        stage_features: v.stages.iter().map(|&s| tape.value(s).clone()).collect(),
    })
}

/// Euclidean distance between row `i` of two embedding matrices.
pub fn verifier_distance(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    let e = a.shape()[1];
    a.data()[i * e..(i + 1) * e]
        .iter()
        .zip(&b.data()[i * e..(i + 1) * e])
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise distances between row-aligned batches, with both feature sets.
pub fn verifier_forward(
    params: &ModelParameters,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Vec<f64>, VerifierFeatures, VerifierFeatures)> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "verifier pair shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let fa = verifier_embed(params, a)?;
    let fb = verifier_embed(params, b)?;
    let n = a.shape()[0];
    let d = (0..n)
        .map(|i| verifier_distance(&fa.embedding, &fb.embedding, i))
        .collect();
    Ok((d, fa, fb))
}
