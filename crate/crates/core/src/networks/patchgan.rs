//! Conditional PatchGAN discriminators, one per output scale.
//!
//! Layer stack for `n` stride-2 layers and kernel `k` (padding 1):
//! `n` stride-2 convolutions (instance norm from the second on, leaky ReLU),
//! one stride-1 convolution with norm and leaky ReLU, and a stride-1
//! convolution to one channel. Channels double per layer from
//! `disc_channels`, capped at 8×. Coarse scales too small for the configured
//! `n` use the largest `n` whose grid is non-empty.

use fpdeblur_tensor::{conv_out_size, Tape, Tensor, Var};

use super::{BoundParams, ModelParameters, NetConfig, NetKind, LEAKY_SLOPE, NORM_EPS};
use crate::{Error, Result};

fn grid_after(size: usize, layers: usize, k: usize) -> Option<usize> {
    let mut s = size;
    for _ in 0..layers {
        s = conv_out_size(s, k, 2, 1)?;
    }
    for _ in 0..2 {
        s = conv_out_size(s, k, 1, 1)?;
    }
    Some(s)
}

/// Number of stride-2 layers used at output scale `scale`.
pub fn patchgan_layers_at(cfg: &NetConfig, scale: usize) -> Result<usize> {
    if scale > 2 {
        return Err(Error::Config(format!("discriminator scale {scale} is not one of 0, 1, 2")));
    }
    let size = cfg.scale_resolution(scale);
    (1..=cfg.patchgan_layers)
        .rev()
        .find(|&n| grid_after(size, n, cfg.disc_kernel).is_some_and(|g| g >= 1))
        .ok_or_else(|| {
            Error::Config(format!(
                "no PatchGAN with kernel {} fits {size}² inputs",
                cfg.disc_kernel
            ))
        })
}

/// Side of the patch-score grid at output scale `scale`.
pub fn patch_grid(cfg: &NetConfig, scale: usize) -> Result<usize> {
    let n = patchgan_layers_at(cfg, scale)?;
    Ok(grid_after(cfg.scale_resolution(scale), n, cfg.disc_kernel).expect("checked above"))
}

/// Receptive field, in input pixels, of one patch score for `layers` stride-2
/// layers of kernel `kernel`, via `r ← r·s + k − s` from the output backwards.
pub fn receptive_field(layers: usize, kernel: usize) -> usize {
    let strides = std::iter::repeat_n(2, layers).chain([1, 1]);
    strides
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .fold(1, |r, s| r * s + kernel - s)
}

fn layer_channels(cfg: &NetConfig, i: usize) -> usize {
    cfg.disc_channels * (1usize << i).min(8)
}

pub(crate) fn shapes(cfg: &NetConfig, scale: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let n = patchgan_layers_at(cfg, scale)?;
    let k = cfg.disc_kernel;
    let mut out = Vec::new();
    let mut cin = 2;
    for i in 0..=n {
        let c = layer_channels(cfg, i);
        out.push((format!("conv{i}.w"), vec![c, cin, k, k]));
        out.push((format!("conv{i}.b"), vec![c]));
        cin = c;
    }
    out.push(("head.w".into(), vec![1, cin, k, k]));
    out.push(("head.b".into(), vec![1]));
    Ok(out)
}

/// Records a discriminator on `tape`; returns raw logits `[N, 1, g, g]`.
pub fn discriminator_graph(
    tape: &mut Tape,
    p: &BoundParams,
    condition: Var,
    candidate: Var,
) -> Result<Var> {
    p.expect_kind(|k| matches!(k, NetKind::Discriminator { .. }), "discriminator")?;
    let NetKind::Discriminator { scale } = p.kind else {
        unreachable!()
    };
    let cfg = &p.config;
    let n = patchgan_layers_at(cfg, scale)?;
    let r = cfg.scale_resolution(scale);
    for v in [condition, candidate] {
        let s = tape.value(v).shape();
        if s.len() != 4 || s[1] != 1 || s[2] != r || s[3] != r {
            return Err(Error::Config(format!(
                "discriminator {scale} expects [N, 1, {r}, {r}], got {s:?}"
            )));
        }
    }
    let mut h = tape.concat_channels(condition, candidate)?;
    for i in 0..=n {
        let stride = if i < n { 2 } else { 1 };
        let w = p.var(&format!("conv{i}.w"))?;
        let b = p.var(&format!("conv{i}.b"))?;
        h = tape.conv2d(h, w, Some(b), stride, 1)?;
        if i > 0 {
            h = tape.instance_norm(h, NORM_EPS)?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    Ok(tape.conv2d(h, p.var("head.w")?, Some(p.var("head.b")?), 1, 1)?)
}

pub fn discriminator_forward(
    params: &ModelParameters,
    condition: &Tensor,
    candidate: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let c = tape.constant(condition.clone());
    let y = tape.constant(candidate.clone());
    let logits = discriminator_graph(&mut tape, &p, c, y)?;
    Ok(tape.value(logits).clone())
}
