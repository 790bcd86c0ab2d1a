//! U-Net generator with coarse-scale taps, and the tap-less ridge extractor.
//!
//! Encoder level `i` halves the resolution with a 4×4 stride-2 convolution
//! to `min(base·2^i, max)` channels, followed by instance normalization
//! (skipped on the first level) and a leaky ReLU. Each decoder level doubles
//! the resolution with a transposed convolution, normalizes, applies ReLU and
//! concatenates the encoder map of the same size. A last transposed
//! convolution and a sigmoid give the full-resolution image.
//!
//! Taps are 1×1 convolutions with a sigmoid on the decoder maps of size
//! `R/4` and `R/2` (after skip concatenation). With depth 2 the `R/4` map is
//! the bottleneck itself.

use fpdeblur_tensor::{Tape, Tensor, Var};

use super::{BoundParams, ModelParameters, NetConfig, NetKind, LEAKY_SLOPE, NORM_EPS};
use crate::{Error, Result};

fn channels(cfg: &NetConfig, level: usize) -> usize {
    (cfg.base_channels << level).min(cfg.max_channels)
}

/// Channels of the map of size `R/2^(j+1)`: the bottleneck for `j = D − 1`,
/// otherwise an upsampled map concatenated with its skip.
fn decoder_channels(cfg: &NetConfig, j: usize) -> usize {
    if j == cfg.unet_depth - 1 {
        channels(cfg, j)
    } else {
        2 * channels(cfg, j)
    }
}

pub(crate) fn shapes(cfg: &NetConfig, with_taps: bool) -> Vec<(String, Vec<usize>)> {
    let d = cfg.unet_depth;
    let mut out = Vec::new();
    for i in 0..d {
        let cin = if i == 0 { 1 } else { channels(cfg, i - 1) };
        let c = channels(cfg, i);
        out.push((format!("enc{i}.w"), vec![c, cin, 4, 4]));
        out.push((format!("enc{i}.b"), vec![c]));
    }
    for j in (1..d).rev() {
        let cin = decoder_channels(cfg, j);
        let c = channels(cfg, j - 1);
        out.push((format!("dec{j}.w"), vec![cin, c, 4, 4]));
        out.push((format!("dec{j}.b"), vec![c]));
    }
    out.push(("out.w".into(), vec![2 * channels(cfg, 0), 1, 4, 4]));
    out.push(("out.b".into(), vec![1]));
    if with_taps {
        out.push(("tap_quarter.w".into(), vec![1, decoder_channels(cfg, 1), 1, 1]));
        out.push(("tap_quarter.b".into(), vec![1]));
        out.push(("tap_half.w".into(), vec![1, decoder_channels(cfg, 0), 1, 1]));
        out.push(("tap_half.b".into(), vec![1]));
    }
    out
}

/// Decoder feature maps keyed by level, plus the full-resolution output.
struct UNetVars {
    levels: Vec<Option<Var>>,
    full: Var,
}

fn check_input(tape: &Tape, x: Var, cfg: &NetConfig) -> Result<()> {
    let shape = tape.value(x).shape();
    let r = cfg.base_resolution;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
        return Err(Error::Config(format!(
            "network input {shape:?} does not match [N, 1, {r}, {r}]"
        )));
    }
    Ok(())
}

fn unet(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<UNetVars> {
    let cfg = &p.config;
    check_input(tape, x, cfg)?;
    let d = cfg.unet_depth;
    let mut skips = Vec::with_capacity(d);
    let mut h = x;
    for i in 0..d {
        h = tape.conv2d(h, p.var(&format!("enc{i}.w"))?, Some(p.var(&format!("enc{i}.b"))?), 2, 1)?;
        if i > 0 {
            h = tape.instance_norm(h, NORM_EPS)?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        skips.push(h);
    }
    // levels[j] holds the map of size R/2^(j+1).
    let mut levels = vec![None; d];
    levels[d - 1] = Some(h);
    for j in (1..d).rev() {
        let w = p.var(&format!("dec{j}.w"))?;
        let b = p.var(&format!("dec{j}.b"))?;
        h = tape.conv_transpose2d(h, w, Some(b), 2, 1)?;
        h = tape.instance_norm(h, NORM_EPS)?;
        h = tape.relu(h);
        h = tape.concat_channels(h, skips[j - 1])?;
        levels[j - 1] = Some(h);
    }
    let out = tape.conv_transpose2d(h, p.var("out.w")?, Some(p.var("out.b")?), 2, 1)?;
    let full = tape.sigmoid(out);
    Ok(UNetVars { levels, full })
}

/// Tape handles of the three generator outputs, coarse to fine.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub quarter: Var,
    pub half: Var,
    pub full: Var,
}

impl GeneratorVars {
    pub fn scales(&self) -> [Var; 3] {
        [self.quarter, self.half, self.full]
    }
}

/// Records the generator on `tape`. `x` is `[N, 1, R, R]`.
pub fn generator_graph(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<GeneratorVars> {
    p.expect_kind(|k| k == NetKind::Generator, "generator")?;
    let u = unet(tape, p, x)?;
    let mut tap = |level: usize, name: &str| -> Result<Var> {
        let f = u.levels[level].expect("decoder level recorded");
        let y = tape.conv2d(f, p.var(&format!("{name}.w"))?, Some(p.var(&format!("{name}.b"))?), 1, 0)?;
        Ok(tape.sigmoid(y))
    };
    let quarter = tap(1, "tap_quarter")?;
    let half = tap(0, "tap_half")?;
    Ok(GeneratorVars {
        quarter,
        half,
        full: u.full,
    })
}

/// Records the ridge extractor on `tape`.
pub fn ridge_extractor_graph(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    p.expect_kind(|k| k == NetKind::RidgeExtractor, "ridge extractor")?;
    Ok(unet(tape, p, x)?.full)
}

/// Generator outputs `[N, 1, R/4]`, `[N, 1, R/2]`, `[N, 1, R]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutputs {
    pub quarter: Tensor,
    pub half: Tensor,
    pub full: Tensor,
}

impl GeneratorOutputs {
    pub fn scales(&self) -> [&Tensor; 3] {
        [&self.quarter, &self.half, &self.full]
    }
}

pub fn generator_forward(params: &ModelParameters, blurred: &Tensor) -> Result<GeneratorOutputs> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(blurred.clone());
    let g = generator_graph(&mut tape, &p, x)?;
    Ok(GeneratorOutputs {
        quarter: tape.value(g.quarter).clone(),
        half: tape.value(g.half).clone(),
        full: tape.value(g.full).clone(),
    })
}

pub fn ridge_extractor_forward(params: &ModelParameters, img: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(img.clone());
    let y = ridge_extractor_graph(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}
