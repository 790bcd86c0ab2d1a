//! The four trainable networks as pure forward computations over parameter
//! collections.
//!
//! Each network has a graph builder that records its forward pass on a
//! [`Tape`](crate::tensor::Tape) from bound parameters, and a convenience
//! wrapper that evaluates it on plain tensors.

mod params;
mod patchgan;
mod unet;
mod verifier;

pub use params::{init_params, shape_table, BoundParams, ModelParameters, CHECKPOINT_MAGIC};
pub use patchgan::{
    discriminator_forward, discriminator_graph, patch_grid, patchgan_layers_at, receptive_field,
};
pub use unet::{
    generator_forward, generator_graph, ridge_extractor_forward, ridge_extractor_graph,
    GeneratorOutputs, GeneratorVars,
};
pub use verifier::{
    verifier_distance, verifier_embed, verifier_forward, verifier_graph, VerifierFeatures,
    VerifierVars,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Output scales of the generator relative to the base resolution, coarse to fine.
pub const TAP_SCALES: [f64; 3] = [0.25, 0.5, 1.0];

/// Downsampling factor of each output scale.
pub const SCALE_FACTORS: [usize; 3] = [4, 2, 1];

pub const SCALE_NAMES: [&str; 3] = ["quarter", "half", "full"];

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    /// Discriminator of output scale `scale` (index into [`TAP_SCALES`]).
    Discriminator {
        scale: usize,
    },
    RidgeExtractor,
    Verifier,
}

impl NetKind {
    pub fn file_name(self) -> String {
        match self {
            NetKind::Generator => "generator.ckpt".into(),
            NetKind::Discriminator { scale } => format!("disc_{}.ckpt", SCALE_NAMES[scale]),
            NetKind::RidgeExtractor => "ridge_extractor.ckpt".into(),
            NetKind::Verifier => "verifier.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_resolution: usize,
    pub base_channels: usize,
    pub unet_depth: usize,
    /// Channel cap of the U-Net levels.
    pub max_channels: usize,
    pub tap_scales: [f64; 3],
    /// Residual stages of the verifier trunk.
    pub verifier_blocks: usize,
    pub verifier_blocks_per_stage: usize,
    pub verifier_channels: usize,
    pub embedding_dim: usize,
    /// Stride-2 convolutions of each PatchGAN.
    pub patchgan_layers: usize,
    pub disc_channels: usize,
    pub disc_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_resolution: 256,
            base_channels: 32,
            unet_depth: 6,
            max_channels: 256,
            tap_scales: TAP_SCALES,
            verifier_blocks: 4,
            verifier_blocks_per_stage: 2,
            verifier_channels: 64,
            embedding_dim: 128,
            patchgan_layers: 3,
            disc_channels: 64,
            disc_kernel: 4,
        }
    }
}

impl NetConfig {
    /// Small configuration for 64² crops on a CPU.
    pub fn desk() -> Self {
        Self {
            base_resolution: 64,
            base_channels: 16,
            unet_depth: 4,
            max_channels: 128,
            verifier_blocks_per_stage: 1,
            verifier_channels: 16,
            disc_channels: 16,
            ..Self::default()
        }
    }

    /// Side length of output scale `scale`.
    pub fn scale_resolution(&self, scale: usize) -> usize {
        self.base_resolution / SCALE_FACTORS[scale]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tap_scales != TAP_SCALES {
            return fail(format!("tap_scales must be {TAP_SCALES:?}"));
        }
        if self.unet_depth < 2 {
            return fail("unet_depth must be at least 2".into());
        }
        let down = 1usize.checked_shl(self.unet_depth as u32).unwrap_or(0);
        if down == 0 || !self.base_resolution.is_multiple_of(down) || self.base_resolution < down {
            return fail(format!(
                "base_resolution {} is not divisible by 2^{}",
                self.base_resolution, self.unet_depth
            ));
        }
        let counts = [
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("verifier_blocks", self.verifier_blocks),
            ("verifier_blocks_per_stage", self.verifier_blocks_per_stage),
            ("verifier_channels", self.verifier_channels),
            ("embedding_dim", self.embedding_dim),
            ("patchgan_layers", self.patchgan_layers),
            ("disc_channels", self.disc_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.disc_kernel < 2 {
            return fail("disc_kernel must be at least 2".into());
        }
        if self.base_resolution >> self.verifier_blocks == 0 {
            return fail(format!(
                "{} verifier stages do not fit {}² inputs",
                self.verifier_blocks, self.base_resolution
            ));
        }
        for scale in 0..3 {
            patchgan_layers_at(self, scale)?;
        }
        Ok(())
    }
}
