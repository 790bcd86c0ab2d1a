//! Fingerprint deblurring with a multi-scale conditional GAN.
//!
//! The pipeline has five stages, each in its own module:
//!
//! * [`dataops`]: paired blurred/clean/ridge corpora from synthetic or real
//!   prints (segmentation, orientation field, core detection, cropping).
//! * [`networks`]: U-Net generator with intermediate taps, PatchGAN
//!   discriminators, U-Net ridge extractor and Siamese residual verifier.
//! * [`objective`]: adversarial, multi-scale L1, ridge and verifier feature
//!   losses and their weighted total.
//! * [`training`]: pretraining of the auxiliary networks, the alternating
//!   GAN loop, checkpointing and the ablation harness.
//! * [`evaluation`]: verifier-based matching, ROC/EER/AUC and reports.

pub mod dataops;
mod error;
pub mod evaluation;
pub mod networks;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
pub use fpdeblur_tensor as tensor;
