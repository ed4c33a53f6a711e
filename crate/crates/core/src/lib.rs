//! Video face re-aging at configurable scale.
//!
//! * [`synthpipeline`] builds paired multi-age video datasets (aged stills →
//!   posed keyframes → recursive midpoint interpolation) behind backend traits,
//!   with a deterministic procedural backend.
//! * [`generator`] is the recurrent U-Net that predicts per-frame delta images
//!   from age-masked neighbor frames.
//! * [`discriminator`] holds the conditional PatchGAN image critic and the 3D
//!   convolutional video critic.
//! * [`training`] implements the weighted L1 + perceptual + hinge objective
//!   and the alternating optimization loop.
//! * [`metrics`] computes TRWC, T-Age, age MAE and identity similarity.
//! * [`report`] tabulates evaluations per target age; [`cli`] wires it all
//!   into the `reage` command.

pub mod cli;
pub mod datamodel;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod synthpipeline;
pub mod training;

pub use error::{Error, Result};
