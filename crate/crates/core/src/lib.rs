//! Coronary calcium motion artifacts in CT: synthesis by angle-wise projection
//! of moving lesions, correction with a progressive bridge-diffusion sampler,
//! and Agatston / volume scoring.
//!
//! Module map:
//! - [`grid`]: HU volumes, masks, normalization, ROI and window extraction
//! - [`tomo`]: parallel-beam Radon projection and filtered back-projection
//! - [`motion`]: motion families, trajectories and the preset catalog
//! - [`simulate`]: the motion simulation pipeline, phantoms, datasets
//! - [`bridge`]: bridge schedule, samplers, denoisers, training
//! - [`pipeline`]: crops, training loop and tiled volume correction
//! - [`score`]: calcium scoring and evaluation metrics
//! - [`cli`]: command implementations behind the `cacmotion` binary

pub mod bridge;
pub mod cli;
pub mod error;
pub mod grid;
pub mod motion;
pub mod pipeline;
pub mod preview;
pub mod rng;
pub mod score;
pub mod simulate;
pub mod tomo;
pub mod volume_io;

pub use error::{Error, Result};
pub use grid::{BinaryMask, NormalizedGrid, Patch, VoxelGrid};
