//! Bridge diffusion between clean and motion-corrupted windows.
//!
//! The forward process interpolates `x_t = (1−α_t)x₀ + α_t y + √δ_t ε` with
//! `α_t = t/T` and `δ_t = 2(α_t − α_t²)`; a denoiser predicts the noise term
//! `n_t = x_t − x₀` and the reverse samplers walk from `y` back to `x₀`.

pub mod checkpoint;
pub mod cnn;
pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use cnn::{CnnConfig, TinyDenoiser};
pub use denoiser::{Denoiser, IdentityDenoiser, LinearDenoiser, OracleDenoiser, TrainableDenoiser};
pub use sampler::{
    direct_step, forward_sample, posterior_step, sample, sliding_window_correct, target_noise,
    SampleMode, SampleTrace,
};
pub use schedule::{BridgeSchedule, StepCoefficients};
pub use train::{
    train_step, Adam, AdamConfig, LossBreakdown, TrainConfig, TrainState, TrainingExample,
};
