//! Gradient-penalty Wasserstein GAN: losses, networks and the training loop,
//! plus the vanilla GAN and weight-clipped WGAN losses for comparison.

mod config;
mod losses;
mod nets;
mod synth;
pub mod toy;
mod train;

pub use config::{GanConfig, LrSchedule, OutputActivation};
pub use losses::{
    clip_weights, critic_loss, generator_loss, gradient_penalty, interpolate, interpolate_rows,
    vanilla_gan_discriminator_loss, vanilla_gan_generator_loss, wgan_critic_loss, CriticLoss,
};
pub use nets::{BoundMlp, Critic, CriticNet, GeneratorNet, LinearCritic, Mlp, MlpSpec};
pub use synth::{synthesize_patches, Postprocess};
pub use train::{
    train_gpwgan, GanTrainer, LossRecord, LossReport, NoiseSampler, RealSampler,
};

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum GanError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("interpolation weight {0} is outside [0, 1]")]
    DeltaOutOfRange(f64),
    #[error("probability {0} is outside (0, 1)")]
    DomainError(f64),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid GAN config: {0}")]
    ConfigInvalid(String),
    #[error("patch {index} has {got} values, expected {expected}")]
    PatchShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
