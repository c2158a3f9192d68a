//! Conditional denoising action head.

mod normalizer;
mod sampler;
mod schedule;
mod unet;

pub use normalizer::Normalizer;
pub use sampler::{
    add_noise, epsilon_loss, NoisedChunk,
    ddim_sample, ddim_sample_clipped, ddim_sample_clipped_from, ddim_sample_from, sinusoidal_embedding, training_loss, Denoiser, MlpDenoiser,
    NORMALIZED_BOUND,
};
pub use schedule::{build_schedule, BetaSchedule, DdimStep, NoiseSchedule};
pub use unet::{UNet1d, UNetConfig};
