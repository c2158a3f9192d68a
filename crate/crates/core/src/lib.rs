//! Numerics and learning components of a multi-view visuomotor diffusion
//! policy: a small reverse-mode autodiff engine, the token encoder with
//! frame-wise token reuse, the conditional denoiser and the proprioception
//! head.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod checkpoint;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod ftr_cache;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod proprio;
pub mod rollout;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use policy::{Batch, PolicyConfig, PolicySpec, VisuomotorPolicy};
pub use rollout::{ControlEnv, EpisodeRecord, Observation, Planner, StepOutcome};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
