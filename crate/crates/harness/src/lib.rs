//! Demo generation, training, evaluation and benchmarks for the visuomotor
//! diffusion policy, behind the `geodp` command line.

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod train;

pub use config::{Preset, RunConfig};
