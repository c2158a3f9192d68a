//! Frame-token-reuse latency sweep.
//!
//! A "batch" is that many concurrent episodes, each with its own runner and
//! cache, fed the same synthetic observation stream. One inference step
//! computes the conditioning of every episode in the batch (encoder, cache
//! and projector); the denoiser is identical with and without the cache and
//! is left out. Invocation counts are exact and portable; wall-clock columns
//! are informational.

use std::time::Instant;

use geodp_core::{Observation, ParamStore, Planner, Result, Tensor, VisuomotorPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub obs_steps: usize,
    pub batch: usize,
    pub ftr: bool,
    /// Encoder invocations per episode per timed step.
    pub invocations_per_step: f64,
    /// Over the whole batch, per timed step.
    pub invocations_per_batch_step: f64,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

/// Columns that depend on the machine and load.
pub const TIMING_COLUMNS: [&str; 3] = ["mean_ms", "median_ms", "iqr_ms"];

/// Synthetic observation stream long enough for `warmup + reps` steps.
pub fn synthetic_stream(policy: &VisuomotorPolicy, len: usize, seed: u64) -> Vec<Observation> {
    let ec = &policy.spec.encoder;
    let pd = policy.config().proprio_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| Observation {
            images: Tensor::rand_uniform([ec.views, ec.channels, ec.height, ec.width], 0.0, 1.0, &mut rng),
            proprio: vec![0.0; pd],
            state: Vec::new(),
        })
        .collect()
}

/// One cell of the sweep. `policy` must have been built with `obs_steps`.
pub fn bench_cell(
    policy: &VisuomotorPolicy,
    store: &ParamStore<f32>,
    batch: usize,
    ftr: bool,
    warmup: usize,
    reps: usize,
    stream: &[Observation],
) -> Result<BenchRow> {
    let to = policy.config().obs_steps;
    let steps = warmup + reps;
    assert!(stream.len() >= steps, "stream shorter than the timed steps");
    let mut runners: Vec<_> = (0..batch)
        .map(|i| {
            let mut r = policy.runner(store, ftr, 0);
            r.reset(i as u64);
            r
        })
        .collect();
    let mut times = Vec::with_capacity(reps);
    let mut invocations = 0u64;
    for t in 0..steps {
        let before: u64 = runners.iter().map(|r| r.cache_stats().encoder_invocations).sum();
        let start = Instant::now();
        for r in runners.iter_mut() {
            std::hint::black_box(r.condition(&stream[..=t])?);
        }
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let after: u64 = runners.iter().map(|r| r.cache_stats().encoder_invocations).sum();
        if t >= warmup {
            times.push(elapsed);
            invocations += after - before;
        }
    }
    let per_batch = invocations as f64 / reps as f64;
    let (median, iqr) = median_iqr(&times);
    Ok(BenchRow {
        obs_steps: to,
        batch,
        ftr,
        invocations_per_step: per_batch / batch as f64,
        invocations_per_batch_step: per_batch,
        repetitions: reps,
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        median_ms: median,
        iqr_ms: iqr,
    })
}

/// Every `(T, batch, ftr)` cell of `bc`; `make` builds the policy for a
/// given observation window.
pub fn bench_sweep(
    bc: &BenchConfig,
    mut make: impl FnMut(usize) -> Result<(VisuomotorPolicy, ParamStore<f32>)>,
    seed: u64,
    mut on_row: impl FnMut(&BenchRow),
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let reps = bc.repetitions;
    for &to in &bc.obs_steps {
        let (policy, store) = make(to)?;
        let stream = synthetic_stream(&policy, bc.warmup + reps, seed);
        for &b in &bc.batch_sizes {
            for ftr in [false, true] {
                let row = bench_cell(&policy, &store, b, ftr, bc.warmup, reps, &stream)?;
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Median and interquartile range with linear interpolation.
pub fn median_iqr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}
