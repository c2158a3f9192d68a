//! Closed-loop evaluation of a policy in the toy env.

use geodp_core::rollout::receding_horizon_execute;
use geodp_core::{ParamStore, Result, VisuomotorPolicy};
use geodp_env::{EnvConfig, TaskKind, ToyEnv};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub plans: usize,
}

/// Episode `i` runs with env seed `seed + i` and sampling stream `i` of
/// `seed`. Episodes run in parallel and come back in index order.
pub fn evaluate(
    policy: &VisuomotorPolicy,
    store: &ParamStore<f32>,
    task: TaskKind,
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
    ftr: bool,
) -> Result<Vec<EpisodeOutcome>> {
    let action_steps = policy.config().action_steps;
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = seed + i as u64;
            let mut env = ToyEnv::reset(task, env, ep_seed)?;
            let mut runner = policy.runner(store, ftr, seed);
            let rec = receding_horizon_execute(&mut runner, &mut env, action_steps, i as u64, task.name(), ep_seed)?;
            Ok(EpisodeOutcome {
                episode: i,
                seed: ep_seed,
                success: rec.success,
                steps: rec.steps(),
                plans: rec.plans,
            })
        })
        .collect()
}

/// Percentage of successful episodes.
pub fn success_rate(outcomes: &[EpisodeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    100.0 * outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
}
