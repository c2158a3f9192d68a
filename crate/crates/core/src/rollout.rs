//! Receding-horizon execution: plan a chunk, run its first `T_a` actions,
//! replan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One observation: `V` rendered views `[V, C, H, W]` and the proprio vector.
/// `state` is the full simulator state, only meant for scripted controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Tensor<f32>,
    pub proprio: Vec<f64>,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepOutcome {
    pub success: bool,
    pub done: bool,
}

pub trait ControlEnv {
    fn observation(&mut self) -> Result<Observation>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
    fn max_steps(&self) -> usize;
}

/// Produces action chunks from the observation history of an episode.
pub trait Planner {
    fn reset(&mut self, episode_id: u64);
    /// `history[t]` is the observation at step `t`; plans from the last one.
    fn plan(&mut self, history: &[Observation]) -> Result<Vec<Vec<f64>>>;
}

/// Which row of which plan produced an executed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedAction {
    pub plan: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task: String,
    pub seed: u64,
    /// `observations.len() == actions.len() + 1`.
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
    pub plans: usize,
    pub executed: Vec<ExecutedAction>,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Window of `obs_steps` frame indices ending at `t`, padded at episode start
/// by repeating frame 0.
pub fn window_indices(t: usize, obs_steps: usize) -> Vec<usize> {
    (0..obs_steps)
        .map(|i| (t + i + 1).saturating_sub(obs_steps))
        .collect()
}

/// Runs `planner` in `env` until success, `done`, or the env's step budget.
pub fn receding_horizon_execute<E: ControlEnv + ?Sized, P: Planner + ?Sized>(
    planner: &mut P,
    env: &mut E,
    action_steps: usize,
    episode_id: u64,
    task: &str,
    seed: u64,
) -> Result<EpisodeRecord> {
    if action_steps == 0 {
        return Err(Error::invalid("action_steps must be positive"));
    }
    planner.reset(episode_id);
    let mut rec = EpisodeRecord {
        task: task.to_string(),
        seed,
        observations: vec![env.observation()?],
        actions: Vec::new(),
        success: false,
        plans: 0,
        executed: Vec::new(),
    };
    let max_steps = env.max_steps();
    while rec.actions.len() < max_steps {
        let chunk = planner.plan(&rec.observations)?;
        if chunk.len() < action_steps {
            return Err(Error::invalid(format!(
                "planner returned {} actions, need {action_steps}",
                chunk.len()
            )));
        }
        let plan = rec.plans;
        rec.plans += 1;
        for (row, action) in chunk.into_iter().take(action_steps).enumerate() {
            if rec.actions.len() >= max_steps {
                break;
            }
            let step = rec.actions.len();
            let out = env.step(&action).map_err(|e| match e {
                Error::EnvStep { .. } => e,
                other => Error::EnvStep {
                    step,
                    reason: other.to_string(),
                },
            })?;
            rec.actions.push(action);
            rec.executed.push(ExecutedAction { plan, row });
            rec.observations.push(env.observation()?);
            if out.success {
                rec.success = true;
                return Ok(rec);
            }
            if out.done {
                return Ok(rec);
            }
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter {
        t: usize,
        max: usize,
        goal: Option<usize>,
    }

    impl ControlEnv for Counter {
        fn observation(&mut self) -> Result<Observation> {
            Ok(Observation {
                images: Tensor::zeros([1, 1, 1, 1]),
                proprio: vec![self.t as f64],
                state: vec![],
            })
        }
        fn step(&mut self, _: &[f64]) -> Result<StepOutcome> {
            if self.t >= self.max {
                return Err(Error::invalid("stepped past the end"));
            }
            self.t += 1;
            Ok(StepOutcome {
                success: Some(self.t) == self.goal,
                done: self.t >= self.max,
            })
        }
        fn max_steps(&self) -> usize {
            self.max
        }
    }

    /// Emits chunks whose rows encode `(plan, row)`.
    struct Tagger {
        horizon: usize,
        plans: usize,
    }

    impl Planner for Tagger {
        fn reset(&mut self, _: u64) {
            self.plans = 0;
        }
        fn plan(&mut self, _: &[Observation]) -> Result<Vec<Vec<f64>>> {
            let p = self.plans as f64;
            self.plans += 1;
            Ok((0..self.horizon).map(|r| vec![p, r as f64]).collect())
        }
    }

    #[test]
    fn plan_counts() {
        for (ta, tp, max) in [(16, 16, 100), (8, 16, 100), (8, 16, 64), (1, 4, 5)] {
            let mut env = Counter { t: 0, max, goal: None };
            let mut planner = Tagger { horizon: tp, plans: 0 };
            let rec = receding_horizon_execute(&mut planner, &mut env, ta, 0, "t", 0).unwrap();
            assert_eq!(rec.plans, max.div_ceil(ta));
            assert_eq!(rec.steps(), max);
            for (a, e) in rec.actions.iter().zip(&rec.executed) {
                assert_eq!(a, &vec![e.plan as f64, e.row as f64]);
                assert!(e.row < ta);
            }
        }
    }

    #[test]
    fn stops_on_success() {
        let mut env = Counter { t: 0, max: 50, goal: Some(11) };
        let mut planner = Tagger { horizon: 16, plans: 0 };
        let rec = receding_horizon_execute(&mut planner, &mut env, 8, 0, "t", 0).unwrap();
        assert!(rec.success);
        assert_eq!(rec.steps(), 11);
        assert_eq!(rec.plans, 2);
        assert_eq!(rec.observations.len(), 12);
    }

    #[test]
    fn env_error_carries_step() {
        struct Broken;
        impl ControlEnv for Broken {
            fn observation(&mut self) -> Result<Observation> {
                Ok(Observation {
                    images: Tensor::zeros([1, 1, 1, 1]),
                    proprio: vec![],
                    state: vec![],
                })
            }
            fn step(&mut self, _: &[f64]) -> Result<StepOutcome> {
                Err(Error::invalid("boom"))
            }
            fn max_steps(&self) -> usize {
                10
            }
        }
        let mut planner = Tagger { horizon: 4, plans: 0 };
        let err = receding_horizon_execute(&mut planner, &mut Broken, 2, 0, "t", 0).unwrap_err();
        assert!(matches!(err, Error::EnvStep { step: 0, .. }));
    }

    #[test]
    fn window_padding() {
        assert_eq!(window_indices(0, 2), vec![0, 0]);
        assert_eq!(window_indices(1, 2), vec![0, 1]);
        assert_eq!(window_indices(5, 3), vec![3, 4, 5]);
        assert_eq!(window_indices(1, 4), vec![0, 0, 0, 1]);
    }
}
