//! Planar manipulation simulator with multi-view rasterized observations,
//! scripted experts and an on-disk demo format.

mod dataset;
mod expert;
mod render;
mod task;
mod world;

pub use dataset::{read_dataset, write_dataset, DatasetIndex, IndexEntry, INDEX_FILE};
pub use expert::{expert_action, ExpertPlanner};
pub use render::{render, CameraSpec};
pub use task::TaskKind;
pub use world::{WorldState, STATE_LEN, SUCCESS_RADIUS, HOLE_RADIUS, EFFECTOR_RADIUS, GOAL_RADIUS, GRASP_RADIUS, MAX_STEP, OBJECT_RADIUS};

use geodp_core::rollout::{receding_horizon_execute, ControlEnv, EpisodeRecord, Observation, StepOutcome};
use geodp_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Nominal orientation of each view, degrees.
    pub view_angles: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Per-render rotation noise bound, degrees.
    pub delta_deg: f64,
    /// Half-width of each orthographic view in world units.
    pub extent: f64,
    /// Overrides the task's default step budget.
    pub max_steps: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            view_angles: vec![0.0, 90.0],
            height: 32,
            width: 32,
            delta_deg: 0.0,
            extent: 1.05,
            max_steps: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_angles.is_empty() || self.height == 0 || self.width == 0 {
            return Err(Error::Config("env needs at least one view and a positive resolution".into()));
        }
        if !(self.delta_deg >= 0.0 && self.delta_deg < 180.0) || !(self.extent > 0.0) {
            return Err(Error::Config(format!(
                "env delta_deg {} / extent {} out of range",
                self.delta_deg, self.extent
            )));
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<CameraSpec> {
        self.view_angles
            .iter()
            .enumerate()
            .map(|(view, &angle_deg)| CameraSpec {
                view,
                angle_deg,
                delta_deg: self.delta_deg,
                height: self.height,
                width: self.width,
                extent: self.extent,
            })
            .collect()
    }
}

pub const CHANNELS: usize = 3;
/// Drive coordinates.
pub const JOINT_DIM: usize = 2;
pub const PROPRIO_DIM: usize = JOINT_DIM + 3;
/// `[Δx, Δy, Δz, g]`.
pub const ACTION_DIM: usize = 4;

/// One episode of one task: world state, cameras and the render noise stream.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    state: WorldState,
    cameras: Vec<CameraSpec>,
    render_rng: ChaCha8Rng,
    seed: u64,
    last_angles: Vec<f64>,
}

impl ToyEnv {
    pub fn reset(task: TaskKind, config: &EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut spawn = ChaCha8Rng::seed_from_u64(seed);
        let mut state = WorldState::spawn(task, &mut spawn);
        if let Some(m) = config.max_steps {
            state.max_steps = m;
        }
        let mut render_rng = ChaCha8Rng::seed_from_u64(seed);
        render_rng.set_stream(1);
        Ok(Self {
            state,
            cameras: config.cameras(),
            render_rng,
            seed,
            last_angles: Vec::new(),
        })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Rotation actually applied to each view by the latest render, degrees.
    pub fn last_angles(&self) -> &[f64] {
        &self.last_angles
    }

    pub fn render_views(&mut self) -> Tensor<f32> {
        let c = &self.cameras[0];
        let (h, w) = (c.height, c.width);
        let mut data = Vec::with_capacity(self.cameras.len() * CHANNELS * h * w);
        self.last_angles.clear();
        for cam in &self.cameras {
            let (img, angle) = render(&self.state, cam, &mut self.render_rng);
            data.extend(img);
            self.last_angles.push(angle);
        }
        Tensor::new([self.cameras.len(), CHANNELS, h, w], data).expect("render produces full frames")
    }
}

impl ControlEnv for ToyEnv {
    fn observation(&mut self) -> Result<Observation> {
        Ok(Observation {
            images: self.render_views(),
            proprio: self.state.proprio().to_vec(),
            state: self.state.to_vec(),
        })
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        self.state.step(action)
    }

    fn max_steps(&self) -> usize {
        self.state.max_steps
    }
}

/// Scripted-expert episodes with seeds `seed, seed + 1, …`; failures are
/// skipped until `n` successes or `10·n` attempts.
pub fn generate_demos(task: TaskKind, config: &EnvConfig, n: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::with_capacity(n);
    for attempt in 0..10 * n as u64 {
        if out.len() == n {
            break;
        }
        let ep_seed = seed + attempt;
        let mut env = ToyEnv::reset(task, config, ep_seed)?;
        let rec = receding_horizon_execute(&mut ExpertPlanner, &mut env, 1, ep_seed, task.name(), ep_seed)?;
        if rec.success {
            out.push(rec);
        }
    }
    if out.len() < n {
        return Err(Error::Dataset(format!(
            "expert reached only {} of {n} successes on {} within {} attempts",
            out.len(),
            task.name(),
            10 * n
        )));
    }
    Ok(out)
}
