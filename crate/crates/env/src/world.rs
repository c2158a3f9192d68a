use geodp_core::rollout::StepOutcome;
use geodp_core::{Error, Result};
use rand::Rng;

use crate::task::TaskKind;
use crate::{ACTION_DIM, PROPRIO_DIM};

pub const MAX_STEP: f64 = 0.05;
pub const EFFECTOR_RADIUS: f64 = 0.06;
pub const OBJECT_RADIUS: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.12;
pub const GRASP_RADIUS: f64 = 0.06;
pub const HOLE_RADIUS: f64 = 0.1;
/// Success distance between the tracked point and the goal centre.
pub const SUCCESS_RADIUS: f64 = 0.1;
/// Friction cone half-angle for pushing.
pub const PUSH_CONE_DEG: f64 = 45.0;

const SWEEP_GOAL: [f64; 2] = [0.6, 0.0];

/// Length of [`WorldState::to_vec`].
pub const STATE_LEN: usize = 11;

type Range2 = ([f64; 2], [f64; 2]);

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub task: TaskKind,
    pub effector: [f64; 2],
    /// 0 open, 1 closed.
    pub gripper: f64,
    pub object: [f64; 2],
    pub goal: [f64; 2],
    /// Where the object starts in the hole task; unused otherwise.
    pub hole: [f64; 2],
    pub grasped: bool,
    pub step: usize,
    pub max_steps: usize,
    pub done: bool,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): Range2) -> [f64; 2] {
    [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])]
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_ws(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)]
}

impl TaskKind {
    /// Spawn boxes `(lo, hi)` for effector, object and goal. The effector
    /// always starts at the same point, so the scene has to be read from the
    /// images rather than inferred from where the arm is.
    pub fn spawn_ranges(self) -> [Range2; 3] {
        match self {
            TaskKind::Reach => [
                ([-0.5, 0.0], [-0.5, 0.0]),
                ([0.0, 0.0], [0.0, 0.0]),
                ([0.2, -0.25], [0.6, 0.25]),
            ],
            TaskKind::SweepInto => [
                ([-0.6, 0.0], [-0.6, 0.0]),
                ([-0.15, -0.25], [0.05, 0.25]),
                (SWEEP_GOAL, SWEEP_GOAL),
            ],
            TaskKind::PickOutOfHole => [
                ([-0.6, 0.0], [-0.6, 0.0]),
                ([-0.3, -0.3], [0.0, 0.3]),
                ([0.4, -0.3], [0.6, 0.3]),
            ],
        }
    }
}

impl WorldState {
    pub fn spawn<R: Rng + ?Sized>(task: TaskKind, rng: &mut R) -> Self {
        let [e, o, g] = task.spawn_ranges();
        let effector = uniform(rng, e);
        let object = uniform(rng, o);
        let goal = uniform(rng, g);
        Self {
            task,
            effector,
            gripper: 0.0,
            object,
            goal,
            hole: object,
            grasped: false,
            step: 0,
            max_steps: task.default_max_steps(),
            done: false,
        }
    }

    /// `[q, x]` with drive coordinates `q` and a planar effector (z = 0).
    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        let [x, y] = self.effector;
        [x, y, x, y, 0.0]
    }

    /// Flat encoding used by scripted controllers.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.effector[0],
            self.effector[1],
            self.gripper,
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
            self.hole[0],
            self.hole[1],
            self.grasped as u8 as f64,
            TaskKind::ALL.iter().position(|&t| t == self.task).unwrap() as f64,
        ]
    }

    /// Inverse of [`WorldState::to_vec`]; step bookkeeping is reset.
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        let task = (v.len() == STATE_LEN)
            .then(|| TaskKind::ALL.get(v[10] as usize).copied())
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("malformed world state vector {v:?}")))?;
        Ok(Self {
            task,
            effector: [v[0], v[1]],
            gripper: v[2],
            object: [v[3], v[4]],
            goal: [v[5], v[6]],
            hole: [v[7], v[8]],
            grasped: v[9] > 0.5,
            step: 0,
            max_steps: task.default_max_steps(),
            done: false,
        })
    }

    pub fn success(&self) -> bool {
        match self.task {
            TaskKind::Reach => dist(self.effector, self.goal) < SUCCESS_RADIUS,
            TaskKind::SweepInto => dist(self.object, self.goal) < SUCCESS_RADIUS,
            TaskKind::PickOutOfHole => !self.grasped && dist(self.object, self.goal) < SUCCESS_RADIUS,
        }
    }

    /// Applies `[Δx, Δy, Δz, g]`; Δz is accepted and ignored.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EnvStep {
                step: self.step,
                reason: "step after episode end".into(),
            });
        }
        if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::EnvStep {
                step: self.step,
                reason: format!("action must be {ACTION_DIM} finite values, got {action:?}"),
            });
        }
        let (mut dx, mut dy) = (action[0], action[1]);
        let len = dx.hypot(dy);
        if len > MAX_STEP {
            dx *= MAX_STEP / len;
            dy *= MAX_STEP / len;
        }
        let prev = self.effector;
        self.effector = clamp_ws([prev[0] + dx, prev[1] + dy]);
        self.gripper = action[3].clamp(0.0, 1.0);
        match self.task {
            TaskKind::Reach => {}
            TaskKind::SweepInto => self.push_object([self.effector[0] - prev[0], self.effector[1] - prev[1]]),
            TaskKind::PickOutOfHole => self.grasp_dynamics(),
        }
        self.step += 1;
        let success = self.success();
        self.done = success || self.step >= self.max_steps;
        Ok(StepOutcome {
            success,
            done: self.done,
        })
    }

    /// Quasi-static push with friction: when the contact normal lies within
    /// the friction cone around the motion, the object rides along with the
    /// effector; otherwise (or when blocked by the workspace edge) it is
    /// pushed out of contact along the centre line and slides off.
    fn push_object(&mut self, motion: [f64; 2]) {
        let reach = EFFECTOR_RADIUS + OBJECT_RADIUS;
        let v = [self.object[0] - self.effector[0], self.object[1] - self.effector[1]];
        let d = v[0].hypot(v[1]);
        if d >= reach {
            return;
        }
        let m = motion[0].hypot(motion[1]);
        if d > 1e-12 && m > 1e-12 && (v[0] * motion[0] + v[1] * motion[1]) / (d * m) >= PUSH_CONE_DEG.to_radians().cos() {
            self.object = clamp_ws([self.object[0] + motion[0], self.object[1] + motion[1]]);
            if dist(self.object, self.effector) >= reach - 1e-12 {
                return;
            }
        }
        let v = [self.object[0] - self.effector[0], self.object[1] - self.effector[1]];
        let d = v[0].hypot(v[1]);
        let dir = if d > 1e-12 {
            [v[0] / d, v[1] / d]
        } else {
            [motion[0] / m.max(1e-12), motion[1] / m.max(1e-12)]
        };
        self.object = clamp_ws([self.effector[0] + dir[0] * reach, self.effector[1] + dir[1] * reach]);
    }

    fn grasp_dynamics(&mut self) {
        let closed = self.gripper >= 0.5;
        if self.grasped && !closed {
            self.grasped = false;
        } else if !self.grasped && closed && dist(self.effector, self.object) < GRASP_RADIUS {
            self.grasped = true;
        }
        if self.grasped {
            self.object = self.effector;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sweep(effector: [f64; 2], object: [f64; 2]) -> WorldState {
        let mut s = WorldState::spawn(TaskKind::SweepInto, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        s.effector = effector;
        s.object = object;
        s
    }

    #[test]
    fn push_inside_cone_carries_object() {
        let reach = EFFECTOR_RADIUS + OBJECT_RADIUS;
        // contact normal 20 degrees off the motion
        let a = 20f64.to_radians();
        let mut s = sweep([0.0, 0.0], [reach * a.cos() + 0.01, reach * a.sin()]);
        let before = [s.object[0] - s.effector[0], s.object[1] - s.effector[1]];
        s.step(&[0.05, 0.0, 0.0, 0.0]).unwrap();
        let after = [s.object[0] - s.effector[0], s.object[1] - s.effector[1]];
        assert!((before[0] - after[0]).abs() < 1e-12 && (before[1] - after[1]).abs() < 1e-12);
    }

    #[test]
    fn grazing_push_slides_off_the_centre_line() {
        let reach = EFFECTOR_RADIUS + OBJECT_RADIUS;
        let a = 60f64.to_radians();
        let mut s = sweep([0.0, 0.0], [reach * a.cos() + 0.01, reach * a.sin()]);
        s.step(&[0.05, 0.0, 0.0, 0.0]).unwrap();
        let d = dist(s.object, s.effector);
        assert!((d - reach).abs() < 1e-12);
        // pushed outward, not carried straight along
        assert!(s.object[1] > reach * a.sin());
    }
}
