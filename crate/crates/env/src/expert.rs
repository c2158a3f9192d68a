use geodp_core::rollout::{Observation, Planner};
use geodp_core::{Error, Result};

use crate::task::TaskKind;
use crate::world::{dist, WorldState, EFFECTOR_RADIUS, MAX_STEP, OBJECT_RADIUS};

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = d[0].hypot(d[1]);
    if n <= MAX_STEP {
        d
    } else {
        [d[0] * MAX_STEP / n, d[1] * MAX_STEP / n]
    }
}

fn unit(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let n = d[0].hypot(d[1]).max(1e-12);
    [d[0] / n, d[1] / n]
}

/// Proportional controller over approach → engage → deliver subgoals.
pub fn expert_action(state: &WorldState) -> [f64; 4] {
    let e = state.effector;
    let (m, g) = match state.task {
        TaskKind::Reach => (toward(e, state.goal), 0.0),
        TaskKind::SweepInto => {
            let dir = unit(state.object, state.goal);
            let contact = EFFECTOR_RADIUS + OBJECT_RADIUS;
            let rel = [e[0] - state.object[0], e[1] - state.object[1]];
            let ahead = rel[0] * dir[0] + rel[1] * dir[1];
            let side = rel[0] * -dir[1] + rel[1] * dir[0];
            if dist(e, state.object) < contact + 0.01 && ahead < 0.0 {
                // in contact from behind: the object rides along, so drive the
                // effector to where it sits once the object is on the goal
                (toward(e, [state.goal[0] + rel[0], state.goal[1] + rel[1]]), 0.0)
            } else if side.abs() < 0.01 && ahead < -contact {
                // lined up: move straight in along the push line
                let behind = [state.object[0] - dir[0] * (contact - 0.01), state.object[1] - dir[1] * (contact - 0.01)];
                (toward(e, behind), 0.0)
            } else if ahead > -contact {
                // swing wide of the object while lining up
                let s = if side >= 0.0 { 1.0 } else { -1.0 };
                let target = [
                    state.object[0] - dir[0] * 2.0 * contact - dir[1] * s * 2.0 * contact,
                    state.object[1] - dir[1] * 2.0 * contact + dir[0] * s * 2.0 * contact,
                ];
                (toward(e, target), 0.0)
            } else {
                let stage = [state.object[0] - dir[0] * (contact + 0.06), state.object[1] - dir[1] * (contact + 0.06)];
                (toward(e, stage), 0.0)
            }
        }
        TaskKind::PickOutOfHole => {
            if state.grasped {
                if dist(e, state.goal) < 0.03 {
                    ([0.0, 0.0], 0.0)
                } else {
                    (toward(e, state.goal), 1.0)
                }
            } else if dist(e, state.object) < 0.03 {
                ([0.0, 0.0], 1.0)
            } else {
                (toward(e, state.object), 0.0)
            }
        }
    };
    [m[0], m[1], 0.0, g]
}

/// Scripted expert as a one-step planner reading the privileged state.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertPlanner;

impl Planner for ExpertPlanner {
    fn reset(&mut self, _: u64) {}

    fn plan(&mut self, history: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let obs = history.last().ok_or_else(|| Error::InvalidArgument("empty history".into()))?;
        let state = WorldState::from_vec(&obs.state)?;
        Ok(vec![expert_action(&state).to_vec()])
    }
}
