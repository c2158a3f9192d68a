use rand::Rng;

use crate::world::{WorldState, EFFECTOR_RADIUS, GOAL_RADIUS, HOLE_RADIUS, OBJECT_RADIUS};
use crate::{task::TaskKind, CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub view: usize,
    pub angle_deg: f64,
    pub delta_deg: f64,
    pub height: usize,
    pub width: usize,
    pub extent: f64,
}

const OUTSIDE: [f32; 3] = [0.5, 0.5, 0.5];
const FLOOR: [f32; 3] = [0.15, 0.15, 0.15];
const HOLE: [f32; 3] = [0.0, 0.0, 0.0];
const GOAL: [f32; 3] = [0.1, 0.8, 0.2];
const OBJECT: [f32; 3] = [0.15, 0.3, 0.95];

/// Orthographic `[C, H, W]` image of the state, rotated by the nominal angle
/// plus `U[−δ, δ]`. Returns the pixels and the noise that was applied.
pub fn render<R: Rng + ?Sized>(state: &WorldState, cam: &CameraSpec, rng: &mut R) -> (Vec<f32>, f64) {
    let noise = if cam.delta_deg > 0.0 {
        rng.random_range(-cam.delta_deg..=cam.delta_deg)
    } else {
        0.0
    };
    let theta = (cam.angle_deg + noise).to_radians();
    let (s, c) = theta.sin_cos();
    let (h, w) = (cam.height, cam.width);
    let px = 2.0 * cam.extent / w as f64;
    let py = 2.0 * cam.extent / h as f64;
    let pixel = px.max(py);

    let effector = [1.0, 0.1, 0.1].map(|x: f32| x * (0.5 + 0.5 * state.gripper as f32));
    let mut discs: Vec<([f64; 2], f64, [f32; 3])> = Vec::new();
    if state.task == TaskKind::PickOutOfHole {
        discs.push((state.hole, HOLE_RADIUS, HOLE));
    }
    discs.push((state.goal, GOAL_RADIUS, GOAL));
    if state.task != TaskKind::Reach {
        discs.push((state.object, OBJECT_RADIUS, OBJECT));
    }
    discs.push((state.effector, EFFECTOR_RADIUS, effector));

    let mut img = vec![0f32; CHANNELS * h * w];
    for i in 0..h {
        for j in 0..w {
            let u = (j as f64 + 0.5) * px - cam.extent;
            let v = cam.extent - (i as f64 + 0.5) * py;
            // view → world is the inverse rotation
            let p = [c * u + s * v, -s * u + c * v];
            let inside = p[0].abs() <= 1.0 && p[1].abs() <= 1.0;
            let mut rgb = if inside { FLOOR } else { OUTSIDE };
            for &(centre, r, col) in &discs {
                let d = (p[0] - centre[0]).hypot(p[1] - centre[1]);
                let a = (0.5 - (d - r) / pixel).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    for k in 0..3 {
                        rgb[k] = rgb[k] * (1.0 - a) + col[k] * a;
                    }
                }
            }
            for k in 0..3 {
                img[(k * h + i) * w + j] = rgb[k];
            }
        }
    }
    (img, noise)
}
