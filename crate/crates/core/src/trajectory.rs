//! Scripted camera trajectories: keyframed position and look-at target,
//! linear position interpolation with spherical orientation blending.

use serde::{Deserialize, Serialize};

use crate::gbuffer::CameraPose;
use crate::math::{basis_to_quat, look_basis, quat_to_basis, Mat3, Vec3};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Keyframe {
    pub tick: u32,
    pub position: [f32; 3],
    pub look_at: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    keyframes: Vec<Keyframe>,
}

impl Trajectory {
    /// Keyframe ticks must be strictly increasing and nonempty.
    pub fn new(keyframes: Vec<Keyframe>) -> Trajectory {
        assert!(!keyframes.is_empty(), "trajectory needs at least one keyframe");
        for pair in keyframes.windows(2) {
            assert!(pair[1].tick > pair[0].tick, "keyframe ticks must increase");
        }
        Trajectory { keyframes }
    }

    fn keyframe_pose(k: &Keyframe) -> (Vec3, Mat3) {
        let pos: Vec3 = k.position.into();
        let target: Vec3 = k.look_at.into();
        (pos, look_basis(target - pos, Vec3::Y))
    }

    /// Pose at an integer tick; clamps outside the keyframed range.
    pub fn pose_at(&self, tick: u32) -> CameraPose {
        let first = self.keyframes.first().unwrap();
        let last = self.keyframes.last().unwrap();
        if tick <= first.tick {
            let (position, basis) = Self::keyframe_pose(first);
            return CameraPose { position, basis };
        }
        if tick >= last.tick {
            let (position, basis) = Self::keyframe_pose(last);
            return CameraPose { position, basis };
        }
        let idx = self.keyframes.partition_point(|k| k.tick <= tick) - 1;
        let a = &self.keyframes[idx];
        let b = &self.keyframes[idx + 1];
        let t = (tick - a.tick) as f32 / (b.tick - a.tick) as f32;
        let (pa, ba) = Self::keyframe_pose(a);
        let (pb, bb) = Self::keyframe_pose(b);
        let position = pa.lerp(pb, t);
        let qa = basis_to_quat(&ba);
        let qb = basis_to_quat(&bb);
        CameraPose { position, basis: quat_to_basis(qa.slerp(qb, t)) }
    }
}

/// The standard benchmark trajectory: a quarter orbit around the room
/// center combined with a slow dolly inward and downward.
pub fn default_orbit(ticks: u32) -> Vec<Keyframe> {
    let n = 5u32;
    let last = ticks.saturating_sub(1).max(n - 1);
    (0..n)
        .map(|i| {
            let s = i as f32 / (n - 1) as f32;
            let angle = (45.0 + 90.0 * s).to_radians();
            let radius = 3.4 - 0.8 * s;
            let height = 1.9 - 0.4 * s;
            Keyframe {
                tick: i * last / (n - 1),
                position: [radius * angle.cos(), height, radius * angle.sin()],
                look_at: [0.0, 0.8, 0.0],
            }
        })
        .collect()
}
