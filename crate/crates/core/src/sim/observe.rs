use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SimState;
use crate::motion::{rotate, to_root_frame, RootPose, Skeleton};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Named, contiguous slices of a flat observation vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub slices: Vec<ObsSlice>,
}

impl ObsLayout {
    pub fn from_sizes(sizes: &[(&str, usize)]) -> Self {
        let mut start = 0;
        let slices = sizes
            .iter()
            .map(|(name, len)| {
                let s = ObsSlice { name: (*name).into(), start, len: *len };
                start += len;
                s
            })
            .collect();
        Self { slices }
    }

    pub fn total(&self) -> usize {
        self.slices.iter().map(|s| s.len).sum()
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.slices.iter().find(|s| s.name == name).map(|s| s.start..s.start + s.len)
    }

    /// Layout produced by [`build_observation`] for a planar skeleton.
    pub fn planar(sk: &Skeleton) -> Self {
        let j = sk.links.len();
        Self::from_sizes(&[
            ("root_height", 1),
            ("root_orientation", 2),
            ("root_linear_velocity", 2),
            ("root_angular_velocity", 1),
            ("joint_positions", j),
            ("joint_velocities", j),
            ("end_effector_positions", 2 * sk.end_effectors.len()),
        ])
    }

    /// The full-body 3D humanoid layout the planar one is modelled on:
    /// 6-number orientation, 22 joints, four 3D end effectors.
    pub fn reference_3d() -> Self {
        Self::from_sizes(&[
            ("root_height", 1),
            ("root_orientation", 6),
            ("root_linear_velocity", 3),
            ("root_angular_velocity", 3),
            ("joint_positions", 22),
            ("joint_velocities", 22),
            ("end_effector_positions", 12),
        ])
    }
}

/// Policy observation: root height, `(cos θ, sin θ)`, root velocities in the
/// heading frame, joint state and root-relative effector positions. Gaussian
/// noise of the given std is added when `noise` is present.
pub fn build_observation<R: Rng + ?Sized>(state: &SimState, sk: &Skeleton, noise: Option<(&mut R, f64)>) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 + 2 * sk.links.len() + 2 * sk.end_effectors.len());
    out.push(state.root.y);
    out.push(state.root.theta.cos());
    out.push(state.root.theta.sin());
    let v = rotate([state.root_vel[0], state.root_vel[1]], -state.root.theta);
    out.extend_from_slice(&v);
    out.push(state.root_vel[2]);
    out.extend_from_slice(&state.q);
    out.extend_from_slice(&state.qd);
    push_effectors(&mut out, sk, &state.root, &state.q);
    if let Some((rng, std)) = noise {
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            for x in &mut out {
                *x += dist.sample(rng);
            }
        }
    }
    out
}

fn push_effectors(out: &mut Vec<f64>, sk: &Skeleton, root: &RootPose, q: &[f64]) {
    let fk = sk.fk_unchecked(root, q);
    for p in &fk.effectors {
        out.extend_from_slice(&to_root_frame(root, *p));
    }
}

/// Discriminator feature layout: like the observation but without lateral
/// and angular root velocity, so a transition pair also carries pace.
pub fn disc_layout(sk: &Skeleton) -> ObsLayout {
    let j = sk.links.len();
    ObsLayout::from_sizes(&[
        ("root_height", 1),
        ("root_orientation", 2),
        ("forward_velocity", 1),
        ("joint_positions", j),
        ("joint_velocities", j),
        ("end_effector_positions", 2 * sk.end_effectors.len()),
    ])
}

/// Discriminator features of one state; independent of the root's world x.
pub fn disc_features(sk: &Skeleton, root: &RootPose, root_vel: [f64; 3], q: &[f64], qd: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 + 2 * q.len() + 2 * sk.end_effectors.len());
    out.push(root.y);
    out.push(root.theta.cos());
    out.push(root.theta.sin());
    out.push(rotate([root_vel[0], root_vel[1]], -root.theta)[0]);
    out.extend_from_slice(q);
    out.extend_from_slice(qd);
    push_effectors(&mut out, sk, root, q);
    out
}
