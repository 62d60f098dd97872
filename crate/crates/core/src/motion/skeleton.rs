use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{wrap_angle, MotionError, RootPose};

/// The floating base body (torso). Its axis points along the root frame's +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseLink {
    pub name: String,
    pub length: f64,
    pub mass: f64,
    /// Rotational inertia about the centre of mass [kg·m²].
    pub inertia: f64,
    /// Centre of mass as a fraction of `length` along the axis.
    pub com: f64,
}

/// A rigid link driven by one revolute joint at its proximal end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    pub length: f64,
    /// Parent link index; `None` attaches the link to the base.
    pub parent: Option<usize>,
    /// For base-attached links, the mount point as a fraction of the base
    /// axis. Link-attached links always start at the parent's distal end.
    #[serde(default)]
    pub attach: f64,
    /// Joint-zero direction relative to the parent's direction [rad].
    pub mount: f64,
    /// Joint limits `[lo, hi]` [rad].
    pub limits: [f64; 2],
    pub mass: f64,
    pub inertia: f64,
    #[serde(default = "half")]
    pub com: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torque_limit: Option<f64>,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndEffector {
    pub name: String,
    /// The effector sits at this link's distal end.
    pub link: usize,
}

/// A point rigidly attached to a link: `along` is a fraction of the link
/// length, `normal` an offset [m] perpendicular to it (counter-clockwise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPoint {
    pub link: usize,
    pub along: f64,
    #[serde(default)]
    pub normal: f64,
}

/// Virtual rod between two link points; its rest length is measured in the
/// rest pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rod {
    pub a: LinkPoint,
    pub b: LinkPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    /// Name of the foot this point belongs to; points sharing a foot share a
    /// contact flag.
    pub foot: String,
    pub point: LinkPoint,
}

/// Planar kinematic tree rooted at a floating (or pinned) base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub base: BaseLink,
    pub links: Vec<Link>,
    pub end_effectors: Vec<EndEffector>,
    #[serde(default)]
    pub rods: Vec<Rod>,
    #[serde(default)]
    pub contacts: Vec<ContactPoint>,
    /// Pinned base (pendulum rigs); floating otherwise.
    #[serde(default)]
    pub fixed_base: bool,
}

/// World-space result of forward kinematics.
#[derive(Clone, Debug, PartialEq)]
pub struct FkResult {
    pub link_start: Vec<[f64; 2]>,
    pub link_end: Vec<[f64; 2]>,
    pub link_angle: Vec<f64>,
    pub base_top: [f64; 2],
    pub effectors: Vec<[f64; 2]>,
}

impl FkResult {
    pub fn point(&self, p: &LinkPoint) -> [f64; 2] {
        let s = self.link_start[p.link];
        let a = self.link_angle[p.link];
        let (c, sn) = (a.cos(), a.sin());
        [
            s[0] + p.along * (self.link_end[p.link][0] - s[0]) - p.normal * sn,
            s[1] + p.along * (self.link_end[p.link][1] - s[1]) + p.normal * c,
        ]
    }
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        let bad = |m: String| Err(MotionError::InvalidSkeleton(m));
        if !(self.base.length > 0.0) || self.base.mass < 0.0 || self.base.inertia < 0.0 {
            return bad("base length must be > 0 and mass/inertia ≥ 0".into());
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.length > 0.0) {
                return bad(format!("link {} has non-positive length", l.name));
            }
            if !(l.limits[0] < l.limits[1]) {
                return bad(format!("link {} has limits lo ≥ hi", l.name));
            }
            if l.mass < 0.0 || l.inertia < 0.0 {
                return bad(format!("link {} has negative mass or inertia", l.name));
            }
            if let Some(p) = l.parent {
                if p >= i {
                    return bad(format!("link {} must come after its parent", l.name));
                }
            }
        }
        if self.end_effectors.is_empty() {
            return bad("end-effector set is empty".into());
        }
        let n = self.links.len();
        let pt_ok = |p: &LinkPoint| p.link < n;
        if self.end_effectors.iter().any(|e| e.link >= n)
            || self.rods.iter().any(|r| !pt_ok(&r.a) || !pt_ok(&r.b))
            || self.contacts.iter().any(|c| !pt_ok(&c.point))
        {
            return bad("reference to a missing link".into());
        }
        Ok(())
    }

    pub fn effector_index(&self, name: &str) -> Option<usize> {
        self.end_effectors.iter().position(|e| e.name == name)
    }

    pub fn rest_q(&self) -> Vec<f64> {
        self.links.iter().map(|l| 0.0f64.clamp(l.limits[0], l.limits[1])).collect()
    }

    pub fn clamp_q(&self, q: &mut [f64]) {
        for (v, l) in q.iter_mut().zip(&self.links) {
            *v = v.clamp(l.limits[0], l.limits[1]);
        }
    }

    /// Is `j` equal to `link` or one of its ancestors?
    pub fn is_ancestor(&self, j: usize, link: usize) -> bool {
        let mut cur = Some(link);
        while let Some(c) = cur {
            if c == j {
                return true;
            }
            cur = self.links[c].parent;
        }
        false
    }

    /// Chain of joint indices from the base down to `link`, base first.
    pub fn chain(&self, link: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = Some(link);
        while let Some(c) = cur {
            out.push(c);
            cur = self.links[c].parent;
        }
        out.reverse();
        out
    }

    pub fn fk(&self, root: &RootPose, q: &[f64]) -> Result<FkResult, MotionError> {
        if q.len() != self.links.len() {
            return Err(MotionError::Dimension { expected: self.links.len(), got: q.len() });
        }
        Ok(self.fk_unchecked(root, q))
    }

    pub(crate) fn fk_unchecked(&self, root: &RootPose, q: &[f64]) -> FkResult {
        let n = self.links.len();
        let mut link_start = vec![[0.0; 2]; n];
        let mut link_end = vec![[0.0; 2]; n];
        let mut link_angle = vec![0.0; n];
        let axis = root.theta + FRAC_PI_2;
        let (ac, as_) = (axis.cos(), axis.sin());
        for i in 0..n {
            let l = &self.links[i];
            let (start, parent_angle) = match l.parent {
                None => {
                    let d = l.attach * self.base.length;
                    ([root.x + d * ac, root.y + d * as_], root.theta)
                }
                Some(p) => (link_end[p], link_angle[p]),
            };
            let a = parent_angle + l.mount + q[i];
            link_start[i] = start;
            link_angle[i] = a;
            link_end[i] = [start[0] + l.length * a.cos(), start[1] + l.length * a.sin()];
        }
        let effectors = self.end_effectors.iter().map(|e| link_end[e.link]).collect();
        let base_top = [root.x + self.base.length * ac, root.y + self.base.length * as_];
        FkResult { link_start, link_end, link_angle, base_top, effectors }
    }

    /// Rest lengths of the configured rods.
    pub fn rod_rest_lengths(&self) -> Vec<f64> {
        let fk = self.fk_unchecked(&RootPose::default(), &self.rest_q());
        self.rods
            .iter()
            .map(|r| {
                let (a, b) = (fk.point(&r.a), fk.point(&r.b));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .collect()
    }

    /// Root height that puts the lowest contact (or effector, when no
    /// contacts are configured) of the rest pose on the ground.
    pub fn rest_root_height(&self) -> f64 {
        let fk = self.fk_unchecked(&RootPose::default(), &self.rest_q());
        let lowest = if self.contacts.is_empty() {
            fk.effectors.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)
        } else {
            self.contacts.iter().map(|c| fk.point(&c.point)[1]).fold(f64::INFINITY, f64::min)
        };
        -lowest
    }

    /// Proximal attachment point of the chain ending at `link`, in the root
    /// frame with the root at the origin.
    pub fn limb_root(&self, link: usize) -> [f64; 2] {
        let first = self.chain(link)[0];
        let d = self.links[first].attach * self.base.length;
        [0.0, d]
    }

    /// Distance from limb root to effector in the rest pose.
    pub fn rest_reach(&self, effector: usize) -> f64 {
        let e = &self.end_effectors[effector];
        let fk = self.fk_unchecked(&RootPose::default(), &self.rest_q());
        let r = self.limb_root(e.link);
        let p = fk.link_end[e.link];
        ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt()
    }

    pub fn total_mass(&self) -> f64 {
        self.base.mass + self.links.iter().map(|l| l.mass).sum::<f64>()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("skeleton serializes");
        hex_digest(&bytes)
    }

    /// Five-link human source morphology: torso, two 2-link arms, two 2-link legs.
    pub fn human9() -> Self {
        let arm = |side: &str| -> [Link; 2] {
            [
                link(&format!("{side}_upper_arm"), 0.30, None, 1.0, -FRAC_PI_2, [-1.2, 3.3], 2.0),
                link(&format!("{side}_forearm"), 0.28, Some(usize::MAX), 0.0, 0.0, [0.0, 2.6], 1.4),
            ]
        };
        let leg = |side: &str| -> [Link; 2] {
            [
                link(&format!("{side}_thigh"), 0.45, None, 0.0, -FRAC_PI_2, [-1.2, 2.0], 8.0),
                link(&format!("{side}_shin"), 0.45, Some(usize::MAX), 0.0, 0.0, [-2.4, 0.0], 3.5),
            ]
        };
        let mut links = Vec::new();
        for pair in [arm("left"), arm("right"), leg("left"), leg("right")] {
            let base_idx = links.len();
            for (k, mut l) in pair.into_iter().enumerate() {
                if k > 0 {
                    l.parent = Some(base_idx + k - 1);
                }
                links.push(l);
            }
        }
        let mut s = Skeleton {
            name: "HUMAN-9".into(),
            base: BaseLink { name: "torso".into(), length: 0.5, mass: 35.0, inertia: 35.0 * 0.25 / 12.0, com: 0.5 },
            links,
            end_effectors: effectors(&[("left_hand", 1), ("right_hand", 3), ("left_foot", 5), ("right_foot", 7)]),
            rods: Vec::new(),
            contacts: Vec::new(),
            fixed_base: false,
        };
        s.contacts = ["left", "right"]
            .iter()
            .zip([5, 7])
            .map(|(side, l)| ContactPoint {
                foot: format!("{side}_foot"),
                point: LinkPoint { link: l, along: 1.0, normal: 0.0 },
            })
            .collect();
        s
    }

    /// Robot target morphology with digitigrade legs (hip, knee, ankle, toe)
    /// and two virtual rods per leg standing in for the closed linkage.
    pub fn robot_d() -> Self {
        let thigh_mount = -FRAC_PI_2 + 0.35;
        let shin_mount = -0.7;
        // Toe link horizontal (pointing forward) in the rest pose.
        let toe_mount = -(thigh_mount + shin_mount);
        let mut links = Vec::new();
        for side in ["left", "right"] {
            let i = links.len();
            let mut ua = link(&format!("{side}_upper_arm"), 0.28, None, 1.0, -FRAC_PI_2, [-1.2, 3.3], 0.6);
            ua.kp = Some(40.0);
            ua.kd = Some(2.0);
            let mut fa = link(&format!("{side}_forearm"), 0.25, Some(i), 0.0, 0.0, [0.0, 2.6], 0.4);
            fa.kp = Some(40.0);
            fa.kd = Some(2.0);
            links.push(ua);
            links.push(fa);
        }
        let mut rods = Vec::new();
        let mut contacts = Vec::new();
        for side in ["left", "right"] {
            let i = links.len();
            let mut thigh = link(&format!("{side}_thigh"), 0.40, None, 0.0, thigh_mount, [-1.2, 1.4], 1.5);
            let mut shin = link(&format!("{side}_shin"), 0.45, Some(i), 0.0, shin_mount, [-1.2, 1.2], 1.0);
            let mut toe = link(&format!("{side}_toe"), 0.15, Some(i + 1), 0.0, toe_mount, [-1.0, 1.0], 0.3);
            for l in [&mut thigh, &mut shin, &mut toe] {
                l.kp = Some(600.0);
                l.kd = Some(15.0);
            }
            links.extend([thigh, shin, toe]);
            rods.push(Rod {
                a: LinkPoint { link: i, along: 0.75, normal: 0.04 },
                b: LinkPoint { link: i + 2, along: 0.25, normal: 0.03 },
            });
            rods.push(Rod {
                a: LinkPoint { link: i + 1, along: 0.3, normal: -0.04 },
                b: LinkPoint { link: i + 2, along: 0.6, normal: 0.0 },
            });
            // Heel pad behind the ankle and toe tip, so the rest-pose mass centre sits
            // well inside the support.
            for along in [-0.6, 1.0] {
                contacts.push(ContactPoint {
                    foot: format!("{side}_foot"),
                    point: LinkPoint { link: i + 2, along, normal: 0.0 },
                });
            }
        }
        Skeleton {
            name: "ROBOT-D".into(),
            base: BaseLink { name: "torso".into(), length: 0.5, mass: 8.0, inertia: 8.0 * 0.25 / 12.0, com: 0.5 },
            links,
            end_effectors: effectors(&[("left_hand", 1), ("right_hand", 3), ("left_foot", 6), ("right_foot", 9)]),
            rods,
            contacts,
            fixed_base: false,
        }
    }

    /// Open chain pinned at the origin with unit-free masses at link tips;
    /// used for pendulum rigs and kinematics tests.
    pub fn planar_chain(lengths: &[f64], masses: &[f64]) -> Self {
        let links = lengths
            .iter()
            .zip(masses)
            .enumerate()
            .map(|(i, (&len, &m))| Link {
                name: format!("link{i}"),
                length: len,
                parent: if i == 0 { None } else { Some(i - 1) },
                attach: 0.0,
                mount: 0.0,
                limits: [-100.0 * PI, 100.0 * PI],
                mass: m,
                inertia: 0.0,
                com: 1.0,
                kp: None,
                kd: None,
                torque_limit: None,
            })
            .collect();
        Skeleton {
            name: "CHAIN".into(),
            base: BaseLink { name: "base".into(), length: 0.1, mass: 1.0, inertia: 0.01, com: 0.5 },
            links,
            end_effectors: vec![EndEffector { name: "tip".into(), link: lengths.len() - 1 }],
            rods: Vec::new(),
            contacts: Vec::new(),
            fixed_base: true,
        }
    }
}

fn link(name: &str, length: f64, parent: Option<usize>, attach: f64, mount: f64, limits: [f64; 2], mass: f64) -> Link {
    Link {
        name: name.into(),
        length,
        parent,
        attach,
        mount,
        limits,
        mass,
        inertia: mass * length * length / 12.0,
        com: 0.5,
        kp: None,
        kd: None,
        torque_limit: None,
    }
}

fn effectors(list: &[(&str, usize)]) -> Vec<EndEffector> {
    list.iter().map(|(n, l)| EndEffector { name: (*n).into(), link: *l }).collect()
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Planar rotation of `v` by `angle`.
pub fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// World point expressed in the root frame.
pub fn to_root_frame(root: &RootPose, p: [f64; 2]) -> [f64; 2] {
    rotate([p[0] - root.x, p[1] - root.y], -wrap_angle(root.theta))
}
