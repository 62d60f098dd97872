//! Procedural motion programs.
//!
//! Every verb is a sinusoidal phase machine over the HUMAN-9 joint layout
//! (`left arm, right arm, left leg, right leg`, two joints each). Locomotion
//! verbs (walk, hop, side_step) take `speed` in m/s and derive the cycle rate
//! from a fixed stride, so changing speed only rescales time. Gesture verbs
//! (wave, kick, raise_hand, celebrate) take `speed` in cycles per second.
//!
//! | verb       | stride / rate              | shape                                        |
//! |------------|----------------------------|----------------------------------------------|
//! | walk       | 1.0 m per cycle            | hips ±0.45·amp, swing-knee flex 0.9·amp      |
//! | hop        | 0.5 m per cycle            | crouch 0.8·amp, flight apex 0.12·amp m        |
//! | side_step  | 0.3 m per cycle            | alternating knee lifts, root drifts by side  |
//! | wave       | `speed` Hz                 | arm up at 2.6 rad, elbow ±0.5·amp            |
//! | raise_hand | raise over `1/speed` s     | shoulder ramps to 2.8 rad then holds         |
//! | kick       | `speed` Hz                 | hip bump 1.2·amp, knee snap, stance flex     |
//! | celebrate  | `speed` Hz                 | hop in place with both arms overhead         |
//! | stand      | —                          | rest pose                                    |

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, MotionClip, MotionError, RootPose, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Walk,
    Hop,
    Wave,
    Kick,
    RaiseHand,
    SideStep,
    Celebrate,
    Stand,
}

impl Verb {
    pub const ALL: [Verb; 8] =
        [Verb::Walk, Verb::Hop, Verb::Wave, Verb::Kick, Verb::RaiseHand, Verb::SideStep, Verb::Celebrate, Verb::Stand];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Walk => "walk",
            Verb::Hop => "hop",
            Verb::Wave => "wave",
            Verb::Kick => "kick",
            Verb::RaiseHand => "raise_hand",
            Verb::SideStep => "side_step",
            Verb::Celebrate => "celebrate",
            Verb::Stand => "stand",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, MotionError> {
        Verb::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MotionError::UnknownVerb { verb: s.to_string(), vocabulary: vocabulary() })
    }

    pub fn is_cyclic(self) -> bool {
        matches!(self, Verb::Walk | Verb::Hop | Verb::SideStep)
    }

    /// Distance covered per cycle for locomotion verbs.
    fn stride(self) -> Option<f64> {
        match self {
            Verb::Walk => Some(1.0),
            Verb::Hop => Some(0.5),
            Verb::SideStep => Some(0.3),
            _ => None,
        }
    }

    /// Speeds for the slow / normal / fast levels.
    pub fn speed_levels(self) -> [f64; 3] {
        match self {
            Verb::Walk => [0.5, 1.0, 1.5],
            Verb::Hop => [0.4, 0.75, 1.1],
            Verb::SideStep => [0.15, 0.3, 0.45],
            Verb::Wave => [0.75, 1.5, 2.25],
            Verb::Kick => [0.4, 0.8, 1.2],
            Verb::Celebrate => [0.75, 1.5, 2.0],
            Verb::RaiseHand => [0.5, 1.0, 1.5],
            Verb::Stand => [0.0, 0.0, 0.0],
        }
    }
}

pub fn vocabulary() -> Vec<String> {
    Verb::ALL.iter().map(|v| v.name().to_string()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    #[default]
    Right,
}

impl Side {
    pub fn flip(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    #[default]
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub verb: Verb,
    pub speed: f64,
    pub amplitude: f64,
    pub duration: f64,
    #[serde(default)]
    pub side: Side,
    #[serde(default)]
    pub heading: Heading,
    /// Phase offset in cycles; lets a corpus decorrelate clips.
    #[serde(default)]
    pub phase: f64,
}

impl MotionProgram {
    pub fn new(verb: Verb, speed: f64, duration: f64) -> Self {
        Self { verb, speed, amplitude: 1.0, duration, side: Side::Right, heading: Heading::Forward, phase: 0.0 }
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(MotionError::InvalidProgram(format!("duration must be > 0, got {}", self.duration)));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(MotionError::InvalidProgram(format!("speed must be ≥ 0, got {}", self.speed)));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(MotionError::InvalidProgram("amplitude must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Cycles per second.
    pub fn frequency(&self) -> f64 {
        match self.verb.stride() {
            Some(stride) => self.speed / stride,
            None => self.speed,
        }
    }

    /// Cycle period for cyclic verbs.
    pub fn period(&self) -> Option<f64> {
        let f = self.frequency();
        (self.verb.is_cyclic() && f > 0.0).then(|| 1.0 / f)
    }

    /// Templated command text for corpus labels.
    pub fn label(&self) -> String {
        let side = match self.side {
            Side::Left => "left",
            Side::Right => "right",
        };
        let dir = match self.heading {
            Heading::Forward => "forward",
            Heading::Backward => "backward",
        };
        match self.verb {
            Verb::Walk => format!("walk {dir} at {:.2} m/s", self.speed),
            Verb::Hop => format!("hop {dir} at {:.2} m/s", self.speed),
            Verb::SideStep => format!("step to the {side} at {:.2} m/s", self.speed),
            Verb::Wave => format!("wave the {side} hand {:.2} times per second", self.speed),
            Verb::Kick => format!("kick with the {side} leg {:.2} times per second", self.speed),
            Verb::RaiseHand => format!("raise the {side} hand"),
            Verb::Celebrate => "celebrate".to_string(),
            Verb::Stand => "stand still".to_string(),
        }
    }

    /// Root pose and joint angles at time `t` on the HUMAN-9 layout, before
    /// joint-limit clamping.
    pub fn raw_pose_at(&self, t: f64, standing_height: f64) -> (RootPose, [f64; 8]) {
        let a = self.amplitude;
        let f = self.frequency();
        let sign = match self.heading {
            Heading::Forward => 1.0,
            Heading::Backward => -1.0,
        };
        let phi = TAU * (f * t + self.phase) * if self.verb.is_cyclic() { sign } else { 1.0 };
        // Joint order: l_shoulder, l_elbow, r_shoulder, r_elbow, l_hip, l_knee, r_hip, r_knee.
        let mut q = [0.0; 8];
        let mut root = RootPose::new(0.0, standing_height, 0.0);
        let (arm, leg) = match self.side {
            Side::Left => ((0, 1), (4, 5)),
            Side::Right => ((2, 3), (6, 7)),
        };
        let (other_arm, other_leg) = match self.side {
            Side::Left => ((2, 3), (6, 7)),
            Side::Right => ((0, 1), (4, 5)),
        };
        match self.verb {
            Verb::Stand => {}
            Verb::Walk => {
                let s = phi.sin();
                q[4] = 0.45 * a * s;
                q[6] = -0.45 * a * s;
                q[5] = -0.9 * a * ((1.0 + phi.cos()) / 2.0).powi(2);
                q[7] = -0.9 * a * ((1.0 - phi.cos()) / 2.0).powi(2);
                q[0] = -0.35 * a * s;
                q[2] = 0.35 * a * s;
                q[1] = 0.3 + 0.15 * a * (1.0 + s) / 2.0;
                q[3] = 0.3 + 0.15 * a * (1.0 - s) / 2.0;
                root.x = sign * self.speed * t;
                root.y = standing_height - 0.03 * a * (1.0 - (2.0 * phi).cos()) / 2.0;
            }
            Verb::Hop => {
                let s = phi.sin();
                let crouch = (-s).max(0.0);
                q[5] = -0.8 * a * crouch;
                q[7] = q[5];
                q[4] = 0.4 * a * crouch;
                q[6] = q[4];
                q[0] = 0.6 * a * (1.0 - phi.cos()) / 2.0;
                q[2] = q[0];
                q[1] = 0.4;
                q[3] = 0.4;
                root.x = sign * self.speed * t;
                let flight = s.max(0.0).powi(2);
                root.y = standing_height + 0.12 * a * flight - 0.35 * a * crouch * 0.45;
            }
            Verb::SideStep => {
                let s = phi.sin();
                let lift_l = s.max(0.0).powi(2);
                let lift_r = (-s).max(0.0).powi(2);
                q[4] = 0.35 * a * lift_l;
                q[5] = -0.7 * a * lift_l;
                q[6] = 0.35 * a * lift_r;
                q[7] = -0.7 * a * lift_r;
                q[1] = 0.2;
                q[3] = 0.2;
                let drift = match self.side {
                    Side::Left => -1.0,
                    Side::Right => 1.0,
                };
                root.x = drift * self.speed * t;
            }
            Verb::Wave => {
                q[arm.0] = 2.6;
                q[arm.1] = 0.6 + 0.5 * a * phi.sin();
                q[other_arm.1] = 0.1;
            }
            Verb::RaiseHand => {
                let ramp = if self.speed > 0.0 { (t * self.speed).clamp(0.0, 1.0) } else { 1.0 };
                let smooth = ramp * ramp * (3.0 - 2.0 * ramp);
                q[arm.0] = 2.8 * a.min(1.0) * smooth;
                q[arm.1] = 0.1;
                q[other_arm.1] = 0.1;
            }
            Verb::Kick => {
                let bump = phi.sin().max(0.0).powi(2);
                let snap = (phi - 0.6).sin().max(0.0);
                q[leg.0] = 1.2 * a * bump;
                q[leg.1] = -0.9 * a * (1.0 - snap) * bump;
                q[other_leg.1] = -0.15 * a;
                q[other_leg.0] = 0.08 * a;
                q[other_arm.0] = 0.4 * a * bump;
                q[arm.0] = -0.3 * a * bump;
                q[1] = 0.3;
                q[3] = 0.3;
                root.y = standing_height - 0.45 * (1.0 - (0.15 * a).cos());
                root.theta = -0.1 * a * bump;
            }
            Verb::Celebrate => {
                let s = phi.sin();
                let crouch = (-s).max(0.0);
                q[5] = -0.6 * a * crouch;
                q[7] = q[5];
                q[4] = 0.3 * a * crouch;
                q[6] = q[4];
                q[0] = 2.6 + 0.4 * a * (2.0 * phi).sin();
                q[2] = 2.6 - 0.4 * a * (2.0 * phi).sin();
                q[1] = 0.3 + 0.3 * a * (1.0 + (2.0 * phi).cos()) / 2.0;
                q[3] = q[1];
                root.y = standing_height + 0.1 * a * s.max(0.0).powi(2) - 0.12 * a * crouch;
            }
        }
        root.theta = super::wrap_angle(root.theta);
        (root, q)
    }

    /// Clamped pose on `skeleton`, which must share the HUMAN-9 joint layout.
    pub fn pose_at(&self, skeleton: &Skeleton, t: f64) -> (RootPose, Vec<f64>) {
        let (root, q) = self.raw_pose_at(t, skeleton.rest_root_height());
        let mut q = q.to_vec();
        skeleton.clamp_q(&mut q);
        (root, q)
    }
}

/// Samples `program` on `skeleton` (HUMAN-9 layout) every `dt` seconds,
/// `round(duration / dt)` frames in total.
pub fn generate_motion(program: &MotionProgram, skeleton: &Skeleton, dt: f64) -> Result<MotionClip, MotionError> {
    program.validate()?;
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(MotionError::InvalidProgram(format!("dt must lie in (0, 0.1], got {dt}")));
    }
    if skeleton.joint_count() != 8 {
        return Err(MotionError::InvalidProgram(format!(
            "procedural programs target the 8-joint human layout, skeleton {} has {}",
            skeleton.name,
            skeleton.joint_count()
        )));
    }
    let n = ((program.duration / dt).round() as usize).max(2);
    let frames = (0..n)
        .map(|k| {
            let (root, q) = program.pose_at(skeleton, k as f64 * dt);
            Frame { root, q }
        })
        .collect();
    Ok(MotionClip::new(skeleton.clone(), dt, frames)?.with_effector_tracks())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub verbs: Vec<Verb>,
    pub speeds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub duration: f64,
    pub dt: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { verbs: vec![Verb::Walk, Verb::Wave], speeds: vec![0.5, 1.0], seeds: vec![0, 1], duration: 4.0, dt: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub command: String,
    pub program: MotionProgram,
    pub clip: MotionClip,
}

/// Enumerates `verbs × speeds × seeds` on HUMAN-9. Each seed jitters amplitude
/// by up to ±10 % and the starting phase uniformly.
pub fn build_corpus(config: &CorpusConfig) -> Result<Vec<LabeledClip>, MotionError> {
    if config.verbs.is_empty() || config.speeds.is_empty() || config.seeds.is_empty() {
        return Err(MotionError::Config("corpus grid has an empty axis".into()));
    }
    let skeleton = Skeleton::human9();
    let mut out = Vec::with_capacity(config.verbs.len() * config.speeds.len() * config.seeds.len());
    for &verb in &config.verbs {
        for &speed in &config.speeds {
            for &seed in &config.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((verb as u64) << 32) ^ speed.to_bits().rotate_left(7));
                let mut program = MotionProgram::new(verb, speed, config.duration);
                program.amplitude = 1.0 + rng.random_range(-0.1..0.1);
                program.phase = rng.random_range(0.0..1.0);
                if rng.random_bool(0.5) {
                    program.side = Side::Left;
                }
                let clip = generate_motion(&program, &skeleton, config.dt)?;
                out.push(LabeledClip { command: program.label(), program, clip });
            }
        }
    }
    Ok(out)
}

/// Writes a corpus as JSON lines `{command, clip}` (clip in the clip file
/// format), one clip per line.
pub fn write_corpus(corpus: &[LabeledClip], path: &std::path::Path) -> Result<(), MotionError> {
    let mut s = String::new();
    for c in corpus {
        let clip: serde_json::Value =
            serde_json::from_str(&c.clip.to_json()?).map_err(|e| MotionError::Io(e.to_string()))?;
        let line = serde_json::json!({ "command": c.command, "clip": clip });
        s.push_str(&line.to_string());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| MotionError::Io(format!("{}: {e}", path.display())))
}
