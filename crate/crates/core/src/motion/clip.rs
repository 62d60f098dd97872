use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{wrap_angle, MotionError, Skeleton};

/// Planar root pose; `theta` is kept in (−π, π].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RootPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RootPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub root: RootPose,
    pub q: Vec<f64>,
}

/// A fixed-rate sequence of root poses and joint angles on one skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub skeleton: Skeleton,
    pub dt: f64,
    pub frames: Vec<Frame>,
    /// Optional per-frame end-effector positions (world frame), in the
    /// skeleton's effector order.
    pub effectors: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    root: [f64; 3],
    q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    effectors: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct ClipFile {
    format_version: u32,
    skeleton: Skeleton,
    dt: f64,
    frames: Vec<FrameFile>,
}

pub const CLIP_FORMAT_VERSION: u32 = 1;

impl MotionClip {
    pub fn new(skeleton: Skeleton, dt: f64, frames: Vec<Frame>) -> Result<Self, MotionError> {
        let c = Self { skeleton, dt, frames, effectors: None };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        self.skeleton.validate()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(MotionError::InvalidClip(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.frames.len() < 2 {
            return Err(MotionError::InvalidClip("a clip needs at least two frames".into()));
        }
        let j = self.skeleton.joint_count();
        for (i, f) in self.frames.iter().enumerate() {
            if f.q.len() != j {
                return Err(MotionError::InvalidClip(format!("frame {i} has {} angles, skeleton has {j}", f.q.len())));
            }
            let finite = f.q.iter().chain(&f.root.to_array()).all(|v| v.is_finite());
            if !finite {
                return Err(MotionError::InvalidClip(format!("frame {i} is not finite")));
            }
        }
        if let Some(e) = &self.effectors {
            if e.len() != self.frames.len() || e.iter().any(|f| f.len() != self.skeleton.end_effectors.len()) {
                return Err(MotionError::InvalidClip("effector tracks do not match frames".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 * self.dt
    }

    /// Computes and stores world-frame effector tracks from FK.
    pub fn with_effector_tracks(mut self) -> Self {
        let tracks = self.frames.iter().map(|f| self.skeleton.fk_unchecked(&f.root, &f.q).effectors).collect();
        self.effectors = Some(tracks);
        self
    }

    /// Effector tracks, from the stored ones if present and FK otherwise.
    pub fn effector_tracks(&self) -> Vec<Vec<[f64; 2]>> {
        match &self.effectors {
            Some(e) => e.clone(),
            None => self.frames.iter().map(|f| self.skeleton.fk_unchecked(&f.root, &f.q).effectors).collect(),
        }
    }

    /// Frames `[start, end)` as a new clip.
    pub fn trim(&self, start: usize, end: usize) -> Result<Self, MotionError> {
        let end = end.min(self.frames.len());
        if end <= start + 1 {
            return Err(MotionError::InvalidClip("trim leaves fewer than two frames".into()));
        }
        Ok(Self {
            skeleton: self.skeleton.clone(),
            dt: self.dt,
            frames: self.frames[start..end].to_vec(),
            effectors: self.effectors.as_ref().map(|e| e[start..end].to_vec()),
        })
    }

    /// Resamples at `new_dt`. Joint angles and root position are interpolated
    /// linearly, root heading along the shorter arc. The step is adjusted to
    /// `duration / round(duration / new_dt)` so both endpoints are kept.
    pub fn resample(&self, new_dt: f64) -> Result<Self, MotionError> {
        if !(new_dt > 0.0) || !new_dt.is_finite() {
            return Err(MotionError::InvalidClip(format!("new dt must be > 0, got {new_dt}")));
        }
        if new_dt == self.dt {
            return Ok(self.clone());
        }
        let duration = self.duration();
        let steps = ((duration / new_dt).round() as usize).max(1);
        let dt = duration / steps as f64;
        let last = self.frames.len() - 1;
        let frames = (0..=steps)
            .map(|k| {
                if k == 0 {
                    return self.frames[0].clone();
                }
                if k == steps {
                    return self.frames[last].clone();
                }
                let t = k as f64 * dt / self.dt;
                let i = (t.floor() as usize).min(last - 1);
                let a = t - i as f64;
                interpolate(&self.frames[i], &self.frames[i + 1], a)
            })
            .collect();
        Ok(Self { skeleton: self.skeleton.clone(), dt, frames, effectors: None })
    }

    /// Per-frame `[x, y, θ, q…, ẋ, ẏ, θ̇, q̇…]`. Velocities are backward
    /// differences; frame 0 copies frame 1's.
    pub fn features(&self) -> Vec<Vec<f64>> {
        let pose = |f: &Frame| -> Vec<f64> { f.root.to_array().into_iter().chain(f.q.iter().copied()).collect() };
        let n = self.frames.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let k = if i == 0 { 1 } else { i };
            let (a, b) = (&self.frames[k - 1], &self.frames[k]);
            let mut v: Vec<f64> = pose(a).iter().zip(pose(b)).map(|(x0, x1)| (x1 - x0) / self.dt).collect();
            v[2] = wrap_angle(b.root.theta - a.root.theta) / self.dt;
            let mut f = pose(&self.frames[i]);
            f.extend(v);
            out.push(f);
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        2 * (3 + self.skeleton.joint_count())
    }

    pub fn to_json(&self) -> Result<String, MotionError> {
        self.validate()?;
        let file = ClipFile {
            format_version: CLIP_FORMAT_VERSION,
            skeleton: self.skeleton.clone(),
            dt: self.dt,
            frames: self
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| FrameFile {
                    root: f.root.to_array(),
                    q: f.q.clone(),
                    effectors: self.effectors.as_ref().map(|e| e[i].clone()),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| MotionError::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, MotionError> {
        let file: ClipFile = serde_json::from_str(s).map_err(|e| MotionError::Io(e.to_string()))?;
        if file.format_version != CLIP_FORMAT_VERSION {
            return Err(MotionError::Io(format!("unsupported clip format_version {}", file.format_version)));
        }
        let has_eff = file.frames.iter().all(|f| f.effectors.is_some()) && !file.frames.is_empty();
        let effectors = has_eff.then(|| file.frames.iter().map(|f| f.effectors.clone().unwrap_or_default()).collect());
        let frames = file
            .frames
            .into_iter()
            .map(|f| Frame { root: RootPose { x: f.root[0], y: f.root[1], theta: f.root[2] }, q: f.q })
            .collect();
        let clip = Self { skeleton: file.skeleton, dt: file.dt, frames, effectors };
        clip.validate()?;
        Ok(clip)
    }

    pub fn write(&self, path: &Path) -> Result<(), MotionError> {
        std::fs::write(path, self.to_json()?).map_err(|e| MotionError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, MotionError> {
        let s = std::fs::read_to_string(path).map_err(|e| MotionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

fn interpolate(a: &Frame, b: &Frame, t: f64) -> Frame {
    let lerp = |x: f64, y: f64| x + t * (y - x);
    let theta = slerp_angle(a.root.theta, b.root.theta, t);
    Frame {
        root: RootPose::new(lerp(a.root.x, b.root.x), lerp(a.root.y, b.root.y), theta),
        q: a.q.iter().zip(&b.q).map(|(&x, &y)| lerp(x, y)).collect(),
    }
}

/// Interpolates between two headings along the shorter arc.
pub fn slerp_angle(a: f64, b: f64, t: f64) -> f64 {
    wrap_angle(a + t * wrap_angle(b - a))
}
