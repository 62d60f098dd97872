//! Adversarial motion prior training: a discriminator over state
//! transitions supplies the only reward, and PPO with GAE optimizes the
//! policy over a pool of simulated environments.

mod disc;
mod policy;
mod rollout;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{wrap_angle, MotionClip, MotionError, RootPose};
use crate::nn::NnError;
use crate::par::Execution;
use crate::sim::{disc_features, disc_layout, SimConfig, SimError};

pub use disc::{disc_reward, discriminator_loss, discriminator_step, DiscForm, DiscLossTerms, Discriminator, Scorer};
pub use policy::{gaussian_log_prob, ppo_update, PolicyNets, PpoBatch, PpoState, PpoStats, RunningNorm};
pub use rollout::{collect_rollouts, EnvPool, Rollout};
pub use train::{
    check_warm_start, evaluate, play, train, write_reward_csv, Evaluation, IterationRecord, PolicyCheckpoint,
    TrainOutcome, WarmStart, POLICY_COMPONENT,
};

#[derive(Debug, Error, Clone)]
pub enum AmpError {
    #[error("train config: {0}")]
    Config(String),
    #[error("reference motion: {0}")]
    Reference(String),
    #[error("warm start rejected: {0}")]
    WarmStartRejected(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("training cancelled")]
    Cancelled,
}

/// `max(0, 1 − ¼ (d − 1)²)`.
pub fn amp_reward(d: f64) -> f64 {
    (1.0 - 0.25 * (d - 1.0) * (d - 1.0)).max(0.0)
}

/// Generalized advantage estimates and returns for one trajectory.
///
/// `dones[t]` marks that the episode ended after step `t`; the recursion does
/// not bootstrap across it. `last_value` is `V(s_T)` for the state after the
/// final step.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n, "values must align with rewards");
    assert_eq!(dones.len(), n, "dones must align with rewards");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * keep - values[t];
        next_adv = delta + gamma * lambda * keep * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Termination {
    /// Episode ends when the root drops below this fraction of the skeleton's
    /// rest root height.
    pub min_height_frac: f64,
    /// Episode ends when |heading| exceeds this [rad].
    pub max_tilt: f64,
}

impl Default for Termination {
    fn default() -> Self {
        Self { min_height_frac: 0.75, max_tilt: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub envs: usize,
    pub horizon: usize,
    /// Longest episode before a time-limit reset; 0 means `horizon`.
    pub max_episode_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub lr_disc: f64,
    pub w_gp: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub termination: Termination,
    pub reference_state_init: bool,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Discriminator minibatch updates per iteration.
    pub disc_updates: usize,
    pub disc_batch: usize,
    /// Reference samples per minibatch that enter the gradient penalty.
    pub gp_samples: usize,
    pub disc_form: DiscForm,
    /// Floor on the per-feature scale used to normalize discriminator
    /// input, for position-like channels [m, rad].
    pub disc_feature_floor: f64,
    /// Same for velocity channels [m/s, rad/s].
    pub disc_velocity_floor: f64,
    /// Keep a checkpoint every this many iterations (0 disables).
    pub snapshot_every: usize,
    pub sim: SimConfig,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            envs: 64,
            horizon: 128,
            max_episode_steps: 0,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 2048,
            lr_policy: 3e-4,
            lr_value: 3e-4,
            lr_disc: 1e-4,
            w_gp: 5.0,
            total_steps: 2_000_000,
            seed: 0,
            termination: Termination::default(),
            reference_state_init: true,
            hidden: vec![128, 128],
            disc_hidden: vec![128, 128],
            init_log_std: -2.0,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            disc_updates: 8,
            disc_batch: 256,
            gp_samples: 32,
            disc_form: DiscForm::LeastSquares,
            disc_feature_floor: 0.1,
            disc_velocity_floor: 1.0,
            snapshot_every: 0,
            sim: SimConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AmpError> {
        let bad = |m: &str| Err(AmpError::Config(m.into()));
        if self.envs == 0 {
            return bad("envs must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.disc_batch == 0 {
            return bad("epochs and batch sizes must be at least 1");
        }
        if [self.lr_policy, self.lr_value, self.lr_disc].iter().any(|l| !(*l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.w_gp >= 0.0) || !(self.disc_feature_floor > 0.0) || !(self.disc_velocity_floor > 0.0) {
            return bad("w_gp must be >= 0 and the feature floors > 0");
        }
        if self.hidden.is_empty() || self.disc_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        self.sim.validate()?;
        Ok(())
    }

    pub fn episode_cap(&self) -> usize {
        if self.max_episode_steps == 0 {
            self.horizon
        } else {
            self.max_episode_steps
        }
    }
}

/// One reference frame with finite-difference velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct RefState {
    pub root: RootPose,
    pub root_vel: [f64; 3],
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

/// A retargeted clip resampled to the control step, with the per-frame
/// discriminator features and the normalization applied to them.
#[derive(Clone, Debug)]
pub struct ReferenceMotion {
    pub clip: MotionClip,
    pub states: Vec<RefState>,
    pub features: Vec<Vec<f64>>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl ReferenceMotion {
    /// Per-feature scales are the reference standard deviation, floored at
    /// `floor[0]` for positions and `floor[1]` for velocities so that static
    /// clips do not yield near-zero scales.
    pub fn new(clip: &MotionClip, control_dt: f64, floor: [f64; 2]) -> Result<Self, AmpError> {
        clip.validate()?;
        let clip = clip.resample(control_dt)?;
        let n = clip.frames.len();
        if n < 3 {
            return Err(AmpError::Reference("reference needs at least three frames at the control step".into()));
        }
        let sk = &clip.skeleton;
        let dt = clip.dt;
        let states: Vec<RefState> = (0..n)
            .map(|i| {
                let (a, b) = if i == 0 {
                    (0, 1)
                } else if i == n - 1 {
                    (n - 2, n - 1)
                } else {
                    (i - 1, i + 1)
                };
                let span = (b - a) as f64 * dt;
                let (fa, fb) = (&clip.frames[a], &clip.frames[b]);
                let root_vel = [
                    (fb.root.x - fa.root.x) / span,
                    (fb.root.y - fa.root.y) / span,
                    wrap_angle(fb.root.theta - fa.root.theta) / span,
                ];
                let qd = fa.q.iter().zip(&fb.q).map(|(x, y)| (y - x) / span).collect();
                RefState { root: clip.frames[i].root, root_vel, q: clip.frames[i].q.clone(), qd }
            })
            .collect();
        let features: Vec<Vec<f64>> =
            states.iter().map(|s| disc_features(sk, &s.root, s.root_vel, &s.q, &s.qd)).collect();
        let dim = features[0].len();
        let mut mean = vec![0.0; dim];
        for f in &features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in &features {
            for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (x - m).powi(2) / n as f64;
            }
        }
        let layout = disc_layout(sk);
        let velocity: Vec<usize> =
            ["forward_velocity", "joint_velocities"].iter().filter_map(|n| layout.range(n)).flatten().collect();
        for (i, s) in scale.iter_mut().enumerate() {
            let f = if velocity.contains(&i) { floor[1] } else { floor[0] };
            *s = s.sqrt().max(f);
        }
        Ok(Self { clip, states, features, feature_mean: mean, feature_scale: scale })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn normalize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    /// Normalized `[f(s), f(s′)]` for reference transition `k → k+1`.
    pub fn transition(&self, k: usize) -> Vec<f64> {
        let mut out = self.normalize(&self.features[k]);
        out.extend(self.normalize(&self.features[k + 1]));
        out
    }

    pub fn transition_count(&self) -> usize {
        self.states.len() - 1
    }
}
