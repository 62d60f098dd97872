use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::disc::{discriminator_step, Discriminator};
use super::policy::{ppo_update, PolicyNets, PpoState, PpoStats, RunningNorm};
use super::rollout::{collect_rollouts, EnvPool};
use super::{AmpError, ReferenceMotion, TrainConfig};
use crate::checkpoint::{CheckpointError, Container};
use crate::motion::{MotionClip, Skeleton};
use crate::nn::{AdamState, Tensor};
use crate::sim::{build_observation, disc_layout, EpisodeParams, ObsLayout, SimState, Simulator};

pub const POLICY_COMPONENT: &str = "policy";

/// Everything needed to resume or deploy a trained policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub nets: PolicyNets,
    pub disc: Discriminator,
    pub skeleton_hash: String,
    pub prompt: String,
    pub total_steps: u64,
    pub best_reward: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    skeleton_hash: String,
    prompt: String,
    total_steps: u64,
    best_reward: f64,
    disc_form: super::DiscForm,
    log_std: Vec<f64>,
    action_offset: Vec<f64>,
    obs_norm: RunningNorm,
}

impl PolicyCheckpoint {
    pub fn to_container(&self) -> Container {
        let meta = PolicyMeta {
            skeleton_hash: self.skeleton_hash.clone(),
            prompt: self.prompt.clone(),
            total_steps: self.total_steps,
            best_reward: self.best_reward,
            disc_form: self.disc.form,
            log_std: self.nets.log_std.data().to_vec(),
            action_offset: self.nets.action_offset.clone(),
            obs_norm: self.nets.obs_norm.clone(),
        };
        let mut c = Container::new(POLICY_COMPONENT, serde_json::to_value(meta).expect("meta serializes"));
        c.push_net("policy", &self.nets.policy);
        c.push_net("value", &self.nets.value);
        c.push_net("discriminator", &self.disc.net);
        c
    }

    pub fn from_container(c: Container) -> Result<Self, CheckpointError> {
        let c = c.expect(POLICY_COMPONENT)?;
        let meta: PolicyMeta = serde_json::from_value(c.meta.clone())?;
        let nets = PolicyNets {
            policy: c.net("policy")?,
            log_std: Tensor::vector(meta.log_std),
            value: c.net("value")?,
            obs_norm: meta.obs_norm,
            action_offset: meta.action_offset,
        };
        if nets.log_std.len() != nets.act_dim() || nets.action_offset.len() != nets.act_dim() {
            return Err(CheckpointError::Format("action width disagrees with policy output".into()));
        }
        if nets.obs_norm.dim() != nets.obs_dim() || nets.value.input_dim() != nets.obs_dim() {
            return Err(CheckpointError::Format("observation width disagrees across networks".into()));
        }
        Ok(Self {
            nets,
            disc: Discriminator { net: c.net("discriminator")?, form: meta.disc_form },
            skeleton_hash: meta.skeleton_hash,
            prompt: meta.prompt,
            total_steps: meta.total_steps,
            best_reward: meta.best_reward,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_container(Container::read(path)?)
    }
}

/// Checks that `ckpt` fits `skeleton` and the network shapes of `cfg`.
pub fn check_warm_start(ckpt: &PolicyCheckpoint, skeleton: &Skeleton, cfg: &TrainConfig) -> Result<(), AmpError> {
    let reject = |m: String| Err(AmpError::WarmStartRejected(m));
    if ckpt.skeleton_hash != skeleton.hash() {
        return reject("checkpoint was trained on a different skeleton".into());
    }
    let obs = ObsLayout::planar(skeleton).total();
    let act = skeleton.joint_count();
    let disc_in = 2 * disc_layout(skeleton).total();
    if ckpt.nets.obs_dim() != obs || ckpt.nets.act_dim() != act {
        return reject(format!("policy is {}→{}, layout needs {obs}→{act}", ckpt.nets.obs_dim(), ckpt.nets.act_dim()));
    }
    if ckpt.disc.net.input_dim() != disc_in {
        return reject(format!("discriminator takes {} inputs, layout needs {disc_in}", ckpt.disc.net.input_dim()));
    }
    if ckpt.disc.form != cfg.disc_form {
        return reject("discriminator loss form differs".into());
    }
    let hidden = |s: Vec<usize>| s[1..s.len() - 1].to_vec();
    if hidden(ckpt.nets.policy.sizes()) != cfg.hidden
        || hidden(ckpt.nets.value.sizes()) != cfg.hidden
        || hidden(ckpt.disc.net.sizes()) != cfg.disc_hidden
    {
        return reject("hidden layer sizes differ from the config".into());
    }
    if !ckpt.nets.is_finite() || !ckpt.disc.net.is_finite() {
        return reject("checkpoint holds non-finite weights".into());
    }
    Ok(())
}

/// One training iteration's summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Environment steps so far, including this iteration's.
    pub step: u64,
    pub mean_reward: f64,
    pub mean_ep_len: f64,
    pub disc_loss: f64,
    pub falls: usize,
    pub diverged: usize,
    pub ppo: PpoStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum WarmStart {
    None,
    Loaded,
    Rejected(String),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PolicyCheckpoint,
    pub best: PolicyCheckpoint,
    pub history: Vec<IterationRecord>,
    pub warm_start: WarmStart,
    /// Checkpoints taken every `snapshot_every` iterations.
    pub snapshots: Vec<PolicyCheckpoint>,
}

/// Alternates rollout collection, discriminator updates and PPO until the
/// step budget is spent. `progress` sees every iteration and stops training
/// by returning `false`.
pub fn train(
    reference_clip: &MotionClip,
    cfg: &TrainConfig,
    prompt: &str,
    warm: Option<&PolicyCheckpoint>,
    progress: &mut dyn FnMut(&IterationRecord) -> bool,
) -> Result<TrainOutcome, AmpError> {
    cfg.validate()?;
    let skeleton = reference_clip.skeleton.clone();
    let sim = Simulator::new(skeleton.clone(), cfg.sim.clone())?;
    let reference =
        ReferenceMotion::new(reference_clip, cfg.sim.dt, [cfg.disc_feature_floor, cfg.disc_velocity_floor])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let obs_dim = ObsLayout::planar(&skeleton).total();
    let mut nets = PolicyNets::new(obs_dim, skeleton.rest_q(), &cfg.hidden, cfg.init_log_std, &mut rng);
    let mut disc = Discriminator::new(2 * reference.feature_dim(), &cfg.disc_hidden, cfg.disc_form, &mut rng);
    let mut start_steps = 0;
    let warm_start = match warm {
        None => WarmStart::None,
        Some(ckpt) => match check_warm_start(ckpt, &skeleton, cfg) {
            Ok(()) => {
                nets = ckpt.nets.clone();
                disc = ckpt.disc.clone();
                start_steps = ckpt.total_steps;
                WarmStart::Loaded
            }
            Err(e) => {
                log::warn!("{e}; training from scratch");
                WarmStart::Rejected(e.to_string())
            }
        },
    };
    let snapshot = |nets: &PolicyNets, disc: &Discriminator, steps: u64, best: f64| PolicyCheckpoint {
        nets: nets.clone(),
        disc: disc.clone(),
        skeleton_hash: skeleton.hash(),
        prompt: prompt.to_string(),
        total_steps: start_steps + steps,
        best_reward: best,
    };
    let initial = snapshot(&nets, &disc, 0, f64::NEG_INFINITY);
    let mut outcome = TrainOutcome {
        final_checkpoint: initial.clone(),
        best: initial,
        history: Vec::new(),
        warm_start,
        snapshots: Vec::new(),
    };
    if cfg.total_steps == 0 {
        return Ok(outcome);
    }

    let mut pool =
        EnvPool::new(sim, cfg.envs, cfg.seed, &reference, cfg.termination, cfg.reference_state_init, cfg.episode_cap());
    let mut ppo_state = PpoState::default();
    let mut disc_opt = AdamState::default();
    let mut steps = 0u64;
    let mut best = f64::NEG_INFINITY;
    let gp_rows = cfg.gp_samples.min(cfg.disc_batch);
    while steps < cfg.total_steps {
        let iteration = outcome.history.len();
        let rollout =
            collect_rollouts(&mut nets, &mut pool, &reference, &disc, cfg.horizon, cfg.gamma, true, cfg.execution);
        steps += rollout.transitions() as u64;

        let mut disc_loss = 0.0;
        let width = 2 * reference.feature_dim();
        for _ in 0..cfg.disc_updates {
            let ref_rows: Vec<f64> = (0..cfg.disc_batch)
                .flat_map(|_| reference.transition(rng.random_range(0..reference.transition_count())))
                .collect();
            let pol_rows: Vec<f64> = (0..cfg.disc_batch)
                .flat_map(|_| rollout.policy_pairs[rng.random_range(0..rollout.policy_pairs.len())].clone())
                .collect();
            let r = Tensor::matrix(cfg.disc_batch, width, ref_rows).expect("shape");
            let p = Tensor::matrix(cfg.disc_batch, width, pol_rows).expect("shape");
            match discriminator_step(
                &mut disc,
                &mut disc_opt,
                cfg.lr_disc,
                &r,
                &p,
                cfg.w_gp,
                gp_rows,
                cfg.max_grad_norm,
            ) {
                Ok(t) => disc_loss += t.total / cfg.disc_updates as f64,
                Err(e) => log::warn!("discriminator step skipped: {e}"),
            }
        }

        let batch = rollout.to_batch(cfg.gamma, cfg.gae_lambda);
        let ppo = ppo_update(&mut nets, &mut ppo_state, &batch, cfg, &mut rng)?;

        let mean_ep_len = if rollout.completed_lengths.is_empty() {
            pool.envs.iter().map(|e| e.steps as f64).sum::<f64>() / pool.len() as f64
        } else {
            rollout.completed_lengths.iter().sum::<usize>() as f64 / rollout.completed_lengths.len() as f64
        };
        let record = IterationRecord {
            iteration,
            step: steps,
            mean_reward: rollout.mean_amp_reward(),
            mean_ep_len,
            disc_loss,
            falls: rollout.falls,
            diverged: rollout.diverged,
            ppo,
        };
        log::debug!(
            "iter {iteration} step {steps} reward {:.4} ep_len {:.1} disc {:.4}",
            record.mean_reward,
            record.mean_ep_len,
            record.disc_loss
        );
        outcome.history.push(record);
        if record.mean_reward > best {
            best = record.mean_reward;
            outcome.best = snapshot(&nets, &disc, steps, best);
        }
        if cfg.snapshot_every > 0 && (iteration + 1).is_multiple_of(cfg.snapshot_every) {
            outcome.snapshots.push(snapshot(&nets, &disc, steps, best));
        }
        if !progress(&record) {
            return Err(AmpError::Cancelled);
        }
    }
    outcome.final_checkpoint = snapshot(&nets, &disc, steps, best);
    outcome.best.best_reward = best;
    Ok(outcome)
}

/// Deterministic-policy statistics over one episode length per environment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub mean_ep_len: f64,
    pub episodes: usize,
    pub falls: usize,
}

/// Runs the policy mean (no exploration noise; domain randomization stays on)
/// for `cfg.episode_cap()` steps in `cfg.envs` fresh environments seeded
/// with `seed`, scoring transitions with the checkpoint's discriminator.
pub fn evaluate(
    ckpt: &PolicyCheckpoint,
    reference_clip: &MotionClip,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Evaluation, AmpError> {
    cfg.validate()?;
    check_warm_start(ckpt, &reference_clip.skeleton, cfg)?;
    let sim = Simulator::new(reference_clip.skeleton.clone(), cfg.sim.clone())?;
    let reference =
        ReferenceMotion::new(reference_clip, cfg.sim.dt, [cfg.disc_feature_floor, cfg.disc_velocity_floor])?;
    let cap = cfg.episode_cap();
    let mut pool = EnvPool::new(sim, cfg.envs, seed, &reference, cfg.termination, cfg.reference_state_init, cap);
    let mut nets = ckpt.nets.clone();
    let r = collect_rollouts(&mut nets, &mut pool, &reference, &ckpt.disc, cap, cfg.gamma, false, cfg.execution);
    let episodes = r.completed_lengths.len();
    let mean_ep_len =
        if episodes == 0 { cap as f64 } else { r.completed_lengths.iter().sum::<usize>() as f64 / episodes as f64 };
    Ok(Evaluation { mean_reward: r.mean_amp_reward(), mean_ep_len, episodes, falls: r.falls })
}

/// Policy-mean trajectory from the first reference state with nominal
/// dynamics and no noise, `steps` control steps long or shorter if the robot
/// falls. The initial state is included.
pub fn play(
    ckpt: &PolicyCheckpoint,
    reference_clip: &MotionClip,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<SimState>, AmpError> {
    check_warm_start(ckpt, &reference_clip.skeleton, cfg)?;
    let sim = Simulator::new(reference_clip.skeleton.clone(), cfg.sim.clone())?;
    let reference =
        ReferenceMotion::new(reference_clip, cfg.sim.dt, [cfg.disc_feature_floor, cfg.disc_velocity_floor])?;
    let r = &reference.states[0];
    let mut s = sim.state(r.root, r.root_vel, r.q.clone(), r.qd.clone());
    let episode = EpisodeParams::nominal(sim.config());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let min_height = cfg.termination.min_height_frac * sim.skeleton().rest_root_height();
    let mut out = vec![s.clone()];
    for _ in 0..steps {
        let obs = build_observation::<ChaCha8Rng>(&s, sim.skeleton(), None);
        let mu = ckpt.nets.policy.forward(&Tensor::vector(ckpt.nets.obs_norm.normalize(&obs)))?;
        let target: Vec<f64> = ckpt.nets.action_offset.iter().zip(mu.data()).map(|(o, a)| o + a).collect();
        match sim.step(&s, &target, &episode, &mut rng) {
            Ok(next) => s = next,
            Err(_) => break,
        }
        out.push(s.clone());
        if s.root.y < min_height || s.root.theta.abs() > cfg.termination.max_tilt {
            break;
        }
    }
    Ok(out)
}

/// Reward history as CSV with columns `step, mean_reward, mean_ep_len, disc_loss`.
pub fn write_reward_csv<W: Write>(mut out: W, history: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(out, "step,mean_reward,mean_ep_len,disc_loss")?;
    for r in history {
        writeln!(out, "{},{},{},{}", r.step, r.mean_reward, r.mean_ep_len, r.disc_loss)?;
    }
    Ok(())
}
