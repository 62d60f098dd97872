use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::disc::{disc_reward, Scorer};
use super::policy::{gaussian_log_prob, PolicyNets, PpoBatch};
use super::{gae_advantages, ReferenceMotion, Termination};
use crate::nn::Tensor;
use crate::par::{self, Execution};
use crate::sim::{build_observation, disc_features, randomize_episode, EpisodeParams, SimError, SimState, Simulator};

/// One simulated environment with its own random stream.
#[derive(Clone, Debug)]
pub struct Env {
    pub state: SimState,
    pub episode: EpisodeParams,
    pub steps: usize,
    obs: Vec<f64>,
    mu: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Environments sharing one simulator and reference motion.
#[derive(Clone, Debug)]
pub struct EnvPool {
    pub sim: Simulator,
    pub envs: Vec<Env>,
    pub termination: Termination,
    pub reference_state_init: bool,
    pub episode_cap: usize,
    min_height: f64,
}

fn features_of(sim: &Simulator, s: &SimState) -> Vec<f64> {
    disc_features(sim.skeleton(), &s.root, s.root_vel, &s.q, &s.qd)
}

impl EnvPool {
    /// Each environment draws from its own stream of the master `seed`, so
    /// results do not depend on how environments are spread over workers.
    pub fn new(
        sim: Simulator,
        count: usize,
        seed: u64,
        reference: &ReferenceMotion,
        termination: Termination,
        reference_state_init: bool,
        episode_cap: usize,
    ) -> Self {
        let min_height = termination.min_height_frac * sim.skeleton().rest_root_height();
        let mut pool = Self {
            sim,
            envs: Vec::with_capacity(count),
            termination,
            reference_state_init,
            episode_cap: episode_cap.max(1),
            min_height,
        };
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let placeholder = pool.sim.rest_state();
            let mut env = Env {
                state: placeholder,
                episode: EpisodeParams::nominal(pool.sim.config()),
                steps: 0,
                obs: Vec::new(),
                mu: Vec::new(),
                rng,
            };
            pool.reset(&mut env, reference);
            pool.envs.push(env);
        }
        pool
    }

    fn reset(&self, env: &mut Env, reference: &ReferenceMotion) {
        let k = if self.reference_state_init { env.rng.random_range(0..reference.len()) } else { 0 };
        let r = &reference.states[k];
        env.state = self.sim.state(r.root, r.root_vel, r.q.clone(), r.qd.clone());
        env.episode = randomize_episode(self.sim.config(), &mut env.rng);
        env.steps = 0;
        env.obs = observe(&self.sim, env);
    }

    fn fallen(&self, s: &SimState) -> bool {
        s.root.y < self.min_height || s.root.theta.abs() > self.termination.max_tilt
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

fn observe(sim: &Simulator, env: &mut Env) -> Vec<f64> {
    let std = env.episode.obs_noise_std;
    build_observation(&env.state, sim.skeleton(), Some((&mut env.rng, std)))
}

/// Time-major buffers (`t * envs + e`) from one collection pass.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub envs: usize,
    pub horizon: usize,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_prob: Vec<f64>,
    pub values: Vec<f64>,
    /// AMP reward of each transition.
    pub amp_rewards: Vec<f64>,
    /// Reward used for GAE: the AMP reward plus, at time-limit resets, the
    /// discounted value of the state that was cut off.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Normalized discriminator inputs of the policy transitions.
    pub policy_pairs: Vec<Vec<f64>>,
    pub last_values: Vec<f64>,
    pub completed_lengths: Vec<usize>,
    pub falls: usize,
    pub diverged: usize,
}

impl Rollout {
    pub fn transitions(&self) -> usize {
        self.log_prob.len()
    }

    pub fn mean_amp_reward(&self) -> f64 {
        if self.amp_rewards.is_empty() {
            return 0.0;
        }
        self.amp_rewards.iter().sum::<f64>() / self.amp_rewards.len() as f64
    }

    /// Per-environment GAE, flattened into an optimization batch.
    pub fn to_batch(&self, gamma: f64, lambda: f64) -> PpoBatch {
        let (n, t) = (self.envs, self.horizon);
        let mut advantages = vec![0.0; n * t];
        let mut returns = vec![0.0; n * t];
        for e in 0..n {
            let col = |v: &[f64]| -> Vec<f64> { (0..t).map(|k| v[k * n + e]).collect() };
            let dones: Vec<bool> = (0..t).map(|k| self.dones[k * n + e]).collect();
            let (a, r) =
                gae_advantages(&col(&self.rewards), &col(&self.values), &dones, self.last_values[e], gamma, lambda);
            for k in 0..t {
                advantages[k * n + e] = a[k];
                returns[k * n + e] = r[k];
            }
        }
        let rows = |v: &[Vec<f64>]| -> Tensor {
            let c = v.first().map_or(0, Vec::len);
            Tensor::matrix(v.len(), c, v.concat()).expect("shape")
        };
        PpoBatch {
            obs: rows(&self.obs),
            actions: rows(&self.actions),
            old_log_prob: self.log_prob.clone(),
            advantages,
            returns,
        }
    }
}

struct StepOut {
    action: Vec<f64>,
    log_prob: f64,
    pair_raw: (Vec<f64>, Vec<f64>),
    terminal: bool,
    truncated_obs: Option<Vec<f64>>,
    ended: Option<usize>,
    fell: bool,
    diverged: bool,
}

/// Runs every environment for `horizon` control steps under the current
/// policy, scoring each transition with `scorer`. With `explore` the actions
/// are sampled and the observation normalizer is updated from the collected
/// observations; without it the policy mean is applied and the normalizer is
/// left alone.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    nets: &mut PolicyNets,
    pool: &mut EnvPool,
    reference: &ReferenceMotion,
    scorer: &dyn Scorer,
    horizon: usize,
    gamma: f64,
    explore: bool,
    exec: Execution,
) -> Rollout {
    let n = pool.len();
    let mut out = Rollout { envs: n, horizon, ..Rollout::default() };
    let sigma: Vec<f64> = nets.log_std.data().iter().map(|l| if explore { l.exp() } else { 0.0 }).collect();
    let log_std = nets.log_std.data().to_vec();
    let offset = nets.action_offset.clone();
    let form = scorer.form();
    for _ in 0..horizon {
        let raw: Vec<Vec<f64>> = pool.envs.iter().map(|e| e.obs.clone()).collect();
        if explore {
            nets.obs_norm.update(&raw);
        }
        let normed: Vec<Vec<f64>> = raw.iter().map(|o| nets.obs_norm.normalize(o)).collect();
        let obs_t = Tensor::matrix(n, nets.obs_dim(), normed.concat()).expect("shape");
        let mu = nets.policy.forward(&obs_t).expect("policy input width");
        let values = nets.value.forward(&obs_t).expect("value input width").into_data();
        for (e, env) in pool.envs.iter_mut().enumerate() {
            env.mu = mu.row(e).to_vec();
        }

        let mut envs = std::mem::take(&mut pool.envs);
        let shared = &*pool;
        let results: Vec<StepOut> =
            par::map_mut(exec, &mut envs, |env| step_env(shared, env, reference, &offset, &sigma, &log_std));
        pool.envs = envs;

        let pairs: Vec<Vec<f64>> = results
            .iter()
            .map(|r| {
                let mut p = reference.normalize(&r.pair_raw.0);
                p.extend(reference.normalize(&r.pair_raw.1));
                p
            })
            .collect();
        let width = pairs[0].len();
        let scores = scorer.score(&Tensor::matrix(n, width, pairs.concat()).expect("shape"));
        let truncated: Vec<(usize, Vec<f64>)> = results
            .iter()
            .enumerate()
            .filter_map(|(e, r)| r.truncated_obs.as_ref().map(|o| (e, nets.obs_norm.normalize(o))))
            .collect();
        let mut bootstrap = vec![0.0; n];
        if !truncated.is_empty() {
            let rows: Vec<f64> = truncated.iter().flat_map(|(_, o)| o.iter().copied()).collect();
            let t = Tensor::matrix(truncated.len(), nets.obs_dim(), rows).expect("shape");
            let v = nets.value.forward(&t).expect("value input width").into_data();
            for ((e, _), v) in truncated.iter().zip(v) {
                bootstrap[*e] = gamma * v;
            }
        }
        for (e, r) in results.into_iter().enumerate() {
            let amp = if r.diverged { 0.0 } else { disc_reward(scores[e], form) };
            out.amp_rewards.push(amp);
            out.rewards.push(amp + bootstrap[e]);
            out.dones.push(r.terminal || r.truncated_obs.is_some());
            out.obs.push(normed[e].clone());
            out.actions.push(r.action);
            out.log_prob.push(r.log_prob);
            out.values.push(values[e]);
            out.policy_pairs.push(pairs[e].clone());
            if let Some(len) = r.ended {
                out.completed_lengths.push(len);
            }
            out.falls += r.fell as usize;
            out.diverged += r.diverged as usize;
        }
    }
    let normed: Vec<f64> = pool.envs.iter().flat_map(|e| nets.obs_norm.normalize(&e.obs)).collect();
    let obs_t = Tensor::matrix(n, nets.obs_dim(), normed).expect("shape");
    out.last_values = nets.value.forward(&obs_t).expect("value input width").into_data();
    out
}

fn step_env(
    pool: &EnvPool,
    env: &mut Env,
    reference: &ReferenceMotion,
    offset: &[f64],
    sigma: &[f64],
    log_std: &[f64],
) -> StepOut {
    let action: Vec<f64> = env
        .mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let eps: f64 = StandardNormal.sample(&mut env.rng);
            m + s * eps
        })
        .collect();
    let log_prob = gaussian_log_prob(&action, &env.mu, log_std);
    let sim = &pool.sim;
    let target: Vec<f64> = offset.iter().zip(&action).map(|(r, a)| r + a).collect();
    let before = features_of(sim, &env.state);
    let mut out = StepOut {
        action,
        log_prob,
        pair_raw: (before.clone(), before),
        terminal: false,
        truncated_obs: None,
        ended: None,
        fell: false,
        diverged: false,
    };
    match sim.step(&env.state, &target, &env.episode, &mut env.rng) {
        Ok(next) => {
            out.pair_raw.1 = features_of(sim, &next);
            env.state = next;
            env.steps += 1;
            if pool.fallen(&env.state) {
                out.terminal = true;
                out.fell = true;
            }
        }
        Err(SimError::Diverged { .. }) | Err(_) => {
            env.steps += 1;
            out.terminal = true;
            out.diverged = true;
        }
    }
    if out.terminal {
        out.ended = Some(env.steps);
        pool.reset(env, reference);
    } else {
        env.obs = observe(sim, env);
        if env.steps >= pool.episode_cap {
            out.truncated_obs = Some(env.obs.clone());
            out.ended = Some(env.steps);
            pool.reset(env, reference);
        }
    }
    out
}
