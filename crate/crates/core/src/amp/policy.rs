use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::nn::{adam_step, clip_global_norm, Activation, AdamConfig, AdamState, Mlp, NnError, Tape, Tensor};

const LOG_STD_RANGE: (f64, f64) = (-5.0, 1.0);

/// Running mean and variance of observations (parallel Welford merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Normalized values are clipped to ±clip.
    pub clip: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], var: vec![1.0; dim], clip: 5.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        let d = self.dim();
        let mut bm = vec![0.0; d];
        for r in rows {
            for (m, x) in bm.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut bv = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in bv.iter_mut().zip(r).zip(&bm) {
                *v += (x - m).powi(2) / n;
            }
        }
        let total = self.count + n;
        for i in 0..d {
            let delta = bm[i] - self.mean[i];
            let m2 = self.var[i] * self.count + bv[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v.sqrt() + 1e-8)).clamp(-self.clip, self.clip))
            .collect()
    }
}

/// Gaussian policy with a state-independent log-std, a value network and
/// the observation normalizer they share. Actions are offsets added to
/// `action_offset` (the rest pose) to form PD targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNets {
    pub policy: Mlp,
    pub log_std: Tensor,
    pub value: Mlp,
    pub obs_norm: RunningNorm,
    pub action_offset: Vec<f64>,
}

impl PolicyNets {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_offset: Vec<f64>,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let act_dim = action_offset.len();
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut policy = Mlp::new(&sizes(act_dim), Activation::Tanh, rng);
        // Start with near-zero action means: the PD targets begin at rest.
        if let Some(last) = policy.layers_mut().last_mut() {
            last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.01);
        }
        let value = Mlp::new(&sizes(1), Activation::Tanh, rng);
        Self {
            policy,
            log_std: Tensor::vector(vec![init_log_std; act_dim]),
            value,
            obs_norm: RunningNorm::new(obs_dim),
            action_offset,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite() && self.value.is_finite() && self.log_std.is_finite()
    }
}

/// `log N(a; μ, diag σ²)` with `σ = exp(log_std)`.
pub fn gaussian_log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, m), l) in a.iter().zip(mu).zip(log_std) {
        let z = (a - m) * (-l).exp();
        s += -0.5 * z * z - l;
    }
    s - 0.5 * a.len() as f64 * (2.0 * PI).ln()
}

/// Flattened rollout ready for optimization. `obs` rows are already
/// normalized; `actions` are the sampled offsets.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub obs: Tensor,
    pub actions: Tensor,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.old_log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_prob.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoState {
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Largest |ratio − 1| seen on the first minibatch, before any update.
    pub first_ratio_deviation: f64,
    pub minibatches: usize,
    pub skipped: usize,
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("shape")
}

fn column(v: &[f64], idx: &[usize]) -> Tensor {
    Tensor::matrix(idx.len(), 1, idx.iter().map(|&i| v[i]).collect()).expect("shape")
}

/// Clipped-surrogate PPO over shuffled minibatches. Advantages are
/// normalized over the whole batch first. A minibatch whose loss or
/// gradient is non-finite is skipped and counted.
pub fn ppo_update<R: Rng + ?Sized>(
    nets: &mut PolicyNets,
    state: &mut PpoState,
    batch: &PpoBatch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PpoStats, NnError> {
    let n = batch.len();
    let mut stats = PpoStats::default();
    if n == 0 {
        return Ok(stats);
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let adv: Vec<f64> = batch.advantages.iter().map(|a| (a - mean) / (var.sqrt() + 1e-8)).collect();
    let act_dim = nets.act_dim();
    let log_norm = 0.5 * act_dim as f64 * (2.0 * PI).ln();
    let mb = cfg.minibatch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut first = true;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let mut tape = Tape::new();
            let pp = nets.policy.bind(&mut tape);
            let ls = tape.leaf(nets.log_std.clone());
            let vp = nets.value.bind(&mut tape);
            let obs = tape.leaf(gather(&batch.obs, chunk));
            let act = tape.leaf(gather(&batch.actions, chunk));
            let old = tape.leaf(column(&batch.old_log_prob, chunk));
            let a = tape.leaf(column(&adv, chunk));
            let ret = tape.leaf(column(&batch.returns, chunk));

            let mu = nets.policy.forward_tape(&mut tape, &pp, obs);
            let diff = tape.sub(act, mu);
            let nls = tape.neg(ls);
            let inv = tape.exp(nls);
            let z = tape.mul_row(diff, inv);
            let z2 = tape.square(z);
            let quad = tape.sum_cols(z2);
            let quad = tape.scale(quad, -0.5);
            let sls = tape.sum(ls);
            let neg_sls = tape.neg(sls);
            let logp = tape.add_row(quad, neg_sls);
            let logp = tape.add_scalar(logp, -log_norm);
            let dlog = tape.sub(logp, old);
            let ratio = tape.exp(dlog);
            let s1 = tape.mul(ratio, a);
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let s2 = tape.mul(clipped, a);
            let m = tape.min(s1, s2);
            let surr = tape.mean(m);
            let policy_loss = tape.neg(surr);
            let v = nets.value.forward_tape(&mut tape, &vp, obs);
            let verr = tape.sub(v, ret);
            let verr = tape.square(verr);
            let value_loss = tape.mean(verr);
            let entropy = tape.add_scalar(sls, act_dim as f64 * 0.5 * (1.0 + (2.0 * PI).ln()));
            let vl = tape.scale(value_loss, cfg.value_coef);
            let el = tape.scale(entropy, -cfg.entropy_coef);
            let total = tape.add(policy_loss, vl);
            let total = tape.add(total, el);

            let ratios = tape.value(ratio).data().to_vec();
            if first {
                stats.first_ratio_deviation = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
                first = false;
            }
            stats.minibatches += 1;
            let tv = tape.value(total).item();
            if !tv.is_finite() {
                stats.skipped += 1;
                log::warn!("non-finite PPO loss, minibatch skipped");
                continue;
            }
            stats.policy_loss += tape.value(policy_loss).item();
            stats.value_loss += tape.value(value_loss).item();
            stats.entropy = tape.value(entropy).item();
            stats.clip_fraction +=
                ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / ratios.len() as f64;
            let lp = tape.value(logp).data();
            stats.approx_kl +=
                chunk.iter().zip(lp).map(|(&i, l)| batch.old_log_prob[i] - l).sum::<f64>() / chunk.len() as f64;

            let mut grads = tape.backward(total)?;
            let mut pg: Vec<Tensor> = pp.iter().map(|v| grads.take(*v)).collect();
            pg.push(grads.take(ls));
            let mut vg: Vec<Tensor> = vp.iter().map(|v| grads.take(*v)).collect();
            if pg.iter().chain(&vg).any(|g| !g.is_finite()) {
                stats.skipped += 1;
                log::warn!("non-finite PPO gradient, minibatch skipped");
                continue;
            }
            clip_global_norm(&mut pg, cfg.max_grad_norm);
            clip_global_norm(&mut vg, cfg.max_grad_norm);
            {
                let mut params = nets.policy.params_mut();
                params.push(&mut nets.log_std);
                adam_step(&mut params, &pg, &mut state.policy_opt, &AdamConfig::with_lr(cfg.lr_policy))?;
            }
            adam_step(&mut nets.value.params_mut(), &vg, &mut state.value_opt, &AdamConfig::with_lr(cfg.lr_value))?;
            for l in nets.log_std.data_mut() {
                *l = l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            }
        }
    }
    let used = (stats.minibatches - stats.skipped).max(1) as f64;
    stats.policy_loss /= used;
    stats.value_loss /= used;
    stats.clip_fraction /= used;
    stats.approx_kl /= used;
    Ok(stats)
}
