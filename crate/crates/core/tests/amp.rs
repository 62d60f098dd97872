use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordsmith_core::amp::*;
use wordsmith_core::motion::{Frame, MotionClip, RootPose, Skeleton};
use wordsmith_core::nn::{AdamState, Tensor};
use wordsmith_core::par::Execution;
use wordsmith_core::sim::{disc_layout, ObsLayout, SimConfig, Simulator};

fn stand_clip(sk: &Skeleton) -> MotionClip {
    let root = RootPose::new(0.0, sk.rest_root_height(), 0.0);
    let frames = (0..50).map(|_| Frame { root, q: sk.rest_q() }).collect();
    MotionClip::new(sk.clone(), 0.02, frames).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        envs: 4,
        horizon: 16,
        minibatch: 32,
        epochs: 2,
        hidden: vec![16, 16],
        disc_hidden: vec![16],
        disc_batch: 32,
        gp_samples: 8,
        disc_updates: 2,
        total_steps: 128,
        ..TrainConfig::default()
    }
}

struct Constant(f64);

impl Scorer for Constant {
    fn score(&self, x: &Tensor) -> Vec<f64> {
        vec![self.0; x.rows()]
    }
}

fn pool_for(cfg: &TrainConfig, reference: &ReferenceMotion) -> EnvPool {
    let sim = Simulator::new(reference.clip.skeleton.clone(), cfg.sim.clone()).unwrap();
    EnvPool::new(sim, cfg.envs, cfg.seed, reference, cfg.termination, true, cfg.episode_cap())
}

fn fresh_nets(sk: &Skeleton, cfg: &TrainConfig) -> PolicyNets {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    PolicyNets::new(ObsLayout::planar(sk).total(), sk.rest_q(), &cfg.hidden, cfg.init_log_std, &mut rng)
}

/// Sum of discounted TD residuals up to the end of each episode.
fn brute_force_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if d[t] {
                0.0
            } else if t + 1 < n {
                v[t + 1]
            } else {
                last
            };
            r[t] + g * next - v[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for k in t..n {
                a += w * delta[k];
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            a
        })
        .collect()
}

#[test]
fn gae_matches_brute_force_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = 50;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let last = rng.random_range(-2.0..2.0);
        let g = rng.random_range(0.8..1.0);
        let l = rng.random_range(0.8..1.0);
        let (adv, ret) = gae_advantages(&r, &v, &d, last, g, l);
        let oracle = brute_force_gae(&r, &v, &d, last, g, l);
        for t in 0..n {
            assert!((adv[t] - oracle[t]).abs() < 1e-10, "t={t}: {} vs {}", adv[t], oracle[t]);
            assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn done_splits_the_recursion() {
    let (a, _) = gae_advantages(&[3.0, 1.0, 1.0], &[0.0; 3], &[true, false, false], 0.0, 0.9, 0.9);
    let (b, _) = gae_advantages(&[1.0, 1.0], &[0.0; 2], &[false, false], 0.0, 0.9, 0.9);
    assert_eq!(a[0], 3.0);
    assert_eq!(&a[1..], &b[..]);
}

proptest! {
    #[test]
    fn reward_is_bounded_with_unique_maximum(d in -1e6f64..1e6) {
        let r = amp_reward(d);
        prop_assert!((0.0..=1.0).contains(&r));
        if d != 1.0 {
            prop_assert!(r < 1.0);
        }
    }
}

#[test]
fn reward_fuzz_million_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1_000_000 {
        let d: f64 = rng.random_range(-10.0..10.0);
        let r = amp_reward(d);
        assert!((0.0..=1.0).contains(&r));
        let b = disc_reward(d, DiscForm::Bce);
        assert!((0.0..=1.0).contains(&b));
    }
}

#[test]
fn reference_transition_width() {
    let sk = Skeleton::robot_d();
    let reference = ReferenceMotion::new(&stand_clip(&sk), 1.0 / 200.0, [0.1, 1.0]).unwrap();
    assert_eq!(reference.feature_dim(), disc_layout(&sk).total());
    assert_eq!(reference.transition(0).len(), 2 * reference.feature_dim());
    assert!(reference.feature_scale.iter().all(|s| *s >= 0.1));
}

#[test]
fn horizon_one_two_envs_gives_two_transitions() {
    let sk = Skeleton::robot_d();
    let cfg = TrainConfig { envs: 2, horizon: 1, ..small_config() };
    let reference = ReferenceMotion::new(&stand_clip(&sk), cfg.sim.dt, [0.1, 1.0]).unwrap();
    let mut pool = pool_for(&cfg, &reference);
    let mut nets = fresh_nets(&sk, &cfg);
    let r = collect_rollouts(&mut nets, &mut pool, &reference, &Constant(0.0), 1, 0.99, true, Execution::Sequential);
    assert_eq!(r.transitions(), 2);
    assert_eq!(r.policy_pairs.len(), 2);
    assert_eq!(r.last_values.len(), 2);
    assert!(r.amp_rewards.iter().all(|x| *x == 0.75));
}

#[test]
fn frozen_unit_discriminator_gives_unit_reward() {
    let sk = Skeleton::robot_d();
    let cfg = small_config();
    let reference = ReferenceMotion::new(&stand_clip(&sk), cfg.sim.dt, [0.1, 1.0]).unwrap();
    let mut pool = pool_for(&cfg, &reference);
    let mut nets = fresh_nets(&sk, &cfg);
    let r = collect_rollouts(&mut nets, &mut pool, &reference, &Constant(1.0), 32, 0.99, true, Execution::Sequential);
    assert_eq!(r.diverged, 0);
    assert_eq!(r.mean_amp_reward(), 1.0);
}

#[test]
fn rollouts_do_not_depend_on_worker_count() {
    let sk = Skeleton::robot_d();
    let cfg = TrainConfig { envs: 6, ..small_config() };
    let reference = ReferenceMotion::new(&stand_clip(&sk), cfg.sim.dt, [0.1, 1.0]).unwrap();
    let run = |exec: Execution| {
        let mut pool = pool_for(&cfg, &reference);
        let mut nets = fresh_nets(&sk, &cfg);
        let r = collect_rollouts(&mut nets, &mut pool, &reference, &Constant(0.3), 40, 0.99, true, exec);
        (r.actions, r.policy_pairs, r.rewards, pool.envs.iter().map(|e| e.state.clone()).collect::<Vec<_>>())
    };
    let seq = run(Execution::Sequential);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let par = pool.install(|| run(Execution::Parallel));
    assert!(seq == par, "parallel rollout differs from sequential");
}

#[test]
fn discriminator_separates_frozen_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut disc = Discriminator::new(4, &[32, 32], DiscForm::LeastSquares, &mut rng);
    let mut opt = AdamState::default();
    let sample = |rng: &mut ChaCha8Rng, sign: f64| -> Tensor {
        let data: Vec<f64> = (0..64)
            .flat_map(|_| {
                let mut row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                row[0] = sign * rng.random_range(0.5..1.5);
                row
            })
            .collect();
        Tensor::matrix(64, 4, data).unwrap()
    };
    let (r, p) = (sample(&mut rng, 1.0), sample(&mut rng, -1.0));
    let mut last = f64::INFINITY;
    for step in 0..2000 {
        last = discriminator_step(&mut disc, &mut opt, 1e-3, &r, &p, 0.0, 0, 10.0).unwrap().total;
        if last < 0.05 {
            eprintln!("separated after {step} steps");
            break;
        }
    }
    assert!(last < 0.05, "loss {last}");
}

#[test]
fn first_ratio_is_one_and_clipped_samples_have_no_gradient() {
    let sk = Skeleton::robot_d();
    let cfg = small_config();
    let reference = ReferenceMotion::new(&stand_clip(&sk), cfg.sim.dt, [0.1, 1.0]).unwrap();
    let mut pool = pool_for(&cfg, &reference);
    let mut nets = fresh_nets(&sk, &cfg);
    let r = collect_rollouts(&mut nets, &mut pool, &reference, &Constant(0.2), 16, 0.99, true, Execution::Sequential);
    let batch = r.to_batch(cfg.gamma, cfg.gae_lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stats = ppo_update(&mut nets, &mut PpoState::default(), &batch, &cfg, &mut rng).unwrap();
    assert!(stats.first_ratio_deviation < 1e-6, "{}", stats.first_ratio_deviation);
    assert_eq!(stats.skipped, 0);

    // Two samples far outside the trust region on the side where the clip binds.
    let obs = Tensor::matrix(2, batch.obs.cols(), batch.obs.data()[..2 * batch.obs.cols()].to_vec()).unwrap();
    let mu = nets.policy.forward(&obs).unwrap();
    let act = mu.clone();
    let logp: Vec<f64> = (0..2).map(|i| gaussian_log_prob(act.row(i), mu.row(i), nets.log_std.data())).collect();
    let clipped = PpoBatch {
        obs,
        actions: act,
        old_log_prob: vec![logp[0] - 5.0, logp[1] + 5.0],
        advantages: vec![1.0, -1.0],
        returns: vec![0.0, 0.0],
    };
    let before = (nets.policy.clone(), nets.log_std.clone());
    let cfg1 = TrainConfig { epochs: 1, ..cfg };
    ppo_update(&mut nets, &mut PpoState::default(), &clipped, &cfg1, &mut rng).unwrap();
    assert_eq!(before.0, nets.policy);
    assert_eq!(before.1, nets.log_std);
}

#[test]
fn zero_budget_returns_initial_checkpoint() {
    let sk = Skeleton::robot_d();
    let clip = stand_clip(&sk);
    let cfg = TrainConfig { total_steps: 0, ..small_config() };
    let a = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    assert!(a.history.is_empty());
    assert_eq!(a.final_checkpoint.total_steps, 0);
    assert_eq!(a.final_checkpoint, a.best);
    assert_eq!(a.warm_start, WarmStart::None);
}

#[test]
fn training_is_byte_identical_across_runs() {
    let sk = Skeleton::robot_d();
    let clip = stand_clip(&sk);
    let cfg = small_config();
    let a = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    let b = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|r| (0.0..=1.0).contains(&r.mean_reward)));
}

#[test]
fn progress_callback_cancels() {
    let sk = Skeleton::robot_d();
    let cfg = TrainConfig { total_steps: 1000, ..small_config() };
    let mut seen = 0;
    let r = train(&stand_clip(&sk), &cfg, "stand", None, &mut |_| {
        seen += 1;
        false
    });
    assert!(matches!(r, Err(AmpError::Cancelled)));
    assert_eq!(seen, 1);
}

#[test]
fn warm_start_loads_matching_checkpoint_and_rejects_mismatch() {
    let sk = Skeleton::robot_d();
    let clip = stand_clip(&sk);
    let cfg = small_config();
    let first = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    let warm = train(&clip, &cfg, "stand", Some(&first.final_checkpoint), &mut |_| true).unwrap();
    assert_eq!(warm.warm_start, WarmStart::Loaded);
    assert_eq!(warm.final_checkpoint.total_steps, 2 * first.final_checkpoint.total_steps);

    let mut foreign = first.final_checkpoint.clone();
    foreign.skeleton_hash = Skeleton::human9().hash();
    assert!(matches!(check_warm_start(&foreign, &sk, &cfg), Err(AmpError::WarmStartRejected(_))));
    let out = train(&clip, &cfg, "stand", Some(&foreign), &mut |_| true).unwrap();
    assert!(matches!(out.warm_start, WarmStart::Rejected(_)));
    let scratch = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    assert_eq!(out.final_checkpoint.to_bytes(), scratch.final_checkpoint.to_bytes());

    let wide = TrainConfig { hidden: vec![32, 32], ..cfg.clone() };
    assert!(matches!(check_warm_start(&first.final_checkpoint, &sk, &wide), Err(AmpError::WarmStartRejected(_))));
}

#[test]
fn checkpoint_round_trips_and_detects_corruption() {
    let sk = Skeleton::robot_d();
    let out = train(&stand_clip(&sk), &small_config(), "A person is standing.", None, &mut |_| true).unwrap();
    let bytes = out.final_checkpoint.to_bytes();
    let back = PolicyCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.prompt, "A person is standing.");
    assert_eq!(back.total_steps, 128);
    assert_eq!(back.nets.obs_norm, out.final_checkpoint.nets.obs_norm);
    assert_eq!(back.to_bytes(), bytes, "weights are already f32-representable after one trip");
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(PolicyCheckpoint::from_bytes(&bad).is_err());
}

#[test]
fn reward_csv_has_documented_columns() {
    let history = vec![
        IterationRecord { step: 64, mean_reward: 0.5, mean_ep_len: 16.0, disc_loss: 1.25, ..Default::default() },
        IterationRecord { step: 128, mean_reward: 0.75, mean_ep_len: 12.5, disc_loss: 0.5, ..Default::default() },
    ];
    let mut out = Vec::new();
    write_reward_csv(&mut out, &history).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, "step,mean_reward,mean_ep_len,disc_loss\n64,0.5,16,1.25\n128,0.75,12.5,0.5\n");
}

#[test]
fn evaluation_is_deterministic_and_reports_full_episodes() {
    let sk = Skeleton::robot_d();
    let clip = stand_clip(&sk);
    let cfg = small_config();
    let out = train(&clip, &cfg, "stand", None, &mut |_| true).unwrap();
    let a = evaluate(&out.final_checkpoint, &clip, &cfg, 9).unwrap();
    let b = evaluate(&out.final_checkpoint, &clip, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, cfg.envs);
    assert_eq!(a.mean_ep_len, cfg.horizon as f64);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { envs: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { clip: 0.0, ..Default::default() }.validate().is_err());
    let sim = SimConfig { dt: 0.0, ..Default::default() };
    assert!(TrainConfig { sim, ..Default::default() }.validate().is_err());
}
