#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordsmith_core::motion::{build_corpus, wrap_angle, CorpusConfig, RootPose, Skeleton, Verb};
use wordsmith_core::par::Execution;
use wordsmith_core::retarget::*;

fn exact() -> RetargetConfig {
    RetargetConfig { lambda: 0.0, mu: 0.0, grad_tol: 1e-13, step_tol: 0.0, max_iters: 500, ..Default::default() }
}

/// Closed-form two-link solution with the elbow on the side of `sign`.
fn two_link(l1: f64, l2: f64, x: f64, y: f64, sign: f64) -> [f64; 2] {
    let c = ((x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q1 = sign * c.acos();
    let q0 = y.atan2(x) - (l2 * q1.sin()).atan2(l1 + l2 * q1.cos());
    [q0, q1]
}

#[test]
fn two_link_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (l1, l2) = (rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
        let sk = Skeleton::planar_chain(&[l1, l2], &[1.0, 1.0]);
        // Keep the elbow clear of full extension and folding.
        let truth =
            [rng.random_range(-3.0..3.0), rng.random_range(0.3..2.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
        let target = sk.fk(&RootPose::default(), &truth).unwrap().effectors[0];
        let oracle = two_link(l1, l2, target[0], target[1], truth[1].signum());
        let init = [truth[0] + rng.random_range(-0.2..0.2), truth[1] + rng.random_range(-0.2..0.2)];
        let p = IkProblem::new(&sk, vec![target], 0.0, 0.0);
        let s = solve_frame(&p, &init, &[0.0, 0.0], &exact()).unwrap();
        for k in 0..2 {
            let e = wrap_angle(s.q[k] - oracle[k]).abs();
            assert!(e < 1e-5, "joint {k}: {} vs {} (err {e:e})", s.q[k], oracle[k]);
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let sk = Skeleton::robot_d();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random_q = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        sk.links.iter().map(|l| rng.random_range(l.limits[0]..l.limits[1])).collect()
    };
    let h = 1e-6;
    for _ in 0..100 {
        let q = random_q(&mut rng);
        let q_prev = random_q(&mut rng);
        let mut targets = sk.fk(&RootPose::default(), &random_q(&mut rng)).unwrap().effectors;
        for t in &mut targets {
            t[0] += rng.random_range(-0.1..0.1);
            t[1] += rng.random_range(-0.1..0.1);
        }
        let p = IkProblem::new(&sk, targets, rng.random_range(0.1..10.0), rng.random_range(0.0..1.0));
        let (_, g) = ik_objective(&p, &q, &q_prev).unwrap();
        for j in 0..q.len() {
            let mut qp = q.clone();
            qp[j] += h;
            let mut qm = q.clone();
            qm[j] -= h;
            let fd =
                (ik_objective(&p, &qp, &q_prev).unwrap().0 - ik_objective(&p, &qm, &q_prev).unwrap().0) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "joint {j}: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn wrong_dimensions_are_rejected() {
    let sk = Skeleton::robot_d();
    let p = IkProblem::new(&sk, vec![[0.0, 0.0]; sk.end_effectors.len()], 1.0, 0.1);
    assert!(ik_objective(&p, &[0.0; 3], &sk.rest_q()).is_err());
    assert!(solve_frame(&p, &sk.rest_q(), &[0.0], &RetargetConfig::default()).is_err());
    let short = IkProblem::new(&sk, vec![[0.0, 0.0]], 1.0, 0.1);
    assert!(solve_frame(&short, &sk.rest_q(), &sk.rest_q(), &RetargetConfig::default()).is_err());
}

#[test]
fn solver_never_increases_the_objective() {
    let sk = Skeleton::robot_d();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let q: Vec<f64> = sk.links.iter().map(|l| rng.random_range(l.limits[0]..l.limits[1])).collect();
        let targets = sk.fk(&RootPose::default(), &q).unwrap().effectors;
        let p = IkProblem::new(&sk, targets, 1.0, 0.1);
        let s = solve_frame(&p, &sk.rest_q(), &sk.rest_q(), &RetargetConfig::default()).unwrap();
        assert!(s.trace.windows(2).all(|w| w[1] <= w[0]));
        for (qi, l) in s.q.iter().zip(&sk.links) {
            assert!(*qi >= l.limits[0] && *qi <= l.limits[1]);
        }
    }
}

fn walk_clips() -> Vec<wordsmith_core::motion::MotionClip> {
    let corpus = build_corpus(&CorpusConfig {
        verbs: vec![Verb::Walk],
        speeds: vec![1.0],
        seeds: vec![0, 1, 2],
        duration: 2.0,
        dt: 1.0 / 30.0,
    })
    .unwrap();
    corpus.into_iter().map(|c| c.clip).collect()
}

#[test]
fn warm_start_needs_fewer_iterations_than_cold() {
    let robot = Skeleton::robot_d();
    for clip in walk_clips() {
        let warm = retarget_clip(&clip, &robot, &RetargetConfig::default()).unwrap().1;
        let cold = retarget_clip(&clip, &robot, &RetargetConfig { cold_start: true, ..Default::default() }).unwrap().1;
        assert!(
            warm.mean_iterations < cold.mean_iterations,
            "warm {} cold {}",
            warm.mean_iterations,
            cold.mean_iterations
        );
    }
}

#[test]
fn retargeted_clip_is_on_the_robot_and_tracks_its_targets() {
    let robot = Skeleton::robot_d();
    let clip = &walk_clips()[0];
    let (out, report) = retarget_clip(clip, &robot, &RetargetConfig::default()).unwrap();
    assert_eq!(out.skeleton, robot);
    assert_eq!(out.len(), clip.len());
    assert_eq!(out.dt, clip.dt);
    assert_eq!(report.frames.len(), clip.len());
    assert!(report.mean_tracking_error < 0.05, "{}", report.mean_tracking_error);
    for (a, b) in out.frames.iter().zip(&clip.frames) {
        assert_eq!(a.root.x, b.root.x);
        assert_eq!(a.root.theta, b.root.theta);
    }
    let again = retarget_clip(clip, &robot, &RetargetConfig::default()).unwrap();
    assert_eq!(again.0, out);
}

#[test]
fn retarget_many_matches_one_by_one() {
    let robot = Skeleton::robot_d();
    let clips = walk_clips();
    let cfg = RetargetConfig::default();
    let par = retarget_many(&clips, &robot, &cfg, Execution::Parallel);
    let seq = retarget_many(&clips, &robot, &cfg, Execution::Sequential);
    for ((clip, a), b) in clips.iter().zip(par).zip(seq) {
        let one = retarget_clip(clip, &robot, &cfg).unwrap();
        assert_eq!(a.unwrap(), one);
        assert_eq!(b.unwrap(), one);
    }
}

#[test]
fn negative_weights_are_rejected() {
    let clip = &walk_clips()[0];
    let cfg = RetargetConfig { mu: -1.0, ..Default::default() };
    assert!(matches!(retarget_clip(clip, &Skeleton::robot_d(), &cfg), Err(RetargetError::Invalid(_))));
}
