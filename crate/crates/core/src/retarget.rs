//! Human → robot retargeting by per-frame end-effector IK.
//!
//! For each frame the solver minimizes
//!
//! ```text
//! f(q) = Σ_e ‖T_FK,e(q) − x_e‖² + λ Σ_i (d_i(q) − d_i⁰)² + μ ‖q − q_prev‖²
//! ```
//!
//! in the root frame, with `d_i` the lengths of the virtual rods. All three
//! terms are squared residuals, so the solver is damped Gauss-Newton
//! (Levenberg-Marquardt) with a backtracking line search and projection onto
//! the joint limits.
//!
//! Targets: each source effector position is taken in the source root frame,
//! then mapped limb by limb with the similarity transform (rotation and
//! scale about the limb root) that carries the source rest-pose effector onto
//! the robot rest-pose effector. The rest pose therefore retargets to the rest
//! pose exactly, and scale follows the ratio of rest reaches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{rotate, to_root_frame, Frame, MotionClip, MotionError, RootPose, Skeleton};
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("robot effector {0:?} has no counterpart in the source skeleton")]
    Mapping(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargetConfig {
    pub lambda: f64,
    pub mu: f64,
    pub max_iters: usize,
    /// Stop once the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop once an accepted step changes q by less than this (max-norm).
    pub step_tol: f64,
    /// Initial Levenberg-Marquardt damping.
    pub damping: f64,
    /// Extra solves with λ multiplied by 10 each round, warm-started from the
    /// previous round, to tighten the rod constraints.
    pub penalty_rounds: usize,
    /// Start every frame from the rest pose instead of the previous solution.
    pub cold_start: bool,
    /// Added to the copied root height [m].
    pub height_offset: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.1,
            max_iters: 100,
            grad_tol: 1e-9,
            step_tol: 1e-12,
            damping: 1e-3,
            penalty_rounds: 0,
            cold_start: false,
            height_offset: 0.0,
        }
    }
}

/// One frame's IK problem in the root frame.
#[derive(Clone, Debug)]
pub struct IkProblem<'a> {
    pub skeleton: &'a Skeleton,
    /// One target per robot effector, root frame [m].
    pub targets: Vec<[f64; 2]>,
    pub rest_lengths: Vec<f64>,
    pub lambda: f64,
    pub mu: f64,
}

impl<'a> IkProblem<'a> {
    pub fn new(skeleton: &'a Skeleton, targets: Vec<[f64; 2]>, lambda: f64, mu: f64) -> Self {
        Self { skeleton, targets, rest_lengths: skeleton.rod_rest_lengths(), lambda, mu }
    }

    fn residual_count(&self) -> usize {
        2 * self.targets.len() + self.rest_lengths.len() + self.skeleton.joint_count()
    }

    /// Residual vector and its Jacobian (row-major, `m × J`).
    fn residuals(&self, q: &[f64], q_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sk = self.skeleton;
        let n = sk.joint_count();
        let m = self.residual_count();
        let fk = sk.fk_unchecked(&RootPose::default(), q);
        let mut r = vec![0.0; m];
        let mut jac = vec![0.0; m * n];
        let mut row = 0;
        for (e, target) in sk.end_effectors.iter().zip(&self.targets) {
            let p = fk.link_end[e.link];
            r[row] = p[0] - target[0];
            r[row + 1] = p[1] - target[1];
            for j in sk.chain(e.link) {
                let o = fk.link_start[j];
                jac[row * n + j] = -(p[1] - o[1]);
                jac[(row + 1) * n + j] = p[0] - o[0];
            }
            row += 2;
        }
        let sl = self.lambda.sqrt();
        for (rod, &d0) in sk.rods.iter().zip(&self.rest_lengths) {
            let (a, b) = (fk.point(&rod.a), fk.point(&rod.b));
            let diff = [a[0] - b[0], a[1] - b[1]];
            let d = diff[0].hypot(diff[1]);
            r[row] = sl * (d - d0);
            if d > 0.0 {
                let u = [diff[0] / d, diff[1] / d];
                for (p, link, sign) in [(a, rod.a.link, 1.0), (b, rod.b.link, -1.0)] {
                    for j in sk.chain(link) {
                        let o = fk.link_start[j];
                        let dp = [-(p[1] - o[1]), p[0] - o[0]];
                        jac[row * n + j] += sl * sign * (u[0] * dp[0] + u[1] * dp[1]);
                    }
                }
            }
            row += 1;
        }
        let sm = self.mu.sqrt();
        for j in 0..n {
            r[row] = sm * (q[j] - q_prev[j]);
            jac[row * n + j] = sm;
            row += 1;
        }
        (r, jac)
    }
}

/// Objective value and analytic gradient at `q`.
pub fn ik_objective(problem: &IkProblem, q: &[f64], q_prev: &[f64]) -> Result<(f64, Vec<f64>), RetargetError> {
    let n = problem.skeleton.joint_count();
    if q.len() != n || q_prev.len() != n {
        return Err(MotionError::Dimension { expected: n, got: q.len().min(q_prev.len()) }.into());
    }
    let (r, jac) = problem.residuals(q, q_prev);
    Ok(value_and_gradient(&r, &jac, n))
}

fn value_and_gradient(r: &[f64], jac: &[f64], n: usize) -> (f64, Vec<f64>) {
    let f = r.iter().map(|x| x * x).sum();
    let mut g = vec![0.0; n];
    for (i, ri) in r.iter().enumerate() {
        for j in 0..n {
            g[j] += 2.0 * jac[i * n + j] * ri;
        }
    }
    (f, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResidual {
    /// Mean effector distance to target [m].
    pub tracking_error: f64,
    pub max_tracking_error: f64,
    /// Σ (d_i − d_i⁰)² [m²].
    pub feasibility: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: Vec<f64>,
    pub residual: FrameResidual,
    /// Objective after each accepted iterate, starting with the initial value.
    pub trace: Vec<f64>,
}

fn projected_gradient_norm(q: &[f64], g: &[f64], sk: &Skeleton) -> f64 {
    q.iter()
        .zip(g)
        .zip(&sk.links)
        .map(|((&qi, &gi), l)| {
            let [lo, hi] = l.limits;
            // A descent direction (−g) that leaves the box does not count.
            if (qi <= lo && gi > 0.0) || (qi >= hi && gi < 0.0) {
                0.0
            } else {
                gi.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Solves one frame from `q_init`, smoothing toward `q_prev`.
pub fn solve_frame(
    problem: &IkProblem,
    q_init: &[f64],
    q_prev: &[f64],
    cfg: &RetargetConfig,
) -> Result<IkSolution, RetargetError> {
    let sk = problem.skeleton;
    let n = sk.joint_count();
    if q_init.len() != n || q_prev.len() != n || problem.targets.len() != sk.end_effectors.len() {
        return Err(RetargetError::Invalid("dimensions do not match the skeleton".into()));
    }
    let mut q = q_init.to_vec();
    sk.clamp_q(&mut q);
    let (mut r, mut jac) = problem.residuals(&q, q_prev);
    let (mut f, mut g) = value_and_gradient(&r, &jac, n);
    let mut trace = vec![f];
    let mut nu = cfg.damping;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        if projected_gradient_norm(&q, &g, sk) < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        // (JᵀJ + ν·diag(JᵀJ) + ν·I) δ = −Jᵀr over the free joints.
        let m = r.len();
        let mut a = vec![0.0; n * n];
        for i in 0..m {
            let row = &jac[i * n..(i + 1) * n];
            for j in 0..n {
                if row[j] != 0.0 {
                    for k in 0..n {
                        a[j * n + k] += row[j] * row[k];
                    }
                }
            }
        }
        // Joints pinned at a limit with the gradient pushing outward stay fixed.
        let free: Vec<usize> = (0..n)
            .filter(|&j| {
                let [lo, hi] = sk.links[j].limits;
                !((q[j] <= lo && g[j] > 0.0) || (q[j] >= hi && g[j] < 0.0))
            })
            .collect();
        let nf = free.len();
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = vec![0.0; nf * nf];
            for (a_i, &j) in free.iter().enumerate() {
                for (b_i, &k) in free.iter().enumerate() {
                    damped[a_i * nf + b_i] = a[j * n + k];
                }
                damped[a_i * nf + a_i] += nu * (a[j * n + j] + 1.0);
            }
            let rhs: Vec<f64> = free.iter().map(|&j| -0.5 * g[j]).collect();
            let Some(step_free) = solve_spd(&damped, &rhs, nf) else {
                nu *= 10.0;
                continue;
            };
            let mut delta = vec![0.0; n];
            for (i, &j) in free.iter().enumerate() {
                delta[j] = step_free[i];
            }
            // Backtracking along the projected path.
            let mut alpha = 1.0;
            for _ in 0..12 {
                let mut cand: Vec<f64> = q.iter().zip(&delta).map(|(qi, d)| qi + alpha * d).collect();
                sk.clamp_q(&mut cand);
                let (rc, jc) = problem.residuals(&cand, q_prev);
                let fc: f64 = rc.iter().map(|x| x * x).sum();
                if fc <= f {
                    let step = cand.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    q = cand;
                    r = rc;
                    jac = jc;
                    let (fv, gv) = value_and_gradient(&r, &jac, n);
                    let decrease = f - fv;
                    f = fv;
                    g = gv;
                    trace.push(f);
                    accepted = true;
                    if step < cfg.step_tol || decrease <= f64::EPSILON * f.max(1e-300) && step < 1e-9 {
                        converged = true;
                    }
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                nu = (nu / 3.0).max(1e-12);
                break;
            }
            nu *= 10.0;
        }
        if !accepted {
            // No descent direction left at machine precision.
            converged = projected_gradient_norm(&q, &g, sk) < cfg.grad_tol.sqrt();
            break;
        }
        if converged {
            break;
        }
    }
    if !converged && projected_gradient_norm(&q, &g, sk) < cfg.grad_tol {
        converged = true;
    }
    let residual = frame_residual(problem, &q, f, iterations, converged);
    Ok(IkSolution { q, residual, trace })
}

fn frame_residual(problem: &IkProblem, q: &[f64], objective: f64, iterations: usize, converged: bool) -> FrameResidual {
    let sk = problem.skeleton;
    let fk = sk.fk_unchecked(&RootPose::default(), q);
    let errs: Vec<f64> = sk
        .end_effectors
        .iter()
        .zip(&problem.targets)
        .map(|(e, t)| {
            let p = fk.link_end[e.link];
            (p[0] - t[0]).hypot(p[1] - t[1])
        })
        .collect();
    let feasibility = sk
        .rods
        .iter()
        .zip(&problem.rest_lengths)
        .map(|(rod, d0)| {
            let (a, b) = (fk.point(&rod.a), fk.point(&rod.b));
            ((a[0] - b[0]).hypot(a[1] - b[1]) - d0).powi(2)
        })
        .sum();
    FrameResidual {
        tracking_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        max_tracking_error: errs.iter().copied().fold(0.0, f64::max),
        feasibility,
        objective,
        iterations,
        converged,
    }
}

/// Cholesky solve of the SPD system `a x = b`.
pub(crate) fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

/// Per-limb map from source root-frame effector positions to robot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    /// For each robot effector: source effector index, source limb root,
    /// robot limb root, rotation [rad] and scale.
    #[allow(clippy::type_complexity)]
    limbs: Vec<(usize, [f64; 2], [f64; 2], f64, f64)>,
}

impl TargetMap {
    pub fn new(source: &Skeleton, robot: &Skeleton) -> Result<Self, RetargetError> {
        let src_fk = source.fk_unchecked(&RootPose::default(), &source.rest_q());
        let rob_fk = robot.fk_unchecked(&RootPose::default(), &robot.rest_q());
        let mut limbs = Vec::new();
        for (ri, e) in robot.end_effectors.iter().enumerate() {
            let si = source.effector_index(&e.name).ok_or_else(|| RetargetError::Mapping(e.name.clone()))?;
            let s_root = source.limb_root(source.end_effectors[si].link);
            let r_root = robot.limb_root(e.link);
            let sv = sub(src_fk.effectors[si], s_root);
            let rv = sub(rob_fk.effectors[ri], r_root);
            let (sn, rn) = (sv[0].hypot(sv[1]), rv[0].hypot(rv[1]));
            if sn == 0.0 || rn == 0.0 {
                return Err(RetargetError::Invalid(format!("effector {} coincides with its limb root", e.name)));
            }
            let angle = rv[1].atan2(rv[0]) - sv[1].atan2(sv[0]);
            limbs.push((si, s_root, r_root, angle, rn / sn));
        }
        Ok(Self { limbs })
    }

    /// Robot targets for one frame of source effector positions (root frame).
    pub fn targets(&self, source_effectors: &[[f64; 2]]) -> Vec<[f64; 2]> {
        self.limbs
            .iter()
            .map(|&(si, s_root, r_root, angle, scale)| {
                let v = rotate(sub(source_effectors[si], s_root), angle);
                [r_root[0] + scale * v[0], r_root[1] + scale * v[1]]
            })
            .collect()
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetReport {
    pub frames: Vec<FrameResidual>,
    pub mean_tracking_error: f64,
    pub max_tracking_error: f64,
    pub mean_iterations: f64,
    pub unconverged_frames: usize,
}

/// Retargets `source` onto `robot`. Root x and heading are copied; root
/// height is shifted by the difference in rest heights plus
/// `cfg.height_offset`.
pub fn retarget_clip(
    source: &MotionClip,
    robot: &Skeleton,
    cfg: &RetargetConfig,
) -> Result<(MotionClip, RetargetReport), RetargetError> {
    source.validate()?;
    robot.validate()?;
    if cfg.lambda < 0.0 || cfg.mu < 0.0 {
        return Err(RetargetError::Invalid("λ and μ must be ≥ 0".into()));
    }
    let map = TargetMap::new(&source.skeleton, robot)?;
    let tracks = source.effector_tracks();
    let dy = robot.rest_root_height() - source.skeleton.rest_root_height() + cfg.height_offset;
    let rest = robot.rest_q();
    let mut q_prev = rest.clone();
    let mut frames = Vec::with_capacity(source.frames.len());
    let mut report_frames = Vec::with_capacity(source.frames.len());
    for (t, (frame, world)) in source.frames.iter().zip(&tracks).enumerate() {
        let local: Vec<[f64; 2]> = world.iter().map(|&p| to_root_frame(&frame.root, p)).collect();
        let targets = map.targets(&local);
        let init = if cfg.cold_start { rest.clone() } else { q_prev.clone() };
        // Frame 0 has no predecessor to stay close to.
        let mu = if t == 0 { 0.0 } else { cfg.mu };
        let mut problem = IkProblem::new(robot, targets, cfg.lambda, mu);
        let mut sol = solve_frame(&problem, &init, &q_prev, cfg)?;
        for _ in 0..cfg.penalty_rounds {
            problem.lambda *= 10.0;
            let iters = sol.residual.iterations;
            sol = solve_frame(&problem, &sol.q, &q_prev, cfg)?;
            sol.residual.iterations += iters;
        }
        q_prev = sol.q.clone();
        frames.push(Frame { root: RootPose::new(frame.root.x, frame.root.y + dy, frame.root.theta), q: sol.q });
        report_frames.push(sol.residual);
    }
    let clip = MotionClip::new(robot.clone(), source.dt, frames)?.with_effector_tracks();
    let n = report_frames.len().max(1) as f64;
    let report = RetargetReport {
        mean_tracking_error: report_frames.iter().map(|r| r.tracking_error).sum::<f64>() / n,
        max_tracking_error: report_frames.iter().map(|r| r.max_tracking_error).fold(0.0, f64::max),
        mean_iterations: report_frames.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        unconverged_frames: report_frames.iter().filter(|r| !r.converged).count(),
        frames: report_frames,
    };
    Ok((clip, report))
}

/// Retargets several clips, one clip per worker.
pub fn retarget_many(
    sources: &[MotionClip],
    robot: &Skeleton,
    cfg: &RetargetConfig,
    exec: Execution,
) -> Vec<Result<(MotionClip, RetargetReport), RetargetError>> {
    par::map(exec, sources, |c| retarget_clip(c, robot, cfg))
}
