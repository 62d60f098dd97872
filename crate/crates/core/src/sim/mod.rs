//! Planar articulated-body simulator: PD-driven joints, penalty ground
//! contact, virtual rods, observation assembly and domain randomization.

pub mod dynamics;
mod observe;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{LinkPoint, RootPose, Skeleton};
use crate::retarget::solve_spd;
use dynamics::{inverse_dynamics, kinetic_energy, linear_momentum, mass_matrix, potential_energy, Kinematics};

pub use observe::{build_observation, disc_features, disc_layout, ObsLayout, ObsSlice};

#[derive(Debug, Error, Clone)]
pub enum SimError {
    #[error("sim config: {0}")]
    Config(String),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("simulation diverged at t={time:.4}s")]
    Diverged { time: f64, last: Box<SimState> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Control step [s].
    pub dt: f64,
    pub substeps: usize,
    /// Nominal gravity magnitude [m/s²].
    pub gravity: f64,
    /// Per contact point [N/m].
    pub ground_stiffness: f64,
    /// Per contact point [N·s/m].
    pub ground_damping: f64,
    pub friction: f64,
    /// Viscous tangential coefficient [N·s/m], clipped to the friction cone.
    pub tangential_damping: f64,
    /// Default PD gains; per-link values in the skeleton take precedence.
    pub kp: f64,
    pub kd: f64,
    pub torque_limit: f64,
    /// Virtual rod stiffness [N/m].
    pub rod_stiffness: f64,
    pub obs_noise_std: f64,
    pub gravity_std: f64,
    pub action_noise_std: f64,
    /// Disables ground contact entirely (free-flight rigs).
    pub ground: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 200.0,
            substeps: 4,
            gravity: 9.81,
            ground_stiffness: 1e4,
            ground_damping: 300.0,
            friction: 1.0,
            tangential_damping: 2000.0,
            kp: 80.0,
            kd: 4.0,
            torque_limit: 100.0,
            rod_stiffness: 2000.0,
            obs_noise_std: 0.02,
            gravity_std: 0.4,
            action_noise_std: 0.02,
            ground: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1");
        }
        let nonneg = [
            self.ground_stiffness,
            self.ground_damping,
            self.friction,
            self.tangential_damping,
            self.kp,
            self.kd,
            self.torque_limit,
            self.rod_stiffness,
            self.obs_noise_std,
            self.gravity_std,
            self.action_noise_std,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("stiffness, damping, gains and stds must be finite and non-negative");
        }
        if !self.gravity.is_finite() {
            return bad("gravity must be finite");
        }
        Ok(())
    }

    /// Noise-free, passive variant (for oracle rigs).
    pub fn passive(mut self) -> Self {
        self.kp = 0.0;
        self.kd = 0.0;
        self.obs_noise_std = 0.0;
        self.gravity_std = 0.0;
        self.action_noise_std = 0.0;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub root: RootPose,
    /// `[ẋ, ẏ, θ̇]` of the root.
    pub root_vel: [f64; 3],
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// One flag per foot, in [`Simulator::feet`] order.
    pub contacts: Vec<bool>,
    pub time: f64,
}

impl SimState {
    pub fn is_finite(&self) -> bool {
        self.root.to_array().iter().chain(&self.root_vel).chain(&self.q).chain(&self.qd).all(|v| v.is_finite())
    }
}

/// Per-episode draws of the randomized quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub gravity: f64,
    pub obs_noise_std: f64,
    pub action_noise_std: f64,
}

impl EpisodeParams {
    pub fn nominal(cfg: &SimConfig) -> Self {
        Self { gravity: cfg.gravity, obs_noise_std: 0.0, action_noise_std: 0.0 }
    }
}

/// Gravity is perturbed once per episode; observation and action noise
/// levels are carried along for per-step use.
pub fn randomize_episode<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> EpisodeParams {
    let gravity = if cfg.gravity_std > 0.0 {
        Normal::new(cfg.gravity, cfg.gravity_std).expect("finite std").sample(rng)
    } else {
        cfg.gravity
    };
    EpisodeParams { gravity, obs_noise_std: cfg.obs_noise_std, action_noise_std: cfg.action_noise_std }
}

/// `τ = kp (target − q) − kd q̇`, clamped to `±limit`.
pub fn pd_torque(target: &[f64], q: &[f64], qd: &[f64], kp: &[f64], kd: &[f64], limit: &[f64]) -> Vec<f64> {
    (0..q.len()).map(|i| (kp[i] * (target[i] - q[i]) - kd[i] * qd[i]).clamp(-limit[i], limit[i])).collect()
}

/// Ground reaction at one point: `(tangential, normal)` from penetration
/// depth and point velocity. The normal force is never adhesive and the
/// tangential force is viscous, clipped to the Coulomb cone.
pub fn contact_law(penetration: f64, v_t: f64, v_n: f64, cfg: &SimConfig) -> (f64, f64) {
    if penetration <= 0.0 {
        return (0.0, 0.0);
    }
    let n = (cfg.ground_stiffness * penetration + cfg.ground_damping * (-v_n).max(0.0)).max(0.0);
    let t = (-cfg.tangential_damping * v_t).clamp(-cfg.friction * n, cfg.friction * n);
    (t, n)
}

/// Summed ground reaction on one foot.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FootForce {
    pub foot: String,
    pub tangential: f64,
    pub normal: f64,
    pub in_contact: bool,
}

#[derive(Clone, Debug)]
struct Gains {
    kp: Vec<f64>,
    kd: Vec<f64>,
    limit: Vec<f64>,
}

/// A skeleton bound to a config, with the derived constants precomputed.
#[derive(Clone, Debug)]
pub struct Simulator {
    skeleton: Skeleton,
    config: SimConfig,
    gains: Gains,
    rod_rest: Vec<f64>,
    feet: Vec<String>,
    foot_of_contact: Vec<usize>,
}

impl Simulator {
    pub fn new(skeleton: Skeleton, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        skeleton.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let gains = Gains {
            kp: skeleton.links.iter().map(|l| if config.kp == 0.0 { 0.0 } else { l.kp.unwrap_or(config.kp) }).collect(),
            kd: skeleton.links.iter().map(|l| if config.kd == 0.0 { 0.0 } else { l.kd.unwrap_or(config.kd) }).collect(),
            limit: skeleton.links.iter().map(|l| l.torque_limit.unwrap_or(config.torque_limit)).collect(),
        };
        let rod_rest = skeleton.rod_rest_lengths();
        let mut feet: Vec<String> = Vec::new();
        let mut foot_of_contact = Vec::new();
        for c in &skeleton.contacts {
            let idx = match feet.iter().position(|f| *f == c.foot) {
                Some(i) => i,
                None => {
                    feet.push(c.foot.clone());
                    feet.len() - 1
                }
            };
            foot_of_contact.push(idx);
        }
        Ok(Self { skeleton, config, gains, rod_rest, feet, foot_of_contact })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn feet(&self) -> &[String] {
        &self.feet
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.links.len()
    }

    /// Effective per-joint gains `(kp, kd, limit)`.
    pub fn gains(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.gains.kp, &self.gains.kd, &self.gains.limit)
    }

    /// State at rest, standing on the ground (or at the pin).
    pub fn rest_state(&self) -> SimState {
        let root = if self.skeleton.fixed_base {
            RootPose::default()
        } else {
            RootPose::new(0.0, self.skeleton.rest_root_height(), 0.0)
        };
        self.state(root, [0.0; 3], self.skeleton.rest_q(), vec![0.0; self.joint_count()])
    }

    /// Builds a state, clamping `q` into the limits and refreshing the
    /// contact flags.
    pub fn state(&self, root: RootPose, root_vel: [f64; 3], mut q: Vec<f64>, qd: Vec<f64>) -> SimState {
        self.skeleton.clamp_q(&mut q);
        let root_vel = if self.skeleton.fixed_base { [0.0; 3] } else { root_vel };
        let mut s = SimState { root, root_vel, q, qd, contacts: vec![false; self.feet.len()], time: 0.0 };
        s.contacts = self.contact_flags(&s);
        s
    }

    fn velocity(&self, s: &SimState) -> Vec<f64> {
        if self.skeleton.fixed_base {
            s.qd.clone()
        } else {
            s.root_vel.iter().chain(&s.qd).copied().collect()
        }
    }

    pub fn kinematics(&self, s: &SimState) -> Kinematics {
        Kinematics::new(&self.skeleton, &s.root, &s.q)
    }

    fn contact_flags(&self, s: &SimState) -> Vec<bool> {
        let mut flags = vec![false; self.feet.len()];
        if !self.config.ground {
            return flags;
        }
        let fk = self.skeleton.fk_unchecked(&s.root, &s.q);
        for (c, &f) in self.skeleton.contacts.iter().zip(&self.foot_of_contact) {
            if fk.point(&c.point)[1] < 0.0 {
                flags[f] = true;
            }
        }
        flags
    }

    /// Kinetic plus gravitational potential energy under gravity `g`.
    pub fn energy(&self, s: &SimState, g: f64) -> f64 {
        let kin = self.kinematics(s);
        let m = mass_matrix(&self.skeleton, &kin);
        kinetic_energy(&m, &self.velocity(s)) + potential_energy(&self.skeleton, &kin, g)
    }

    pub fn linear_momentum(&self, s: &SimState) -> [f64; 2] {
        linear_momentum(&self.skeleton, &self.kinematics(s), &self.velocity(s))
    }

    /// Ground reaction summed per foot at the current state.
    pub fn contact_forces(&self, s: &SimState) -> Vec<FootForce> {
        let mut out: Vec<FootForce> = self
            .feet
            .iter()
            .map(|f| FootForce { foot: f.clone(), tangential: 0.0, normal: 0.0, in_contact: false })
            .collect();
        if !self.config.ground {
            return out;
        }
        let kin = self.kinematics(s);
        let qd = self.velocity(s);
        for (c, &f) in self.skeleton.contacts.iter().zip(&self.foot_of_contact) {
            let p = kin.point(&c.point);
            if p[1] >= 0.0 {
                continue;
            }
            let v = point_velocity(&self.skeleton, &kin, &c.point, p, &qd);
            let (t, n) = contact_law(-p[1], v[0], v[1], &self.config);
            out[f].tangential += t;
            out[f].normal += n;
            out[f].in_contact = true;
        }
        out
    }

    /// Joint torques produced by the virtual rods: `−∂/∂q ½ k (d − d⁰)²`.
    pub fn rod_forces(&self, s: &SimState) -> Vec<f64> {
        let kin = self.kinematics(s);
        let mut tau = vec![0.0; kin.dofs];
        for (rod, &rest) in self.skeleton.rods.iter().zip(&self.rod_rest) {
            let (len, jd) = rod_geometry(&self.skeleton, &kin, &rod.a, &rod.b);
            let f = -self.config.rod_stiffness * (len - rest);
            for (t, j) in tau.iter_mut().zip(&jd) {
                *t += f * j;
            }
        }
        tau.split_off(kin.offset)
    }

    /// Advances one control step towards the PD targets `target_q`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &SimState,
        target_q: &[f64],
        episode: &EpisodeParams,
        rng: &mut R,
    ) -> Result<SimState, SimError> {
        let n = self.joint_count();
        if target_q.len() != n {
            return Err(SimError::Dimension { expected: n, got: target_q.len() });
        }
        let noisy;
        let target = if episode.action_noise_std > 0.0 {
            let dist = Normal::new(0.0, episode.action_noise_std).expect("finite std");
            noisy = target_q.iter().map(|t| t + dist.sample(rng)).collect::<Vec<_>>();
            &noisy[..]
        } else {
            target_q
        };
        let h = self.config.dt / self.config.substeps as f64;
        let mut s = state.clone();
        for _ in 0..self.config.substeps {
            if !self.substep(&mut s, target, episode.gravity, h) {
                return Err(SimError::Diverged { time: state.time, last: Box::new(state.clone()) });
            }
        }
        s.time = state.time + self.config.dt;
        s.contacts = self.contact_flags(&s);
        if !s.is_finite() {
            return Err(SimError::Diverged { time: state.time, last: Box::new(state.clone()) });
        }
        Ok(s)
    }

    /// One semi-implicit Euler substep. Stiff terms (PD, ground springs and
    /// dampers, rods) are linearized at the end of the step, so the solve is
    /// `(M + hD + h²K) Q̈ = f − h K Q̇` with `f` the forces at the current state.
    fn substep(&self, s: &mut SimState, target: &[f64], g: f64, h: f64) -> bool {
        let sk = &self.skeleton;
        let cfg = &self.config;
        let kin = self.kinematics(s);
        let d = kin.dofs;
        let off = kin.offset;
        let qd = self.velocity(s);
        let m = mass_matrix(sk, &kin);
        let bias = inverse_dynamics(sk, &kin, &qd, &vec![0.0; d], g);
        let mut a = m.clone();
        let mut rhs: Vec<f64> = bias.iter().map(|b| -b).collect();

        for i in 0..sk.links.len() {
            let (kp, kd, lim) = (self.gains.kp[i], self.gains.kd[i], self.gains.limit[i]);
            let tau = kp * (target[i] - s.q[i]) - kd * s.qd[i];
            let k = off + i;
            if tau.abs() <= lim {
                rhs[k] += tau - h * kp * s.qd[i];
                a[k * d + k] += h * kd + h * h * kp;
            } else {
                rhs[k] += lim.copysign(tau);
            }
        }

        let add_outer = |a: &mut [f64], row: &[f64], w: f64| {
            for (r, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (c, &y) in row.iter().enumerate() {
                    a[r * d + c] += w * x * y;
                }
            }
        };
        let dotv = |row: &[f64], v: &[f64]| row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();

        if cfg.ground {
            for c in &sk.contacts {
                let p = kin.point(&c.point);
                if p[1] >= 0.0 {
                    continue;
                }
                let [jx, jy] = kin.point_jacobian(sk, Some(c.point.link), p);
                let (vx, vy) = (dotv(&jx, &qd), dotv(&jy, &qd));
                let (_, n) = contact_law(-p[1], vx, vy, cfg);
                let k = cfg.ground_stiffness;
                let damp = if vy < 0.0 { cfg.ground_damping } else { 0.0 };
                let fy = n - k * h * vy;
                for (r, j) in rhs.iter_mut().zip(&jy) {
                    *r += j * fy;
                }
                add_outer(&mut a, &jy, h * h * k + h * damp);
                let viscous = -cfg.tangential_damping * vx;
                if viscous.abs() <= cfg.friction * n {
                    for (r, j) in rhs.iter_mut().zip(&jx) {
                        *r += j * viscous;
                    }
                    add_outer(&mut a, &jx, h * cfg.tangential_damping);
                } else {
                    let ft = (cfg.friction * n).copysign(viscous);
                    for (r, j) in rhs.iter_mut().zip(&jx) {
                        *r += j * ft;
                    }
                }
            }
        }

        if cfg.rod_stiffness > 0.0 {
            let k = cfg.rod_stiffness;
            for (rod, &rest) in sk.rods.iter().zip(&self.rod_rest) {
                let (len, jd) = rod_geometry(sk, &kin, &rod.a, &rod.b);
                let f = -k * (len - rest) - k * h * dotv(&jd, &qd);
                for (r, j) in rhs.iter_mut().zip(&jd) {
                    *r += j * f;
                }
                add_outer(&mut a, &jd, h * h * k);
            }
        }

        let Some(qdd) = solve_spd(&a, &rhs, d) else { return false };
        if qdd.iter().any(|v| !v.is_finite()) {
            return false;
        }

        // Joints and heading first.
        for i in 0..sk.links.len() {
            let v = s.qd[i] + h * qdd[off + i];
            let mut q = s.q[i] + h * v;
            let mut v = v;
            let [lo, hi] = sk.links[i].limits;
            if q < lo {
                q = lo;
                v = v.max(0.0);
            } else if q > hi {
                q = hi;
                v = v.min(0.0);
            }
            s.q[i] = q;
            s.qd[i] = v;
        }
        if off == 3 {
            // Translational velocity is chosen so that total linear momentum
            // advances by exactly h times the applied force, which keeps the
            // free-flight momentum constant regardless of how the shape moves.
            // The bias rows hold velocity-product terms plus the weight; the
            // weight is an external force, so it is taken back out.
            let mtot = dynamics::system_mass(sk, &kin);
            let mut mq: Vec<f64> =
                (0..2).map(|r| (0..d).map(|c| m[r * d + c] * qdd[c]).sum::<f64>() + bias[r]).collect();
            mq[1] -= mtot * g;
            let p0 = linear_momentum(sk, &kin, &qd);
            let target_p = [p0[0] + h * mq[0], p0[1] + h * mq[1]];
            let w = s.root_vel[2] + h * qdd[2];
            let theta = s.root.theta + h * w;
            let probe = RootPose { x: 0.0, y: 0.0, theta };
            let kin1 = Kinematics::new(sk, &probe, &s.q);
            let mut v1: Vec<f64> = vec![0.0, 0.0, w];
            v1.extend_from_slice(&s.qd);
            let p_shape = linear_momentum(sk, &kin1, &v1);
            let vx = (target_p[0] - p_shape[0]) / mtot;
            let vy = (target_p[1] - p_shape[1]) / mtot;
            s.root = RootPose::new(s.root.x + h * vx, s.root.y + h * vy, theta);
            s.root_vel = [vx, vy, w];
        }
        s.is_finite()
    }

    /// Writes one JSON object per state.
    pub fn write_trajectory(path: &Path, states: &[SimState]) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in states {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}

fn point_velocity(sk: &Skeleton, kin: &Kinematics, lp: &LinkPoint, p: [f64; 2], qd: &[f64]) -> [f64; 2] {
    let [jx, jy] = kin.point_jacobian(sk, Some(lp.link), p);
    [jx.iter().zip(qd).map(|(a, b)| a * b).sum(), jy.iter().zip(qd).map(|(a, b)| a * b).sum()]
}

/// Rod length and its gradient with respect to the generalized coordinates.
fn rod_geometry(sk: &Skeleton, kin: &Kinematics, a: &LinkPoint, b: &LinkPoint) -> (f64, Vec<f64>) {
    let pa = kin.point(a);
    let pb = kin.point(b);
    let diff = [pa[0] - pb[0], pa[1] - pb[1]];
    let len = diff[0].hypot(diff[1]);
    let u = if len > 0.0 { [diff[0] / len, diff[1] / len] } else { [0.0, 0.0] };
    let [ax, ay] = kin.point_jacobian(sk, Some(a.link), pa);
    let [bx, by] = kin.point_jacobian(sk, Some(b.link), pb);
    let jd = (0..kin.dofs).map(|i| u[0] * (ax[i] - bx[i]) + u[1] * (ay[i] - by[i])).collect();
    (len, jd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pd_examples() {
        assert_eq!(pd_torque(&[0.3], &[0.3], &[0.0], &[80.0], &[4.0], &[100.0]), vec![0.0]);
        assert_eq!(pd_torque(&[1.0], &[0.0], &[0.0], &[10.0], &[0.0], &[100.0]), vec![10.0]);
        assert_eq!(pd_torque(&[1.0], &[0.0], &[0.0], &[1e6], &[0.0], &[55.0]), vec![55.0]);
    }

    #[test]
    fn contact_law_examples() {
        let cfg = SimConfig::default();
        assert_eq!(contact_law(-0.01, 1.0, -1.0, &cfg), (0.0, 0.0));
        let (_, n) = contact_law(0.01, 0.0, 0.0, &cfg);
        assert!((n - 100.0).abs() < 1e-12);
        let (t, n) = contact_law(0.01, 5.0, 0.0, &cfg);
        assert!(cfg.tangential_damping * 5.0 > cfg.friction * n);
        assert_eq!(t.abs(), cfg.friction * n);
        // Separating velocity never makes the normal force adhesive.
        assert_eq!(contact_law(0.01, 0.0, 50.0, &cfg).1, 100.0);
    }

    #[test]
    fn rest_pose_has_no_rod_torque() {
        let sim = Simulator::new(Skeleton::robot_d(), SimConfig::default()).unwrap();
        let s = sim.rest_state();
        assert!(sim.rod_forces(&s).iter().all(|t| t.abs() < 1e-9));
    }

    #[test]
    fn robot_stands_under_pd() {
        let sim = Simulator::new(Skeleton::robot_d(), SimConfig::default()).unwrap();
        let mut s = sim.rest_state();
        let target = sim.skeleton().rest_q();
        let ep = EpisodeParams::nominal(sim.config());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..400 {
            s = sim.step(&s, &target, &ep, &mut rng).unwrap();
        }
        let h0 = sim.skeleton().rest_root_height();
        assert!((s.root.y - h0).abs() < 0.1, "root height {} vs {h0}", s.root.y);
        assert!(s.root.theta.abs() < 0.2);
        assert!(s.contacts.iter().all(|c| *c));
    }
}
