//! Planar rigid-body dynamics in reduced coordinates.
//!
//! Generalized coordinates are `[x, y, θ, q…]` for a floating base and `[q…]`
//! for a pinned one. Every revolute coordinate (θ and each joint) rotates its
//! whole subtree about its origin, so with `ẑ × u = (−u_y, u_x)` the velocity
//! of a point `p` is `v = [ẋ, ẏ] + Σ_j q̇_j ẑ × (p − o_j)` over the chain of
//! `p`. The mass matrix is assembled from composite bodies and the bias
//! forces come from a recursive Newton-Euler pass.

use crate::motion::{FkResult, LinkPoint, RootPose, Skeleton};

/// `u × v` (scalar z-component).
#[inline]
pub(crate) fn cross(u: [f64; 2], v: [f64; 2]) -> f64 {
    u[0] * v[1] - u[1] * v[0]
}

/// `ẑ × u`.
#[inline]
pub(crate) fn perp(u: [f64; 2]) -> [f64; 2] {
    [-u[1], u[0]]
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Mass, centre of mass and rotational inertia about that centre.
#[derive(Clone, Copy, Debug, Default)]
struct Composite {
    m: f64,
    c: [f64; 2],
    i: f64,
}

impl Composite {
    fn merge(self, o: Composite) -> Composite {
        let m = self.m + o.m;
        if m <= 0.0 {
            return Composite { m: 0.0, c: self.c, i: self.i + o.i };
        }
        let c = [(self.m * self.c[0] + o.m * o.c[0]) / m, (self.m * self.c[1] + o.m * o.c[1]) / m];
        let d1 = sub(self.c, c);
        let d2 = sub(o.c, c);
        Composite { m, c, i: self.i + self.m * dot(d1, d1) + o.i + o.m * dot(d2, d2) }
    }
}

/// Positions derived from one configuration.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub root: RootPose,
    pub fk: FkResult,
    pub link_com: Vec<[f64; 2]>,
    pub base_com: [f64; 2],
    /// Offset of the first joint coordinate: 3 for a floating base, else 0.
    pub offset: usize,
    pub dofs: usize,
}

impl Kinematics {
    pub fn new(sk: &Skeleton, root: &RootPose, q: &[f64]) -> Self {
        let fk = sk.fk_unchecked(root, q);
        let link_com = sk
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (s, e) = (fk.link_start[i], fk.link_end[i]);
                [s[0] + l.com * (e[0] - s[0]), s[1] + l.com * (e[1] - s[1])]
            })
            .collect();
        let axis = root.theta + std::f64::consts::FRAC_PI_2;
        let d = sk.base.com * sk.base.length;
        let base_com = [root.x + d * axis.cos(), root.y + d * axis.sin()];
        let offset = if sk.fixed_base { 0 } else { 3 };
        Self { root: *root, fk, link_com, base_com, offset, dofs: offset + sk.links.len() }
    }

    pub fn root_xy(&self) -> [f64; 2] {
        [self.root.x, self.root.y]
    }

    /// World position of a link point.
    pub fn point(&self, p: &LinkPoint) -> [f64; 2] {
        self.fk.point(p)
    }

    /// Linear Jacobian (`2 × dofs`, as two rows) of a world point rigidly
    /// attached to `link`, or to the base when `link` is `None`.
    pub fn point_jacobian(&self, sk: &Skeleton, link: Option<usize>, p: [f64; 2]) -> [Vec<f64>; 2] {
        let mut jx = vec![0.0; self.dofs];
        let mut jy = vec![0.0; self.dofs];
        if self.offset == 3 {
            jx[0] = 1.0;
            jy[1] = 1.0;
            let c = perp(sub(p, self.root_xy()));
            jx[2] = c[0];
            jy[2] = c[1];
        }
        if let Some(l) = link {
            for j in sk.chain(l) {
                let c = perp(sub(p, self.fk.link_start[j]));
                jx[self.offset + j] = c[0];
                jy[self.offset + j] = c[1];
            }
        }
        [jx, jy]
    }

    /// Generalized force of a world force `f` applied at point `p` on `link`.
    pub fn apply_force(&self, sk: &Skeleton, link: Option<usize>, p: [f64; 2], f: [f64; 2], tau: &mut [f64]) {
        if self.offset == 3 {
            tau[0] += f[0];
            tau[1] += f[1];
            tau[2] += cross(sub(p, self.root_xy()), f);
        }
        if let Some(l) = link {
            let mut cur = Some(l);
            while let Some(j) = cur {
                tau[self.offset + j] += cross(sub(p, self.fk.link_start[j]), f);
                cur = sk.links[j].parent;
            }
        }
    }
}

/// Composite body of every subtree, plus the whole system for a floating
/// base (base included).
fn composites(sk: &Skeleton, kin: &Kinematics) -> (Vec<Composite>, Composite) {
    let n = sk.links.len();
    let mut comp: Vec<Composite> =
        sk.links.iter().enumerate().map(|(i, l)| Composite { m: l.mass, c: kin.link_com[i], i: l.inertia }).collect();
    for i in (0..n).rev() {
        if let Some(p) = sk.links[i].parent {
            comp[p] = comp[p].merge(comp[i]);
        }
    }
    let mut total = Composite { m: sk.base.mass, c: kin.base_com, i: sk.base.inertia };
    for (i, l) in sk.links.iter().enumerate() {
        if l.parent.is_none() {
            total = total.merge(comp[i]);
        }
    }
    (comp, total)
}

/// Mass matrix (row-major `dofs × dofs`) from composite rigid bodies.
///
/// For joints `j` (ancestor or equal) and `i` with composite subtree `C(i)`:
/// `M_ji = I_C(i) + m_C(i) (c_C(i) − o_j)·(c_C(i) − o_i)`.
pub fn mass_matrix(sk: &Skeleton, kin: &Kinematics) -> Vec<f64> {
    let n = sk.links.len();
    let dofs = kin.dofs;
    let off = kin.offset;
    let (comp, total) = composites(sk, kin);
    let mut m = vec![0.0; dofs * dofs];
    for i in 0..n {
        let oi = kin.fk.link_start[i];
        let ci = comp[i];
        let mut cur = Some(i);
        while let Some(j) = cur {
            let oj = kin.fk.link_start[j];
            let v = ci.i + ci.m * dot(sub(ci.c, oj), sub(ci.c, oi));
            m[(off + j) * dofs + off + i] = v;
            m[(off + i) * dofs + off + j] = v;
            cur = sk.links[j].parent;
        }
    }
    if off == 3 {
        let root = kin.root_xy();
        let r = sub(total.c, root);
        m[0] = total.m;
        m[dofs + 1] = total.m;
        m[2] = -total.m * r[1];
        m[2 * dofs] = m[2];
        m[dofs + 2] = total.m * r[0];
        m[2 * dofs + 1] = m[dofs + 2];
        m[2 * dofs + 2] = total.i + total.m * dot(r, r);
        for i in 0..n {
            let ci = comp[i];
            let d = sub(ci.c, kin.fk.link_start[i]);
            let (x, y, t) = (-ci.m * d[1], ci.m * d[0], ci.i + ci.m * dot(sub(ci.c, root), d));
            for (row, v) in [(0, x), (1, y), (2, t)] {
                m[row * dofs + off + i] = v;
                m[(off + i) * dofs + row] = v;
            }
        }
    }
    m
}

/// Total linear momentum of a floating-base system (zero for a pinned one).
pub fn linear_momentum(sk: &Skeleton, kin: &Kinematics, qd: &[f64]) -> [f64; 2] {
    if kin.offset == 0 {
        return [0.0, 0.0];
    }
    let (comp, total) = composites(sk, kin);
    let r = sub(total.c, kin.root_xy());
    let mut p = [total.m * (qd[0] - qd[2] * r[1]), total.m * (qd[1] + qd[2] * r[0])];
    for (i, ci) in comp.iter().enumerate() {
        let d = sub(ci.c, kin.fk.link_start[i]);
        p[0] -= ci.m * d[1] * qd[3 + i];
        p[1] += ci.m * d[0] * qd[3 + i];
    }
    p
}

/// Total mass of the moving bodies.
pub fn system_mass(sk: &Skeleton, kin: &Kinematics) -> f64 {
    let links: f64 = sk.links.iter().map(|l| l.mass).sum();
    if kin.offset == 3 {
        links + sk.base.mass
    } else {
        links
    }
}

/// Inverse dynamics: generalized forces needed to realize `qdd` at
/// (`q`, `qd`) under gravity `g` [m/s², pointing down]. With `qdd = 0` this is
/// the bias vector `C(q, q̇) q̇ + g(q)`.
pub fn inverse_dynamics(sk: &Skeleton, kin: &Kinematics, qd: &[f64], qdd: &[f64], g: f64) -> Vec<f64> {
    let n = sk.links.len();
    let off = kin.offset;
    let root = kin.root_xy();
    let (a_root, w_base, al_base) = if off == 3 { ([qdd[0], qdd[1]], qd[2], qdd[2]) } else { ([0.0, 0.0], 0.0, 0.0) };
    let grav = [0.0, -g];
    let accel = |a0: [f64; 2], o: [f64; 2], p: [f64; 2], w: f64, al: f64| -> [f64; 2] {
        let r = sub(p, o);
        let t = perp(r);
        [a0[0] + al * t[0] - w * w * r[0], a0[1] + al * t[1] - w * w * r[1]]
    };

    let mut w = vec![0.0; n];
    let mut al = vec![0.0; n];
    let mut a_end = vec![[0.0; 2]; n];
    let mut f = vec![[0.0; 2]; n];
    let mut nn = vec![0.0; n];
    for i in 0..n {
        let l = &sk.links[i];
        let s = kin.fk.link_start[i];
        let (a_s, wp, alp) = match l.parent {
            None => (accel(a_root, root, s, w_base, al_base), w_base, al_base),
            Some(p) => (a_end[p], w[p], al[p]),
        };
        w[i] = wp + qd[off + i];
        al[i] = alp + qdd[off + i];
        a_end[i] = accel(a_s, s, kin.fk.link_end[i], w[i], al[i]);
        let a_c = accel(a_s, s, kin.link_com[i], w[i], al[i]);
        f[i] = [l.mass * (a_c[0] - grav[0]), l.mass * (a_c[1] - grav[1])];
        nn[i] = l.inertia * al[i];
    }

    // Backward pass: F accumulates subtree force, N subtree moment about o_i.
    let mut big_f = f.clone();
    let mut big_n: Vec<f64> = (0..n).map(|i| nn[i] + cross(sub(kin.link_com[i], kin.fk.link_start[i]), f[i])).collect();
    let mut tau = vec![0.0; kin.dofs];
    for i in (0..n).rev() {
        tau[off + i] = big_n[i];
        if let Some(p) = sk.links[i].parent {
            let r = sub(kin.fk.link_start[i], kin.fk.link_start[p]);
            big_n[p] += big_n[i] + cross(r, big_f[i]);
            big_f[p][0] += big_f[i][0];
            big_f[p][1] += big_f[i][1];
        }
    }
    if off == 3 {
        let a_b = accel(a_root, root, kin.base_com, w_base, al_base);
        let fb = [sk.base.mass * (a_b[0] - grav[0]), sk.base.mass * (a_b[1] - grav[1])];
        let mut ft = fb;
        let mut nt = sk.base.inertia * al_base + cross(sub(kin.base_com, root), fb);
        for i in 0..n {
            if sk.links[i].parent.is_none() {
                ft[0] += big_f[i][0];
                ft[1] += big_f[i][1];
                nt += big_n[i] + cross(sub(kin.fk.link_start[i], root), big_f[i]);
            }
        }
        tau[0] = ft[0];
        tau[1] = ft[1];
        tau[2] = nt;
    }
    tau
}

/// Kinetic energy `½ q̇ᵀ M q̇`.
pub fn kinetic_energy(mass: &[f64], qd: &[f64]) -> f64 {
    let n = qd.len();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            e += qd[i] * mass[i * n + j] * qd[j];
        }
    }
    0.5 * e
}

/// Gravitational potential `Σ m g y_com`.
pub fn potential_energy(sk: &Skeleton, kin: &Kinematics, g: f64) -> f64 {
    let links: f64 = sk.links.iter().zip(&kin.link_com).map(|(l, c)| l.mass * g * c[1]).sum();
    let base = if kin.offset == 3 { sk.base.mass * g * kin.base_com[1] } else { 0.0 };
    links + base
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mass matrix as Σ m Jᵀ J + I Jωᵀ Jω, body by body.
    fn brute_mass(sk: &Skeleton, kin: &Kinematics) -> Vec<f64> {
        let d = kin.dofs;
        let mut m = vec![0.0; d * d];
        let mut add = |jx: &[f64], jy: &[f64], jw: &[f64], mass: f64, inertia: f64| {
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += mass * (jx[a] * jx[b] + jy[a] * jy[b]) + inertia * jw[a] * jw[b];
                }
            }
        };
        for (i, l) in sk.links.iter().enumerate() {
            let [jx, jy] = kin.point_jacobian(sk, Some(i), kin.link_com[i]);
            let mut jw = vec![0.0; d];
            if kin.offset == 3 {
                jw[2] = 1.0;
            }
            for j in sk.chain(i) {
                jw[kin.offset + j] = 1.0;
            }
            add(&jx, &jy, &jw, l.mass, l.inertia);
        }
        if kin.offset == 3 {
            let [jx, jy] = kin.point_jacobian(sk, None, kin.base_com);
            let mut jw = vec![0.0; d];
            jw[2] = 1.0;
            add(&jx, &jy, &jw, sk.base.mass, sk.base.inertia);
        }
        m
    }

    fn random_state(sk: &Skeleton, rng: &mut ChaCha8Rng) -> (RootPose, Vec<f64>, Vec<f64>) {
        let root = RootPose::new(rng.random_range(-1.0..1.0), rng.random_range(0.5..1.0), rng.random_range(-1.0..1.0));
        let q: Vec<f64> = sk.links.iter().map(|l| rng.random_range(l.limits[0]..l.limits[1])).collect();
        let dofs = q.len() + if sk.fixed_base { 0 } else { 3 };
        let qd = (0..dofs).map(|_| rng.random_range(-2.0..2.0)).collect();
        (root, q, qd)
    }

    #[test]
    fn composite_mass_matrix_matches_jacobian_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sk in [Skeleton::robot_d(), Skeleton::human9(), Skeleton::planar_chain(&[1.0, 0.7, 0.4], &[1.0, 2.0, 0.5])]
        {
            for _ in 0..20 {
                let (root, q, _) = random_state(&sk, &mut rng);
                let kin = Kinematics::new(&sk, &root, &q);
                let a = mass_matrix(&sk, &kin);
                let b = brute_mass(&sk, &kin);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-10, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn inverse_dynamics_is_affine_in_acceleration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sk = Skeleton::robot_d();
        let (root, q, qd) = random_state(&sk, &mut rng);
        let kin = Kinematics::new(&sk, &root, &q);
        let m = mass_matrix(&sk, &kin);
        let d = kin.dofs;
        let qdd: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let full = inverse_dynamics(&sk, &kin, &qd, &qdd, 9.81);
        let bias = inverse_dynamics(&sk, &kin, &qd, &vec![0.0; d], 9.81);
        for r in 0..d {
            let mq: f64 = (0..d).map(|c| m[r * d + c] * qdd[c]).sum();
            assert!((full[r] - bias[r] - mq).abs() < 1e-9);
        }
    }

    #[test]
    fn gravity_bias_is_potential_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sk = Skeleton::robot_d();
        let (root, q, _) = random_state(&sk, &mut rng);
        let kin = Kinematics::new(&sk, &root, &q);
        let d = kin.dofs;
        let bias = inverse_dynamics(&sk, &kin, &vec![0.0; d], &vec![0.0; d], 9.81);
        let h = 1e-6;
        let energy = |dx: usize, s: f64| {
            let mut r = root.to_array();
            let mut qq = q.clone();
            if dx < 3 {
                r[dx] += s;
            } else {
                qq[dx - 3] += s;
            }
            let k = Kinematics::new(&sk, &RootPose { x: r[0], y: r[1], theta: r[2] }, &qq);
            potential_energy(&sk, &k, 9.81)
        };
        for i in 0..d {
            let fd = (energy(i, h) - energy(i, -h)) / (2.0 * h);
            assert!((fd - bias[i]).abs() < 1e-6, "dof {i}: {fd} vs {}", bias[i]);
        }
    }
}
