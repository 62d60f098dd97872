//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`]
//! walks the records in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes recorded before it.

use super::tensor::{gemm, gemm_strided, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    SmoothL1(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; only the
    /// caller decides which adjoints it reads back.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "{what}: operand shapes differ");
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        assert_eq!(k, vb.rows(), "matmul: inner dimensions differ");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, va.data(), vb.data(), &mut out);
        let t = Tensor::matrix(n, m, out).expect("shape");
        self.push(t, Op::MatMul(a, b))
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = va.cols();
        assert_eq!(vb.len(), m, "add_row: width mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(vb.data()).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(t, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the row vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = va.cols();
        assert_eq!(vb.len(), m, "mul_row: width mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(vb.data()).for_each(|(x, y)| *x *= y);
        }
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(t, Op::MulRow(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the adjoint to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "min");
        self.zip_with(a, b, Op::Min(a, b), f64::min)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Square root. The adjoint at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Elementwise smooth-L1 (Huber with transition `delta`, scaled so the
    /// linear branch has unit slope).
    pub fn smooth_l1(&mut self, a: Var, delta: f64) -> Var {
        self.map(
            a,
            Op::SmoothL1(a, delta),
            |x| {
                if x.abs() < delta {
                    0.5 * x * x / delta
                } else {
                    x.abs() - 0.5 * delta
                }
            },
        )
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero wherever clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row sums of an `n×m` matrix, as an `n×1` matrix.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = (v.rows(), v.cols());
        let data = (0..n).map(|i| v.data()[i * m..(i + 1) * m].iter().sum()).collect();
        let t = Tensor::matrix(n, 1, data).expect("shape");
        self.push(t, Op::SumCols(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape: size mismatch");
        self.push(t, Op::Reshape(a))
    }

    /// Selects rows of `table` (`K×d`) by index, producing `n×d`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let v = self.value(table);
        let d = v.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::matrix(indices.len(), d, data).expect("shape");
        self.push(t, Op::GatherRows(table, indices.to_vec()))
    }

    /// Identity on values; blocks every adjoint flowing back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        shapes.truncate(self.nodes.len());
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                // dA = dC · Bᵀ
                let ga = slot(grads, *a, va.shape());
                gemm_strided(n, m, k, gd, (m as isize, 1), vb.data(), (1, m as isize), ga, 1.0);
                // dB = Aᵀ · dC
                let gb = slot(grads, *b, vb.shape());
                gemm_strided(k, n, m, va.data(), (1, k as isize), gd, (m as isize, 1), gb, 1.0);
            }
            Op::AddRow(a, b) => {
                let m = self.value(*a).cols();
                add_into(slot(grads, *a, self.value(*a).shape()), gd);
                let gb = slot(grads, *b, self.value(*b).shape());
                for row in gd.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let m = va.cols();
                let ga = slot(grads, *a, va.shape());
                for (grow, gr) in ga.chunks_mut(m).zip(gd.chunks(m)) {
                    for j in 0..m {
                        grow[j] += gr[j] * vb.data()[j];
                    }
                }
                let gb = slot(grads, *b, vb.shape());
                for (ar, gr) in va.data().chunks(m).zip(gd.chunks(m)) {
                    for j in 0..m {
                        gb[j] += gr[j] * ar[j];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, self.value(*a).shape()), gd);
                add_into(slot(grads, *b, self.value(*b).shape()), gd);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, self.value(*a).shape()), gd);
                let gb = slot(grads, *b, self.value(*b).shape());
                gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, self.value(*a).shape());
                for i in 0..gd.len() {
                    ga[i] += gd[i] * vb[i];
                }
                let gb = slot(grads, *b, self.value(*b).shape());
                for i in 0..gd.len() {
                    gb[i] += gd[i] * va[i];
                }
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mask: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                let ga = slot(grads, *a, self.value(*a).shape());
                for i in 0..gd.len() {
                    if mask[i] {
                        ga[i] += gd[i];
                    }
                }
                let gb = slot(grads, *b, self.value(*b).shape());
                for i in 0..gd.len() {
                    if !mask[i] {
                        gb[i] += gd[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, self.value(*a).shape());
                ga.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                add_into(slot(grads, *a, self.value(*a).shape()), gd);
            }
            Op::Tanh(a) => self.unary(*a, node, gd, grads, |_, y| 1.0 - y * y),
            Op::Relu(a) => self.unary(*a, node, gd, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Exp(a) => self.unary(*a, node, gd, grads, |_, y| y),
            Op::Square(a) => self.unary(*a, node, gd, grads, |x, _| 2.0 * x),
            Op::Sqrt(a) => self.unary(*a, node, gd, grads, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }),
            Op::Softplus(a) => self.unary(*a, node, gd, grads, |x, _| sigmoid(x)),
            Op::SmoothL1(a, delta) => {
                let d = *delta;
                self.unary(*a, node, gd, grads, move |x, _| if x.abs() < d { x / d } else { x.signum() })
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary(*a, node, gd, grads, move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                let ga = slot(grads, *a, self.value(*a).shape());
                ga.iter_mut().for_each(|x| *x += gd[0]);
            }
            Op::Mean(a) => {
                let ga = slot(grads, *a, self.value(*a).shape());
                let s = gd[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            Op::SumCols(a) => {
                let m = self.value(*a).cols();
                let ga = slot(grads, *a, self.value(*a).shape());
                for (row, g) in ga.chunks_mut(m).zip(gd) {
                    row.iter_mut().for_each(|x| *x += g);
                }
            }
            Op::GatherRows(t, idx) => {
                let d = self.value(*t).cols();
                let gt = slot(grads, *t, self.value(*t).shape());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gd[r * d + j];
                    }
                }
            }
        }
    }

    fn unary(&self, a: Var, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>], deriv: impl Fn(f64, f64) -> f64) {
        let x = self.value(a).data();
        let y = node.value.data();
        let ga = slot(grads, a, self.value(a).shape());
        for i in 0..gd.len() {
            ga[i] += gd[i] * deriv(x[i], y[i]);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `loss_fn` on a fresh tape with `params` as leaves and returns the
/// loss value together with one gradient per parameter.
pub fn grad<F>(params: &[&Tensor], loss_fn: F) -> Result<(f64, Vec<Tensor>), NnError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf((*p).clone())).collect();
    let loss = loss_fn(&mut tape, &vars);
    let mut g = tape.backward(loss)?;
    let value = tape.value(loss).item();
    Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn sum_gives_ones() {
        let w = v(&[0.3, -1.0, 2.0]);
        let (_, g) = grad(&[&w], |t, p| t.sum(p[0])).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let w = v(&[1.0, 2.0]);
        let (val, g) = grad(&[&w], |t, p| {
            let s = t.square(p[0]);
            t.sum(s)
        })
        .unwrap();
        assert_eq!(val, 5.0);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_cuts_one_branch() {
        let w = v(&[2.0]);
        let (_, g) = grad(&[&w], |t, p| {
            let s = t.stop_gradient(p[0]);
            let prod = t.mul(s, p[0]);
            t.sum(prod)
        })
        .unwrap();
        assert_eq!(g[0].data(), &[2.0]);
    }

    #[test]
    fn stop_gradient_commit_structure() {
        // ||sg(z) - c||² has no adjoint with respect to z.
        let z = v(&[0.5, -1.5]);
        let c = v(&[1.0, 1.0]);
        let (_, g) = grad(&[&z, &c], |t, p| {
            let s = t.stop_gradient(p[0]);
            let d = t.sub(s, p[1]);
            let sq = t.square(d);
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[1].data(), &[1.0, 5.0]);
    }

    #[test]
    fn nested_stop_gradient_is_stop_gradient() {
        let w = v(&[3.0]);
        let (val, g) = grad(&[&w], |t, p| {
            let a = t.stop_gradient(p[0]);
            let b = t.stop_gradient(a);
            let prod = t.mul(b, p[0]);
            t.sum(prod)
        })
        .unwrap();
        assert_eq!(val, 9.0);
        assert_eq!(g[0].data(), &[3.0]);
    }

    #[test]
    fn stop_gradient_forward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[0.1, 1e-300, -7.25, f64::MIN_POSITIVE]));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(NnError::Contract(_))));
    }

    #[test]
    fn gather_rows_scatters_back() {
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, g) = grad(&[&table], |t, p| {
            let rows = t.gather_rows(p[0], &[2, 0, 2]);
            t.sum(rows)
        })
        .unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn min_and_clamp_route_adjoints() {
        let a = v(&[1.0, 5.0]);
        let b = v(&[2.0, 3.0]);
        let (_, g) = grad(&[&a, &b], |t, p| {
            let m = t.min(p[0], p[1]);
            let c = t.clamp(m, 0.0, 2.5);
            t.sum(c)
        })
        .unwrap();
        assert_eq!(g[0].data(), &[1.0, 0.0]);
        // b wins the second slot but the clamp at 2.5 is active there.
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }
}
