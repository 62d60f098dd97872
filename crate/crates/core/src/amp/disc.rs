use rand::Rng;
use serde::{Deserialize, Serialize};

use super::amp_reward;
use crate::nn::{
    adam_step, clip_global_norm, sigmoid, Activation, AdamConfig, AdamState, Mlp, NnError, Tape, Tensor, Var,
};

/// Finite-difference step of the gradient penalty.
const GP_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscForm {
    /// Targets +1 (reference) and −1 (policy); the reward reads D directly.
    #[default]
    LeastSquares,
    /// Logistic loss; the reward reads `2σ(D) − 1`.
    Bce,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscLossTerms {
    pub reference: f64,
    pub policy: f64,
    pub gp: f64,
    pub total: f64,
}

/// Scores rows of normalized transitions `[f(s), f(s′)]`.
pub trait Scorer: Sync {
    fn score(&self, x: &Tensor) -> Vec<f64>;
    fn form(&self) -> DiscForm {
        DiscForm::LeastSquares
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub form: DiscForm,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], form: DiscForm, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, Activation::Relu, rng), form }
    }
}

impl Scorer for Discriminator {
    fn score(&self, x: &Tensor) -> Vec<f64> {
        self.net.forward(x).expect("discriminator input width").into_data()
    }

    fn form(&self) -> DiscForm {
        self.form
    }
}

/// Reward for one discriminator output.
pub fn disc_reward(d: f64, form: DiscForm) -> f64 {
    match form {
        DiscForm::LeastSquares => amp_reward(d),
        DiscForm::Bce => amp_reward(2.0 * sigmoid(d) - 1.0),
    }
}

/// Rows `x ± h·e_i` for every sample and input dimension.
fn perturbed(x: &Tensor, sign: f64) -> Tensor {
    let (b, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(b * d * d);
    for r in 0..b {
        for i in 0..d {
            let start = data.len();
            data.extend_from_slice(x.row(r));
            data[start + i] += sign * GP_STEP;
        }
    }
    Tensor::matrix(b * d, d, data).expect("shape")
}

/// Records the loss on `tape`; returns `(total, [reference, policy, gp])`.
fn record(
    tape: &mut Tape,
    net: &Mlp,
    params: &[Var],
    reference: &Tensor,
    policy: &Tensor,
    gp_rows: usize,
    w_gp: f64,
    form: DiscForm,
) -> (Var, [Var; 3]) {
    let xr = tape.leaf(reference.clone());
    let xp = tape.leaf(policy.clone());
    let dr = net.forward_tape(tape, params, xr);
    let dp = net.forward_tape(tape, params, xp);
    let (lr, lp) = match form {
        DiscForm::LeastSquares => {
            let a = tape.add_scalar(dr, -1.0);
            let a = tape.square(a);
            let b = tape.add_scalar(dp, 1.0);
            let b = tape.square(b);
            (tape.mean(a), tape.mean(b))
        }
        DiscForm::Bce => {
            let a = tape.neg(dr);
            let a = tape.softplus(a);
            let b = tape.softplus(dp);
            (tape.mean(a), tape.mean(b))
        }
    };
    let n = gp_rows.min(reference.rows());
    let gp = if n > 0 {
        let d = reference.cols();
        let head = Tensor::matrix(n, d, reference.data()[..n * d].to_vec()).expect("shape");
        let plus = tape.leaf(perturbed(&head, 1.0));
        let minus = tape.leaf(perturbed(&head, -1.0));
        let fp = net.forward_tape(tape, params, plus);
        let fm = net.forward_tape(tape, params, minus);
        let diff = tape.sub(fp, fm);
        let g = tape.scale(diff, 0.5 / GP_STEP);
        let g = tape.reshape(g, &[n, d]);
        let g2 = tape.square(g);
        let per = tape.sum_cols(g2);
        tape.mean(per)
    } else {
        tape.leaf(Tensor::scalar(0.0))
    };
    let sum = tape.add(lr, lp);
    let wgp = tape.scale(gp, w_gp);
    let total = tape.add(sum, wgp);
    (total, [lr, lp, gp])
}

/// `mean (D(ref) − 1)² + mean (D(pol) + 1)² + w_gp · GP` (least-squares form),
/// with GP the mean squared input-gradient norm over the first `gp_rows`
/// reference rows, each gradient taken by central differences.
pub fn discriminator_loss(
    net: &Mlp,
    reference: &Tensor,
    policy: &Tensor,
    w_gp: f64,
    gp_rows: usize,
    form: DiscForm,
) -> DiscLossTerms {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let (total, [r, p, g]) = record(&mut tape, net, &params, reference, policy, gp_rows, w_gp, form);
    DiscLossTerms {
        reference: tape.value(r).item(),
        policy: tape.value(p).item(),
        gp: tape.value(g).item(),
        total: tape.value(total).item(),
    }
}

/// One Adam step on the discriminator loss.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    disc: &mut Discriminator,
    state: &mut AdamState,
    lr: f64,
    reference: &Tensor,
    policy: &Tensor,
    w_gp: f64,
    gp_rows: usize,
    max_grad_norm: f64,
) -> Result<DiscLossTerms, NnError> {
    let mut tape = Tape::new();
    let params = disc.net.bind(&mut tape);
    let (total, [r, p, g]) = record(&mut tape, &disc.net, &params, reference, policy, gp_rows, w_gp, disc.form);
    let terms = DiscLossTerms {
        reference: tape.value(r).item(),
        policy: tape.value(p).item(),
        gp: tape.value(g).item(),
        total: tape.value(total).item(),
    };
    if !terms.total.is_finite() {
        return Err(NnError::NonFinite("discriminator loss".into()));
    }
    let mut grads = tape.backward(total)?;
    let mut gs: Vec<Tensor> = params.iter().map(|v| grads.take(*v)).collect();
    clip_global_norm(&mut gs, max_grad_norm);
    adam_step(&mut disc.net.params_mut(), &gs, state, &AdamConfig::with_lr(lr))?;
    Ok(terms)
}
