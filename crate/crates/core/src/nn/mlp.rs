use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer, `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron with a shared hidden activation and identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers, hidden }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear { weight: Tensor::zeros(&[w[0], w[1]]), bias: Tensor::zeros(&[w[1]]) })
            .collect();
        Self { layers, hidden }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.out_dim() {
                return Err(NnError::Shape(format!("layer {i} weight/bias disagree")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(NnError::Shape(format!("layer {i} input does not match layer {}", i - 1)));
            }
        }
        Ok(Self { layers, hidden })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Linear::out_dim)).collect()
    }

    /// Plain forward pass (no tape). Accepts `[in]` or `[n, in]`; the output
    /// keeps the input's rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.in_dim(), layer.out_dim());
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, &h, layer.weight.data(), &mut out);
            for row in out.chunks_mut(m) {
                for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
                if i != last {
                    row.iter_mut().for_each(|o| *o = self.hidden.apply(*o));
                }
            }
            h = out;
        }
        let m = self.output_dim();
        if x.shape().len() == 1 {
            Ok(Tensor::vector(h))
        } else {
            Tensor::matrix(n, m, h)
        }
    }

    /// Records the parameters on `tape` as leaves, in `w0, b0, w1, b1, …` order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).map(|t| tape.leaf(t)).collect()
    }

    /// Forward pass on a tape using parameters previously returned by [`Mlp::bind`].
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        debug_assert_eq!(params.len(), 2 * self.layers.len());
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            let z = tape.matmul(h, params[2 * i]);
            let z = tape.add_row(z, params[2 * i + 1]);
            h = if i == last { z } else { self.hidden.record(tape, z) };
        }
        h
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// `∇ₓ f(x)` of a scalar-output network. For a batch, row `i` of the
    /// result is the gradient at row `i` of `x`.
    pub fn input_gradient(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if self.output_dim() != 1 {
            return Err(NnError::Contract(format!(
                "input gradient needs a scalar-output network, output dim is {}",
                self.output_dim()
            )));
        }
        if x.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let xm = Tensor::matrix(x.rows(), x.cols(), x.data().to_vec())?;
        let xv = tape.leaf(xm);
        let y = self.forward_tape(&mut tape, &params, xv);
        let s = tape.sum(y);
        let g = tape.backward(s)?.get(xv);
        g.reshape(x.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}
