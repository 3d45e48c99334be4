//! Fixed-topology dense networks with analytic gradients.
//!
//! Parameters of an [`Mlp`] live in one flat vector (per layer: the weight
//! matrix row-major `out x in`, then the bias), so optimizers, target updates
//! and checkpoints all work on plain slices.

mod checkpoint;
mod optim;

pub use checkpoint::{read_mlp, write_mlp, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_norm, soft_update, OptimizerState};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFinite,
    #[error("tau must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_trace`] for a later backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `layers[l]` is the input to layer `l`; the last entry is the output.
    layers: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has an output")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn from_params(sizes: &[usize], hidden: Activation, output: Activation, params: Vec<f64>) -> Result<Self, NnError> {
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(NnError::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 2 == self.sizes.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.sizes[0] {
            return Err(NnError::DimensionMismatch {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let act = self.activation(l);
            cur = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    act.apply(bias[o] + dot(row, &cur))
                })
                .collect();
            off += n_in * n_out + n_out;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace, NnError> {
        self.check_input(x)?;
        let mut layers = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.sizes.len() - 1);
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let (wo, bo) = self.offsets(l);
            let input = layers.last().unwrap();
            let z: Vec<f64> = (0..n_out)
                .map(|o| self.params[bo + o] + dot(&self.params[wo + o * n_in..wo + (o + 1) * n_in], input))
                .collect();
            let act = self.activation(l);
            layers.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        Ok(Trace { layers, pre })
    }

    /// Bias plus the first-layer contribution of the leading `prefix.len()`
    /// inputs. Pair with [`Mlp::forward_from_partial`] when many inputs share
    /// the same prefix.
    pub fn partial_first_layer(&self, prefix: &[f64]) -> Result<Vec<f64>, NnError> {
        let (n_in, n_out) = (self.sizes[0], self.sizes[1]);
        if prefix.len() > n_in {
            return Err(NnError::DimensionMismatch {
                expected: n_in,
                got: prefix.len(),
            });
        }
        let (wo, bo) = self.offsets(0);
        Ok((0..n_out)
            .map(|o| self.params[bo + o] + dot(&self.params[wo + o * n_in..wo + o * n_in + prefix.len()], prefix))
            .collect())
    }

    /// Output for the input `prefix ‖ suffix`, given `partial_first_layer(prefix)`.
    pub fn forward_from_partial(&self, partial: &[f64], suffix: &[f64]) -> Result<Vec<f64>, NnError> {
        let (n_in, n_out) = (self.sizes[0], self.sizes[1]);
        if partial.len() != n_out || suffix.len() > n_in {
            return Err(NnError::DimensionMismatch {
                expected: n_out,
                got: partial.len(),
            });
        }
        let (wo, _) = self.offsets(0);
        let start = n_in - suffix.len();
        let act = self.activation(0);
        let mut cur: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &self.params[wo + o * n_in + start..wo + (o + 1) * n_in];
                let mut z = partial[o];
                for (w, x) in row.iter().zip(suffix) {
                    if *x != 0.0 {
                        z += w * x;
                    }
                }
                act.apply(z)
            })
            .collect();
        let mut off = n_in * n_out + n_out;
        for (l, w) in self.sizes.windows(2).enumerate().skip(1) {
            let (n_in, n_out) = (w[0], w[1]);
            let act = self.activation(l);
            cur = (0..n_out)
                .map(|o| {
                    let row = &self.params[off + o * n_in..off + (o + 1) * n_in];
                    act.apply(self.params[off + n_in * n_out + o] + dot(row, &cur))
                })
                .collect();
            off += n_in * n_out + n_out;
        }
        Ok(cur)
    }

    /// Accumulates `d(output . upstream)/d(params)` into `grads` and returns the
    /// gradient with respect to the input.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], grads: &mut [f64]) -> Result<Vec<f64>, NnError> {
        if upstream.len() != self.output_size() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_size(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut delta: Vec<f64> = upstream.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activation(l);
            let (z, y) = (&trace.pre[l], &trace.layers[l + 1]);
            for o in 0..n_out {
                delta[o] *= act.derivative(z[o], y[o]);
            }
            let (wo, bo) = self.offsets(l);
            let input = &trace.layers[l];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                grads[bo + o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                let grow = &mut grads[wo + o * n_in..wo + (o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    next[i] += row[i] * d;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Parameter gradients and input gradient of `output . upstream` at `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let trace = self.forward_trace(x)?;
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_into(&trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
