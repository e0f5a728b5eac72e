//! Fully connected ReLU network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Contract("MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Contract("MLP dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Two tensors (weight `in x out`, bias `1 x out`) per layer.
    pub fn num_tensors(&self) -> usize {
        2 * (self.hidden_dims.len() + 1)
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(&self, rng: &mut RngStream) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.num_tensors());
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect()
            };
            out.push(Tensor::new(fan_in, fan_out, draw(fan_in * fan_out))?);
            out.push(Tensor::new(1, fan_out, draw(fan_out))?);
        }
        Ok(out)
    }
}

/// `params` holds `(w, b)` pairs; ReLU between layers, linear output.
pub fn forward<'t>(params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
    let layers = params.len() / 2;
    let mut h = x;
    for (l, wb) in params.chunks_exact(2).enumerate() {
        h = h.matmul(wb[0]) + wb[1];
        if l + 1 < layers {
            h = h.relu();
        }
    }
    h
}
