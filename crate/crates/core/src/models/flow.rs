//! Per-class radial flows used as class-conditional densities on the latent
//! space.
//!
//! Each layer maps `z -> z + β h(r) (z - z₀)` with `r = |z - z₀|`,
//! `h = 1 / (a + r)`, `a = exp(log_a)` and `β = -a + softplus(b_raw) > -a`,
//! which keeps the map invertible. The stack is read as the map from latent
//! space to the standard normal base, so
//! `ln q(z) = ln N(f(z); 0, I) + Σ ln |det ∂f_l|`.

use crate::autodiff::{softplus, Tensor, Var};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Flow parameters for `K` classes, stored per layer as `z₀: K x D`,
/// `log_a: K x 1`, `b_raw: K x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialFlowStack {
    pub depth: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<[Tensor; 3]>,
}

impl RadialFlowStack {
    pub fn init(depth: usize, latent_dim: usize, num_classes: usize, rng: &mut RngStream) -> Result<Self> {
        if depth == 0 || latent_dim == 0 || num_classes == 0 {
            return Err(Error::Contract("flow dimensions must be positive".into()));
        }
        let bound = 1.0 / (latent_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect() };
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push([
                Tensor::new(num_classes, latent_dim, draw(num_classes * latent_dim))?,
                Tensor::new(num_classes, 1, draw(num_classes))?,
                Tensor::new(num_classes, 1, draw(num_classes))?,
            ]);
        }
        Ok(Self {
            depth,
            latent_dim,
            num_classes,
            layers,
        })
    }

    pub fn from_tensors(latent_dim: usize, num_classes: usize, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() % 3 != 0 || tensors.is_empty() {
            return Err(Error::Contract("flow needs three tensors per layer".into()));
        }
        let mut layers = Vec::new();
        let mut it = tensors.into_iter();
        while let (Some(z0), Some(la), Some(b)) = (it.next(), it.next(), it.next()) {
            if z0.shape() != [num_classes, latent_dim] || la.shape() != [num_classes, 1] || b.shape() != [num_classes, 1] {
                return Err(Error::shape("radial_flow", "layer tensor shapes do not match"));
            }
            layers.push([z0, la, b]);
        }
        Ok(Self {
            depth: layers.len(),
            latent_dim,
            num_classes,
            layers,
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten()
    }

    /// Scalar parameters `(z₀, a, β)` of one layer for class `c`.
    fn layer(&self, l: usize, c: usize) -> (&[f64], f64, f64) {
        let [z0, la, b] = &self.layers[l];
        let a = la.data()[c].exp();
        let beta = -a + softplus(b.data()[c]);
        (z0.row_slice(c), a, beta)
    }

    /// Push `z` through the class-`c` stack; returns the image and the summed
    /// log-determinant.
    pub fn radial_flow_forward(&self, c: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if c >= self.num_classes {
            return Err(Error::Index(format!("class {c} of {}", self.num_classes)));
        }
        if z.len() != self.latent_dim {
            return Err(Error::shape("radial_flow", format!("{} != {}", z.len(), self.latent_dim)));
        }
        let d = self.latent_dim as f64;
        let mut z = z.to_vec();
        let mut log_det = 0.0;
        for l in 0..self.depth {
            let (z0, a, beta) = self.layer(l, c);
            let r = z.iter().zip(z0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let h = 1.0 / (a + r);
            for (x, y) in z.iter_mut().zip(z0) {
                *x += beta * h * (*x - y);
            }
            log_det += (d - 1.0) * (1.0 + beta * h).ln() + (1.0 + beta * a * h * h).ln();
        }
        Ok((z, log_det))
    }

    pub fn flow_log_density(&self, c: usize, z: &[f64]) -> Result<f64> {
        let (out, log_det) = self.radial_flow_forward(c, z)?;
        Ok(standard_normal_log_pdf(&out) + log_det)
    }

    /// Class-conditional log-densities of every latent row under every class:
    /// `params` are the stack's tensors bound on a tape, `z` is `n x D`, the
    /// result is `n x K`.
    pub fn log_density_var<'t>(num_classes: usize, params: &[Var<'t>], z: Var<'t>) -> Var<'t> {
        let [n, dim] = z.shape();
        let k = num_classes;
        let by_sample: Vec<usize> = (0..n * k).map(|r| r / k).collect();
        let by_class: Vec<usize> = (0..n * k).map(|r| r % k).collect();
        let mut zz = z.gather_rows(&by_sample);
        let mut log_det: Option<Var<'t>> = None;
        for layer in params.chunks_exact(3) {
            let z0 = layer[0].gather_rows(&by_class);
            let a = layer[1].gather_rows(&by_class).exp();
            let beta = layer[2].gather_rows(&by_class).softplus() - a;
            let diff = zz - z0;
            let r = diff.square().row_sums().sqrt();
            let h = (a + r).powf(-1.0);
            let bh = beta * h;
            zz = zz + diff * bh;
            let ld = (bh + 1.0).log().scale(dim as f64 - 1.0) + (beta * a * h.square() + 1.0).log();
            log_det = Some(match log_det {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        let base = zz.square().row_sums().scale(-0.5).offset(-0.5 * dim as f64 * LN_2PI);
        let total = match log_det {
            Some(ld) => base + ld,
            None => base,
        };
        total.reshape(n, k)
    }
}

pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}
