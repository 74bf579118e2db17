use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng).into_param();
        let bias = bias.then(|| Tensor::zeros(&[fan_out]).into_param());
        Linear { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d_in = self.in_features();
        if x.shape().last() != Some(&d_in) {
            return Err(Error::dim(format!(
                "linear expects last dim {d_in}, got {:?}",
                x.shape()
            )));
        }
        let rows = x.numel() / d_in;
        let mut y = x.reshape(&[rows, d_in])?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(&b.reshape(&[1, self.out_features()])?)?;
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_features();
        y.reshape(&shape)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(format!("{prefix}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
        out
    }
}
