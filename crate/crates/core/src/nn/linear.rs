use super::{init_parameters, join, Module};
use crate::{Error, Real, Result, Rng, Tensor};

/// `y = x·Wᵀ + b`, broadcast over leading axes. `weight` is `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut Rng, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = Tensor::parameter(init_parameters(rng, in_dim, out_dim), &[out_dim, in_dim])?;
        let bias = if bias {
            Some(Tensor::parameter(vec![0.0; out_dim], &[out_dim])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn from_weights(weight: Vec<Real>, bias: Option<Vec<Real>>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = Tensor::parameter(weight, &[out_dim, in_dim])?;
        let bias = bias.map(|b| Tensor::parameter(b, &[out_dim])).transpose()?;
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.in_dim()) {
            return Err(Error::dim("linear", x.shape(), self.weight.shape()));
        }
        let y = x.matmul(&self.weight.transpose_last2()?)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
