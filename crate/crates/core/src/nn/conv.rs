use super::{init_parameters, join, Module};
use crate::tensor::conv2d;
use crate::{Result, Rng, Tensor};

/// Zero-padded 2-D cross-correlation layer, `weight: (out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        Ok(Conv2d {
            weight: Tensor::parameter(init_parameters(rng, fan_in, out_c), &[out_c, in_c, kernel, kernel])?,
            bias: Tensor::parameter(vec![0.0; out_c], &[out_c])?,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial size for an input of side `n`.
    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
