use super::{join, Conv2d, Module};
use crate::{Error, Result, Rng, Tensor};

/// Two 3×3 convolutions with a GELU between them and after the skip sum:
/// `gelu(conv2(gelu(conv1(x))) + proj(x))`. `proj` is a 1×1 strided
/// convolution when the channel count or stride changes, identity otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(rng, in_c, out_c, 3, stride, 1)?;
        let conv2 = Conv2d::new(rng, out_c, out_c, 3, 1, 1)?;
        let proj = if in_c != out_c || stride != 1 {
            Some(Conv2d::new(rng, in_c, out_c, 1, stride, 0)?)
        } else {
            None
        };
        Ok(ResidualBlock { conv1, conv2, proj })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels() {
            return Err(Error::dim("residual block", x.shape(), self.conv1.weight.shape()));
        }
        let h = self.conv1.forward(x)?.gelu();
        let h = self.conv2.forward(&h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.gelu())
    }
}

impl Module for ResidualBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(p) = &self.proj {
            p.visit_params(&join(prefix, "proj"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(p) = &mut self.proj {
            p.visit_params_mut(&join(prefix, "proj"), f);
        }
    }
}
