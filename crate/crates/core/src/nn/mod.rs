//! Parameterized layers: convolution, affine maps, residual blocks.

mod conv;
mod init;
mod linear;
mod residual;

pub use conv::Conv2d;
pub use init::{init_parameters, kaiming_bound};
pub use linear::Linear;
pub use residual::ResidualBlock;

use crate::Tensor;

/// Anything owning trainable tensors. Parameters are visited in a fixed,
/// documented order; names are dot-separated paths below `prefix`.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Number of scalar parameters.
    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grads(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
