//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod attention_checks;
pub mod gradients;
pub mod saliency_checks;

use mla_core::model::{BlockSpec, InputShape, ModelConfig};
use mla_core::attention::BranchConfig;
use mla_core::nn::Module;
use mla_core::tensor::no_grad;
use mla_core::{Real, Result, Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub fn random_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<Real> {
    (0..n).map(|_| rng.uniform_range(lo, hi) as Real).collect()
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(random_vec(rng, shape.iter().product(), -1.0, 1.0), shape).unwrap()
}

pub fn random_param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::parameter(random_vec(rng, shape.iter().product(), -1.0, 1.0), shape).unwrap()
}

/// `sum(out ⊙ r)` for a fixed random `r`: a scalar whose gradient is
/// non-degenerate even when `sum(out)` is constant (softmax rows, say).
pub fn probe(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = Rng::new(seed);
    let r = Tensor::new(random_vec(&mut rng, out.numel(), -1.0, 1.0), out.shape())?;
    Ok(out.mul(&r)?.sum())
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_err(analytic: &[Real], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` w.r.t. every element of every leaf.
pub fn numeric_grads(leaves: &[Tensor], f: &dyn Fn(&[Tensor]) -> Result<Tensor>) -> Vec<Vec<f64>> {
    no_grad(|| {
        (0..leaves.len())
            .map(|i| {
                (0..leaves[i].numel())
                    .map(|j| {
                        let eval = |delta: f64| {
                            let mut d = leaves[i].data().to_vec();
                            d[j] += delta as Real;
                            let mut ls = leaves.to_vec();
                            ls[i] = leaves[i].with_data(d).unwrap();
                            f(&ls).unwrap().item().unwrap() as f64
                        };
                        (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
                    })
                    .collect()
            })
            .collect()
    })
}

/// Largest per-leaf relative error between autodiff and central differences.
pub fn check_leaves(leaves: &[Tensor], f: &dyn Fn(&[Tensor]) -> Result<Tensor>) -> f64 {
    let out = f(leaves).unwrap();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = out.gradients(&refs).unwrap();
    let numeric = numeric_grads(leaves, f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Replaces every parameter with uniform values in `[-scale, scale]`.
pub fn randomize<M: Module>(m: &mut M, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    m.visit_params_mut("", &mut |_, t| {
        *t = t.with_data(random_vec(&mut rng, t.numel(), -scale, scale)).unwrap();
    });
}

/// Autodiff vs. central differences for every parameter of a module.
/// Returns `(name, rel_err)` for the worst parameter tensor.
pub fn check_module<M: Module + Clone>(m: &M, loss: &dyn Fn(&M) -> Result<Tensor>) -> (String, f64) {
    let mut params = Vec::new();
    m.visit_params("", &mut |name, t| params.push((name, t.clone())));
    let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
    let analytic = loss(m).unwrap().gradients(&refs).unwrap();
    let mut worst = (String::new(), 0.0);
    for (pi, (name, t)) in params.iter().enumerate() {
        let numeric: Vec<f64> = (0..t.numel())
            .map(|j| {
                let eval = |delta: f64| {
                    let mut copy = m.clone();
                    let mut k = 0;
                    copy.visit_params_mut("", &mut |_, p| {
                        if k == pi {
                            let mut d = p.data().to_vec();
                            d[j] += delta as Real;
                            *p = p.with_data(d).unwrap();
                        }
                        k += 1;
                    });
                    no_grad(|| loss(&copy).unwrap().item().unwrap() as f64)
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        let e = rel_err(&analytic[pi], &numeric);
        if e >= worst.1 {
            worst = (name.clone(), e);
        }
    }
    worst
}

/// 8×8 input, 4-channel stem, blocks (4,1)(6,2), one branch on block 0, 3 classes.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input: InputShape {
            channels: 3,
            height: 8,
            width: 8,
        },
        stem_channels: 4,
        backbone_blocks: vec![
            BlockSpec { out_channels: 4, stride: 1 },
            BlockSpec { out_channels: 6, stride: 2 },
        ],
        branches: vec![BranchConfig {
            tap_id: 0,
            d_embed: 6,
            n_heads: 3,
            d_k: 2,
            d_mlp_hidden: 8,
            d_out: 3,
        }],
        n_classes: 3,
        seed,
    }
}

/// [`tiny_config`] at a `size × size` input with `n_classes` outputs.
pub fn tiny_config_at(seed: u64, size: usize, n_classes: usize) -> ModelConfig {
    ModelConfig {
        input: InputShape {
            channels: 3,
            height: size,
            width: size,
        },
        n_classes,
        ..tiny_config(seed)
    }
}
