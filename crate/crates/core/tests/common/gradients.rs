//! Autodiff against central finite differences (step 1e-5, 64-bit).
//! Each check panics with the offending operation on failure.

use super::*;
use mla_core::attention::{scaled_dot_attention, AttentionBranch, BranchConfig};
use mla_core::model::MultiLevelAttentionNet;
use mla_core::nn::{Conv2d, Linear, ResidualBlock};
use mla_core::tensor::{concat_lastdim, conv2d};
use mla_core::{Rng, Tensor};

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> mla_core::Result<Tensor>>);

pub const NONLINEAR_TOL: f64 = 1e-4;
pub const LINEAR_TOL: f64 = 1e-6;

fn leaves(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    shapes.iter().map(|s| random_param(&mut rng, s)).collect()
}

pub fn linear_ops() {
    let cases: Vec<Case> = vec![
        ("add", leaves(1, &[&[3, 4], &[3, 4]]), Box::new(|l| probe(&l[0].add(&l[1])?, 7))),
        ("add broadcast", leaves(2, &[&[2, 3, 4], &[4]]), Box::new(|l| probe(&l[0].add(&l[1])?, 7))),
        ("scale", leaves(3, &[&[5]]), Box::new(|l| probe(&l[0].scale(-2.5), 7))),
        ("sum", leaves(4, &[&[2, 3]]), Box::new(|l| Ok(l[0].sum()))),
        ("reshape", leaves(5, &[&[2, 6]]), Box::new(|l| probe(&l[0].reshape(&[3, 4])?, 7))),
        ("flatten", leaves(6, &[&[2, 3, 2]]), Box::new(|l| probe(&l[0].flatten()?, 7))),
        ("transpose", leaves(7, &[&[2, 3, 4]]), Box::new(|l| probe(&l[0].transpose_last2()?, 7))),
        ("mean_spatial", leaves(8, &[&[2, 3, 4, 5]]), Box::new(|l| probe(&l[0].mean_spatial()?, 7))),
        ("concat", leaves(9, &[&[2, 3], &[2, 2]]), Box::new(|l| probe(&concat_lastdim(&[&l[0], &l[1]])?, 7))),
        ("matmul 3x4·4x2", leaves(10, &[&[3, 4], &[4, 2]]), Box::new(|l| l[0].matmul(&l[1]).map(|t| t.sum()))),
        ("matmul batched", leaves(11, &[&[2, 3, 4], &[2, 4, 5]]), Box::new(|l| probe(&l[0].matmul(&l[1])?, 7))),
        ("matmul shared rhs", leaves(12, &[&[2, 3, 4], &[4, 5]]), Box::new(|l| probe(&l[0].matmul(&l[1])?, 7))),
    ];
    for (name, ls, f) in cases {
        let e = check_leaves(&ls, &*f);
        assert!(e < LINEAR_TOL, "{name}: rel err {e:e}");
    }
}

pub fn nonlinear_ops() {
    let cases: Vec<Case> = vec![
        ("mul", leaves(20, &[&[3, 4], &[3, 4]]), Box::new(|l| probe(&l[0].mul(&l[1])?, 7))),
        ("softmax", leaves(21, &[&[3, 5]]), Box::new(|l| probe(&l[0].softmax_lastdim()?, 7))),
        ("gelu", leaves(22, &[&[4, 6]]), Box::new(|l| probe(&l[0].gelu(), 7))),
        ("cross_entropy", leaves(23, &[&[4, 3]]), Box::new(|l| l[0].cross_entropy(&[0, 2, 1, 2]))),
        (
            "scaled_dot_attention",
            leaves(24, &[&[2, 4, 3], &[2, 4, 3], &[2, 4, 3]]),
            Box::new(|l| probe(&scaled_dot_attention(&l[0], &l[1], &l[2])?.output, 7)),
        ),
    ];
    for (name, ls, f) in cases {
        let e = check_leaves(&ls, &*f);
        assert!(e < NONLINEAR_TOL, "{name}: rel err {e:e}");
    }
}

pub fn conv2d_input_weight_bias() {
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
        let ls = leaves(30 + stride as u64, &[&[2, 3, 8, 8], &[4, 3, 3, 3], &[4]]);
        let e = check_leaves(&ls, &|l| probe(&conv2d(&l[0], &l[1], Some(&l[2]), stride, pad)?, 7));
        assert!(e < LINEAR_TOL, "stride {stride} pad {pad}: rel err {e:e}");
    }
}

pub fn conv_module() {
    let mut conv = Conv2d::new(&mut Rng::new(1), 3, 4, 3, 1, 1).unwrap();
    randomize(&mut conv, 2, 0.5);
    let x = random_tensor(&mut Rng::new(3), &[2, 3, 6, 6]);
    let (name, e) = check_module(&conv, &|c| probe(&c.forward(&x)?, 4));
    assert!(e < LINEAR_TOL, "{name}: {e:e}");
}

pub fn linear_module() {
    let mut lin = Linear::new(&mut Rng::new(1), 5, 3, true).unwrap();
    randomize(&mut lin, 2, 1.0);
    let x = random_tensor(&mut Rng::new(3), &[4, 5]);
    let (name, e) = check_module(&lin, &|m| probe(&m.forward(&x)?, 4));
    assert!(e < LINEAR_TOL, "{name}: {e:e}");
}

pub fn residual_stack() {
    #[derive(Clone)]
    struct Stack(ResidualBlock, ResidualBlock);
    impl mla_core::nn::Module for Stack {
        fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
            self.0.visit_params(&format!("{p}0"), f);
            self.1.visit_params(&format!("{p}1"), f);
        }
        fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            self.0.visit_params_mut(&format!("{p}0"), f);
            self.1.visit_params_mut(&format!("{p}1"), f);
        }
    }
    let mut rng = Rng::new(5);
    let mut s = Stack(
        ResidualBlock::new(&mut rng, 3, 4, 2).unwrap(),
        ResidualBlock::new(&mut rng, 4, 4, 1).unwrap(),
    );
    randomize(&mut s, 6, 0.4);
    let x = random_tensor(&mut rng, &[2, 3, 6, 6]);
    let (name, e) = check_module(&s, &|s| probe(&s.1.forward(&s.0.forward(&x)?)?, 4));
    assert!(e < NONLINEAR_TOL, "{name}: {e:e}");
}

pub fn attention_branch() {
    let cfg = BranchConfig {
        tap_id: 0,
        d_embed: 5,
        n_heads: 2,
        d_k: 3,
        d_mlp_hidden: 6,
        d_out: 2,
    };
    let mut rng = Rng::new(8);
    let mut branch = AttentionBranch::new(&mut rng, cfg, 9).unwrap();
    randomize(&mut branch, 9, 0.6);
    let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
    let (name, e) = check_module(&branch, &|b| probe(&b.forward(&x)?, 4));
    assert!(e < NONLINEAR_TOL, "{name}: {e:e}");
}

pub fn conv_attention_mlp_loss_graph() {
    #[derive(Clone)]
    struct G(Conv2d, AttentionBranch, Linear);
    impl mla_core::nn::Module for G {
        fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor)) {
            self.0.visit_params(&format!("{p}conv"), f);
            self.1.visit_params(&format!("{p}branch"), f);
            self.2.visit_params(&format!("{p}head"), f);
        }
        fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            self.0.visit_params_mut(&format!("{p}conv"), f);
            self.1.visit_params_mut(&format!("{p}branch"), f);
            self.2.visit_params_mut(&format!("{p}head"), f);
        }
    }
    let cfg = BranchConfig {
        tap_id: 0,
        d_embed: 4,
        n_heads: 2,
        d_k: 2,
        d_mlp_hidden: 5,
        d_out: 2,
    };
    let mut rng = Rng::new(12);
    let mut g = G(
        Conv2d::new(&mut rng, 3, 3, 3, 1, 1).unwrap(),
        AttentionBranch::new(&mut rng, cfg, 16).unwrap(),
        Linear::new(&mut rng, 6, 3, true).unwrap(),
    );
    randomize(&mut g, 13, 0.5);
    let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
    let (name, e) = check_module(&g, &|g| {
        let h = g.0.forward(&x)?;
        g.2.forward(&g.1.forward(&h)?)?.cross_entropy(&[1, 2])
    });
    assert!(e < NONLINEAR_TOL, "{name}: {e:e}");
}

pub fn full_tiny_model() {
    let mut net = MultiLevelAttentionNet::new(tiny_config(3)).unwrap();
    randomize(&mut net, 4, 0.5);
    let x = random_tensor(&mut Rng::new(5), &[2, 3, 8, 8]);
    let (name, e) = check_module(&net, &|n| n.forward(&x)?.cross_entropy(&[0, 2]));
    assert!(e < NONLINEAR_TOL, "{name}: {e:e}");
}

pub const ALL: &[(&str, fn())] = &[
    ("linear_ops", linear_ops),
    ("nonlinear_ops", nonlinear_ops),
    ("conv2d_input_weight_bias", conv2d_input_weight_bias),
    ("conv_module", conv_module),
    ("linear_module", linear_module),
    ("residual_stack", residual_stack),
    ("attention_branch", attention_branch),
    ("conv_attention_mlp_loss_graph", conv_attention_mlp_loss_graph),
    ("full_tiny_model", full_tiny_model),
];
