//! Attention oracles: an independent scalar reimplementation of multi-head
//! attention, and the structural properties of the fused kernel. Each
//! check panics on failure.

use super::{random_tensor, randomize};
use mla_core::attention::{
    branch_forward, multi_head, multi_head_with_weights, scaled_dot_attention, AttentionBranch, AttentionHead,
    BranchConfig,
};
use mla_core::nn::Linear;
use mla_core::{Real, Rng, Tensor};

type Mat = Vec<Vec<f64>>;

fn to_mat(data: &[Real], rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|r| (0..cols).map(|c| data[r * cols + c] as f64).collect())
        .collect()
}

/// `x · Wᵀ` with `w` stored `(out, in)`.
fn project(x: &Mat, lin: &Linear) -> Mat {
    let (o, i) = (lin.out_dim(), lin.in_dim());
    let w = to_mat(lin.weight.data(), o, i);
    x.iter()
        .map(|row| (0..o).map(|a| (0..i).map(|b| row[b] * w[a][b]).sum()).collect())
        .collect()
}

fn brute_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|t| e.iter().zip(v).map(|(w, vj)| w / z * vj[t]).sum())
                .collect()
        })
        .collect()
}

/// Per-head attention, concatenation, then `W^O`, all in plain loops.
fn brute_multi_head(x: &Mat, branch: &AttentionBranch) -> Mat {
    let heads: Vec<Mat> = branch
        .heads
        .iter()
        .map(|h| brute_attention(&project(x, &h.w_q), &project(x, &h.w_k), &project(x, &h.w_v)))
        .collect();
    let concat: Mat = (0..x.len())
        .map(|r| heads.iter().flat_map(|h| h[r].iter().copied()).collect())
        .collect();
    project(&concat, &branch.w_o)
}

fn branch(rng: &mut Rng, d_embed: usize, n_heads: usize, d_k: usize, spatial: usize) -> AttentionBranch {
    let cfg = BranchConfig {
        tap_id: 0,
        d_embed,
        n_heads,
        d_k,
        d_mlp_hidden: 5,
        d_out: 3,
    };
    AttentionBranch::new(rng, cfg, spatial).unwrap()
}

pub fn multi_head_matches_scalar_oracle() {
    let mut worst = 0.0f64;
    for seed in 0..40u64 {
        let mut rng = Rng::new(seed);
        let c = 1 + rng.below(4);
        let d_embed = 1 + rng.below(4);
        let d_k = 1 + rng.below(4);
        let n_heads = [1, 3][rng.below(2)];
        let mut br = branch(&mut rng, d_embed, n_heads, d_k, 4);
        randomize(&mut br, seed + 100, 1.5);
        let b = 2;
        let x = random_tensor(&mut rng, &[b, c, d_embed]);
        let y = multi_head(&x, &br).unwrap();
        for s in 0..b {
            let xs = to_mat(&x.data()[s * c * d_embed..(s + 1) * c * d_embed], c, d_embed);
            let expect = brute_multi_head(&xs, &br);
            for (r, row) in expect.iter().enumerate() {
                for (t, e) in row.iter().enumerate() {
                    let got = y.data()[(s * c + r) * d_embed + t] as f64;
                    worst = worst.max((got - e).abs());
                }
            }
        }
    }
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

pub fn weight_rows_sum_to_one() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let (c, d) = (1 + rng.below(9), 1 + rng.below(6));
        let q = random_tensor(&mut rng, &[2, c, d]).scale(4.0);
        let k = random_tensor(&mut rng, &[2, c, d]).scale(4.0);
        let v = random_tensor(&mut rng, &[2, c, d]);
        let w = scaled_dot_attention(&q, &k, &v).unwrap().weights;
        for row in w.data().chunks(c) {
            assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

pub fn single_token_returns_v_exactly() {
    let mut rng = Rng::new(3);
    for d in 1..6 {
        let (q, k, v) = (
            random_tensor(&mut rng, &[3, 1, d]),
            random_tensor(&mut rng, &[3, 1, d]),
            random_tensor(&mut rng, &[3, 1, d]),
        );
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap().output.data(), v.data());
    }
}

pub fn zero_query_gives_mean_of_values() {
    let mut rng = Rng::new(4);
    let (c, d) = (7, 3);
    let k = random_tensor(&mut rng, &[1, c, d]);
    let v = random_tensor(&mut rng, &[1, c, d]);
    let out = scaled_dot_attention(&Tensor::zeros(&[1, c, d]), &k, &v).unwrap().output;
    for t in 0..d {
        let mean = (0..c).map(|j| v.data()[j * d + t] as f64).sum::<f64>() / c as f64;
        for i in 0..c {
            assert!((out.data()[i * d + t] as f64 - mean).abs() < 1e-12);
        }
    }
}

pub fn one_head_with_identity_output_is_plain_attention() {
    let mut rng = Rng::new(5);
    let d = 4;
    let mut br = branch(&mut rng, d, 1, d, 4);
    br.heads = vec![AttentionHead {
        w_q: Linear::new(&mut rng, d, d, false).unwrap(),
        w_k: Linear::new(&mut rng, d, d, false).unwrap(),
        w_v: Linear::new(&mut rng, d, d, false).unwrap(),
    }];
    let eye = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    br.w_o = Linear::from_weights(eye, None, d, d).unwrap();
    let x = random_tensor(&mut rng, &[3, 5, d]);
    let h = &br.heads[0];
    let direct = scaled_dot_attention(
        &h.w_q.forward(&x).unwrap(),
        &h.w_k.forward(&x).unwrap(),
        &h.w_v.forward(&x).unwrap(),
    )
    .unwrap();
    let (y, weights) = multi_head_with_weights(&x, &br).unwrap();
    assert_eq!(y.data(), direct.output.data());
    assert_eq!(weights[0].data(), direct.weights.data());
}

/// Permutes the channel axis of a `(b, c, rest)` buffer: out channel `i` is input channel `perm[i]`.
fn permute_channels(data: &[Real], b: usize, c: usize, rest: usize, perm: &[usize]) -> Vec<Real> {
    let mut out = Vec::with_capacity(data.len());
    for s in 0..b {
        for &p in perm {
            let start = (s * c + p) * rest;
            out.extend_from_slice(&data[start..start + rest]);
        }
    }
    out
}

pub fn channel_permutation_equivariance_is_exact() {
    for trial in 0..100u64 {
        let mut rng = Rng::new(1000 + trial);
        let (b, c, h, w) = (2, 2 + rng.below(10), 3, 3);
        let mut br = branch(&mut rng, 6, 3, 2, h * w);
        randomize(&mut br, trial, 1.0);
        let m = random_tensor(&mut rng, &[b, c, h, w]);
        let mut perm: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut perm);
        let pm = Tensor::new(permute_channels(m.data(), b, c, h * w, &perm), m.shape()).unwrap();

        let y = branch_forward(&m, &br).unwrap();
        let py = branch_forward(&pm, &br).unwrap();
        let d_out = br.config.d_out;
        assert_eq!(py.data(), permute_channels(y.data(), b, c, d_out, &perm), "trial {trial}");

        let x = random_tensor(&mut rng, &[b, c, 6]);
        let px = Tensor::new(permute_channels(x.data(), b, c, 6, &perm), x.shape()).unwrap();
        let mh = multi_head(&x, &br).unwrap();
        assert_eq!(multi_head(&px, &br).unwrap().data(), permute_channels(mh.data(), b, c, 6, &perm));
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("multi_head_matches_scalar_oracle", multi_head_matches_scalar_oracle),
    ("weight_rows_sum_to_one", weight_rows_sum_to_one),
    ("single_token_returns_v_exactly", single_token_returns_v_exactly),
    ("zero_query_gives_mean_of_values", zero_query_gives_mean_of_values),
    ("one_head_with_identity_output_is_plain_attention", one_head_with_identity_output_is_plain_attention),
    ("channel_permutation_equivariance_is_exact", channel_permutation_equivariance_is_exact),
];
