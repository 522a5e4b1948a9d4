//! Saliency checks: input gradients against finite differences, loss
//! scale invariance and the PGM layout. Each check panics on failure.

use super::{random_tensor, randomize, tiny_config};
use mla_core::model::{InputShape, ModelConfig, MultiLevelAttentionNet};
use mla_core::saliency::{compute_saliency, encode_pgm, input_gradient, objective, read_pgm, Objective, Reduce, SaliencyOptions};
use mla_core::tensor::no_grad;
use mla_core::{Real, Rng, Tensor};

pub fn net(seed: u64) -> MultiLevelAttentionNet {
    let cfg = ModelConfig {
        input: InputShape {
            channels: 3,
            height: 12,
            width: 12,
        },
        ..tiny_config(seed)
    };
    let mut net = MultiLevelAttentionNet::new(cfg).unwrap();
    randomize(&mut net, seed + 7, 0.6);
    net
}

pub fn pgm(net: &MultiLevelAttentionNet, image: &Tensor, class: usize, opts: &SaliencyOptions) -> Vec<u8> {
    let map = compute_saliency(net, image, class, opts).unwrap();
    encode_pgm(map.width, map.height, &map.to_gray())
}

pub fn directional_derivative_matches_finite_difference() {
    let h = 1e-5;
    for (seed, obj) in [(1, Objective::Loss), (2, Objective::Score), (3, Objective::Loss)] {
        let net = net(seed);
        let mut rng = Rng::new(seed);
        let image = random_tensor(&mut rng, &[3, 12, 12]);
        let dir = random_tensor(&mut rng, &[3, 12, 12]);
        let opts = SaliencyOptions {
            objective: obj,
            ..Default::default()
        };
        let class = seed as usize % 3;
        let grad = input_gradient(&net, &image, class, &opts).unwrap();
        let analytic: f64 = grad.iter().zip(dir.data()).map(|(g, u)| *g as f64 * *u as f64).sum();
        let at = |t: f64| {
            let x: Vec<Real> = image.data().iter().zip(dir.data()).map(|(x, u)| x + (t as Real) * u).collect();
            let x = Tensor::new(x, &[1, 3, 12, 12]).unwrap();
            no_grad(|| objective(&net, &x, class, &opts).unwrap().item().unwrap() as f64)
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-4, "{obj:?}: analytic {analytic} numeric {numeric} rel {rel:e}");
    }
}

pub fn positive_loss_scaling_leaves_the_image_unchanged() {
    let net = net(4);
    let image = random_tensor(&mut Rng::new(4), &[3, 12, 12]);
    for reduce in [Reduce::Max, Reduce::Mean] {
        let base = SaliencyOptions {
            reduce,
            ..Default::default()
        };
        let reference = pgm(&net, &image, 1, &base);
        for scale in [2.0, 3.0, 0.5, 17.0] {
            let scaled = SaliencyOptions { scale, ..base };
            assert_eq!(pgm(&net, &image, 1, &scaled), reference, "scale {scale}");
        }
    }
}

pub fn output_is_a_valid_binary_graymap() {
    let net = net(5);
    let image = random_tensor(&mut Rng::new(5), &[3, 12, 12]);
    let bytes = pgm(&net, &image, 2, &SaliencyOptions::default());
    assert_eq!(&bytes[..13], b"P5\n12 12\n255\n");
    assert_eq!(bytes.len(), 13 + 144);
    let (w, h, px) = read_pgm(&bytes).unwrap();
    assert_eq!((w, h, px.len()), (12, 12, 144));
    // Normalization spans the full range: the most salient pixel is black,
    // the least salient white.
    assert!(px.contains(&0) && px.contains(&255));
}

pub const ALL: &[(&str, fn())] = &[
    ("directional_derivative_matches_finite_difference", directional_derivative_matches_finite_difference),
    ("positive_loss_scaling_leaves_the_image_unchanged", positive_loss_scaling_leaves_the_image_unchanged),
    ("output_is_a_valid_binary_graymap", output_is_a_valid_binary_graymap),
];
