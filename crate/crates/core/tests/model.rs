//! Whole-model oracles: parameter-count fixture, checkpoint equality,
//! ablation identities.

mod common;

use common::{random_tensor, randomize, tiny_config};
use mla_core::model::{load_checkpoint, save_checkpoint, ModelConfig, MultiLevelAttentionNet, MANIFEST_FILE, WEIGHTS_FILE};
use mla_core::nn::{Linear, Module};
use mla_core::protocol::baseline_variant;
use mla_core::tensor::concat_lastdim;
use mla_core::{Error, Rng, Tensor};

/// Frozen at first build; any architecture change must update it knowingly.
const DESK_PARAMETERS: usize = 364_229;

#[test]
fn desk_parameter_count_fixture() {
    let net = MultiLevelAttentionNet::new(ModelConfig::desk(5, 0)).unwrap();
    assert_eq!(net.parameter_count(), DESK_PARAMETERS);
    let total: usize = net.parameter_breakdown().iter().map(|(_, n)| n).sum();
    assert_eq!(total, DESK_PARAMETERS);
    let base = MultiLevelAttentionNet::new(baseline_variant(&ModelConfig::desk(5, 0))).unwrap();
    assert!(base.parameter_count() < net.parameter_count());
    assert!(base.config().tap_ids().is_empty());
}

#[test]
fn seed_7_checkpoint_reproduces_logits() {
    let mut net = MultiLevelAttentionNet::new(ModelConfig::desk(5, 7)).unwrap();
    // Perturb everything, zero biases included.
    randomize(&mut net, 7, 0.05);
    let x = random_tensor(&mut Rng::new(70), &[3, 3, 32, 32]);
    let before = net.forward(&x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.forward(&x).unwrap().data(), before.data());
    assert_eq!(loaded.config(), net.config());

    let again = tempfile::tempdir().unwrap();
    save_checkpoint(&loaded, again.path()).unwrap();
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn corrupted_manifest_is_format_error() {
    let net = MultiLevelAttentionNet::new(tiny_config(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net, dir.path()).unwrap();
    std::fs::write(dir.path().join(MANIFEST_FILE), b"{\"format\": 3").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
}

/// stem → blocks → global average pool → classifier, written out by hand.
fn backbone_logits(net: &MultiLevelAttentionNet, classifier: &Linear, x: &Tensor) -> Tensor {
    let mut h = net.stem.forward(x).unwrap().gelu();
    for b in &net.blocks {
        h = b.forward(&h).unwrap();
    }
    classifier.forward(&h.mean_spatial().unwrap()).unwrap()
}

#[test]
fn baseline_forward_is_backbone_pool_linear() {
    let cfg = baseline_variant(&tiny_config(2));
    let mut net = MultiLevelAttentionNet::new(cfg).unwrap();
    randomize(&mut net, 2, 0.5);
    let x = random_tensor(&mut Rng::new(2), &[4, 3, 8, 8]);
    let expect = backbone_logits(&net, &net.classifier, &x);
    assert_eq!(net.forward(&x).unwrap().data(), expect.data());
    assert_eq!(net.forward(&x).unwrap().shape(), &[4, 3]);
}

#[test]
fn silent_branches_reduce_to_backbone_with_classifier_slice() {
    let mut net = MultiLevelAttentionNet::new(tiny_config(3)).unwrap();
    randomize(&mut net, 3, 0.5);
    for b in &mut net.branches {
        b.mlp_out.visit_params_mut("", &mut |_, t| *t = t.with_data(vec![0.0; t.numel()]).unwrap());
    }
    // The classifier columns that read pooled features come last.
    let final_c = net.config().final_channels();
    let (k, width) = (net.classifier.out_dim(), net.classifier.in_dim());
    let w = net.classifier.weight.data();
    let slice: Vec<_> = (0..k).flat_map(|r| w[r * width + width - final_c..(r + 1) * width].to_vec()).collect();
    let bias = net.classifier.bias.as_ref().map(|b| b.data().to_vec());
    let head = Linear::from_weights(slice, bias, final_c, k).unwrap();
    let x = random_tensor(&mut Rng::new(3), &[2, 3, 8, 8]);
    let got = net.forward(&x).unwrap();
    let expect = backbone_logits(&net, &head, &x);
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn features_concatenate_branches_then_pool() {
    let mut net = MultiLevelAttentionNet::new(tiny_config(4)).unwrap();
    randomize(&mut net, 4, 0.5);
    let x = random_tensor(&mut Rng::new(4), &[2, 3, 8, 8]);
    let mut h = net.stem.forward(&x).unwrap().gelu();
    let mut parts = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        h = b.forward(&h).unwrap();
        for br in net.branches.iter().filter(|br| br.config.tap_id == i) {
            parts.push(br.forward(&h).unwrap());
        }
    }
    parts.push(h.mean_spatial().unwrap());
    let refs: Vec<&Tensor> = parts.iter().collect();
    let expect = concat_lastdim(&refs).unwrap();
    let got = net.features(&x).unwrap();
    assert_eq!(got.shape(), &[2, net.config().classifier_in_dim()]);
    assert_eq!(got.data(), expect.data());
}

#[test]
fn forward_has_no_side_effects() {
    let mut net = MultiLevelAttentionNet::new(tiny_config(5)).unwrap();
    randomize(&mut net, 5, 0.5);
    let x = random_tensor(&mut Rng::new(5), &[2, 3, 8, 8]);
    let a = net.forward(&x).unwrap();
    let params: Vec<Vec<_>> = net.named_parameters().iter().map(|(_, t)| t.data().to_vec()).collect();
    let b = net.forward(&x).unwrap();
    assert_eq!(a.data(), b.data());
    let after: Vec<Vec<_>> = net.named_parameters().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(params, after);
}
