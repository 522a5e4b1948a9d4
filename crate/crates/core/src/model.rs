//! Backbone + attention branches + concatenation classifier.
//!
//! The backbone is a 3×3 stem followed by residual blocks. The output of
//! every tapped block feeds its own [`AttentionBranch`]; branch embeddings
//! (ascending tap order) and the globally averaged last block output are
//! concatenated and classified by one linear layer.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBranch, BranchConfig};
use crate::nn::{join, Conv2d, Linear, Module, ResidualBlock};
use crate::tensor::{concat_lastdim, io as mlt1};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputShape,
    pub stem_channels: usize,
    pub backbone_blocks: Vec<BlockSpec>,
    /// One entry per tap, ordered by strictly increasing `tap_id`
    /// (0-based block index). Empty for the backbone-only baseline.
    pub branches: Vec<BranchConfig>,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 32×32 RGB input, 16-channel stem, six residual blocks
    /// (16,1)(16,1)(32,2)(32,1)(64,2)(64,1), taps after the 2nd, 4th and 6th.
    pub fn desk(n_classes: usize, seed: u64) -> Self {
        let blocks = [(16, 1), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1)]
            .map(|(out_channels, stride)| BlockSpec { out_channels, stride });
        ModelConfig {
            input: InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            stem_channels: 16,
            backbone_blocks: blocks.to_vec(),
            branches: [1, 3, 5].into_iter().map(BranchConfig::desk).collect(),
            n_classes,
            seed,
        }
    }

    pub fn tap_ids(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.tap_id).collect()
    }

    /// `(channels, height, width)` after each block.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        self.backbone_blocks
            .iter()
            .map(|b| {
                h = (h + 2 - 3) / b.stride + 1;
                w = (w + 2 - 3) / b.stride + 1;
                (b.out_channels, h, w)
            })
            .collect()
    }

    pub fn final_channels(&self) -> usize {
        self.backbone_blocks
            .last()
            .map_or(self.stem_channels, |b| b.out_channels)
    }

    /// `Σ_taps c_tap · d_out + final_channels`.
    pub fn classifier_in_dim(&self) -> usize {
        let shapes = self.block_shapes();
        self.branches
            .iter()
            .map(|b| shapes[b.tap_id].0 * b.d_out)
            .sum::<usize>()
            + self.final_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 || self.stem_channels == 0 {
            return bad("input dims and stem channels must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.backbone_blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0) {
            return bad("block channels and strides must be positive".into());
        }
        let n = self.backbone_blocks.len();
        for (i, b) in self.branches.iter().enumerate() {
            if b.tap_id >= n {
                return bad(format!("tap {} out of range for {n} blocks", b.tap_id));
            }
            if i > 0 && b.tap_id <= self.branches[i - 1].tap_id {
                return bad("tap ids must be strictly increasing".into());
            }
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiLevelAttentionNet {
    config: ModelConfig,
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    /// Same order as `config.branches`.
    pub branches: Vec<AttentionBranch>,
    pub classifier: Linear,
}

impl MultiLevelAttentionNet {
    /// Builds and initializes the network from `config.seed`. Parameters are
    /// drawn in a fixed order: stem, blocks, branches, so two
    /// configs that differ only in their branches share backbone weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let stem = Conv2d::new(&mut rng, config.input.channels, config.stem_channels, 3, 1, 1)?;
        let mut in_c = config.stem_channels;
        let mut blocks = Vec::with_capacity(config.backbone_blocks.len());
        for b in &config.backbone_blocks {
            blocks.push(ResidualBlock::new(&mut rng, in_c, b.out_channels, b.stride)?);
            in_c = b.out_channels;
        }
        let shapes = config.block_shapes();
        let branches = config
            .branches
            .iter()
            .map(|bc| {
                let (_, h, w) = shapes[bc.tap_id];
                AttentionBranch::new(&mut rng, bc.clone(), h * w)
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(&mut rng, config.classifier_in_dim(), config.n_classes, true)?;
        let net = MultiLevelAttentionNet {
            config,
            stem,
            blocks,
            branches,
            classifier,
        };
        assert_eq!(net.classifier.in_dim(), net.config.classifier_in_dim());
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Concatenated `[branch outputs..., pooled final features]`, `(b, classifier_in_dim)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let InputShape { channels, height, width } = self.config.input;
        if x.rank() != 4 || x.shape()[1..] != [channels, height, width] {
            return Err(Error::dim("model input", x.shape(), &[channels, height, width]));
        }
        let mut h = self.stem.forward(x)?.gelu();
        let mut segments = Vec::with_capacity(self.branches.len() + 1);
        let mut next_branch = self.branches.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if let Some(branch) = next_branch.next_if(|b| b.config.tap_id == i) {
                segments.push(branch.forward(&h)?);
            }
        }
        segments.push(h.mean_spatial()?);
        let refs: Vec<&Tensor> = segments.iter().collect();
        concat_lastdim(&refs)
    }

    /// Logits `(b, n_classes)` for a `(b, C, H, W)` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.features(x)?)
    }

    /// Scalar parameter count per component, in visiting order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), self.stem.parameter_count())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}"), b.parameter_count()));
        }
        for b in &self.branches {
            out.push((format!("branch.{}", b.config.tap_id), b.parameter_count()));
        }
        out.push(("classifier".to_string(), self.classifier.parameter_count()));
        out
    }
}

impl Module for MultiLevelAttentionNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        for b in &self.branches {
            b.visit_params(&join(prefix, &format!("branch.{}", b.config.tap_id)), f);
        }
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        for b in &mut self.branches {
            let p = join(prefix, &format!("branch.{}", b.config.tap_id));
            b.visit_params_mut(&p, f);
        }
        self.classifier.visit_params_mut(&join(prefix, "classifier"), f);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + <dir>/weights.mlt1

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.mlt1";
const FORMAT_TAG: &str = "mla-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Writes the checkpoint into `dir` (created if needed). Both files go to a
/// temporary name first and are renamed into place, weights before manifest,
/// so an interrupted save never leaves a readable-but-corrupt checkpoint.
pub fn save_checkpoint(net: &MultiLevelAttentionNet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut weights = Vec::new();
    net.visit_params("", &mut |name, t| {
        let offset = weights.len() as u64;
        mlt1::write_record(&mut weights, t.shape(), t.data(), mlt1::DType::NATIVE)
            .expect("writing to a Vec cannot fail");
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: weights.len() as u64 - offset,
        });
    });
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: 1,
        config: net.config.clone(),
        tensors,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');

    write_atomic(&dir.join(WEIGHTS_FILE), &weights)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes)?;
    Ok(())
}

/// Writes `bytes` to `<path>.tmp`, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<MultiLevelAttentionNet> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT_TAG || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut weights = Vec::new();
    BufReader::new(fs::File::open(dir.join(WEIGHTS_FILE))?).read_to_end(&mut weights)?;
    let expected: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if expected != weights.len() as u64 {
        return Err(Error::Format(format!(
            "weights file has {} bytes, manifest indexes {expected}",
            weights.len()
        )));
    }

    let mut net = MultiLevelAttentionNet::new(manifest.config)?;
    let mut entries = manifest.tensors.into_iter();
    let mut failure = None;
    net.visit_params_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let result = (|| {
            let entry = entries
                .next()
                .ok_or_else(|| Error::Compat(format!("checkpoint lacks `{name}`")))?;
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::Compat(format!(
                    "expected `{name}` {:?}, found `{}` {:?}",
                    t.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.length as usize;
            let mut slice = weights
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("`{name}` record out of bounds")))?;
            let (shape, data, _) = mlt1::read_record(&mut slice)?;
            if shape != t.shape() {
                return Err(Error::Compat(format!("`{name}` record shape {shape:?}")));
            }
            *t = t.with_data(data)?;
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = entries.next() {
        return Err(Error::Compat(format!("unexpected tensor `{}` in checkpoint", extra.name)));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;

    pub(crate) fn tiny_config(seed: u64) -> ModelConfig {
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

    fn batch(rng: &mut Rng, b: usize, c: &ModelConfig) -> Tensor {
        let n = b * c.input.channels * c.input.height * c.input.width;
        Tensor::new(
            (0..n).map(|_| rng.uniform_range(-1.0, 1.0) as Real).collect(),
            &[b, c.input.channels, c.input.height, c.input.width],
        )
        .unwrap()
    }

    #[test]
    fn desk_logits_shape() {
        let net = MultiLevelAttentionNet::new(ModelConfig::desk(7, 0)).unwrap();
        let x = batch(&mut Rng::new(1), 4, net.config());
        assert_eq!(net.forward(&x).unwrap().shape(), &[4, 7]);
    }

    #[test]
    fn classifier_width_formula() {
        let cfg = ModelConfig::desk(5, 0);
        // taps: block 1 -> 16 ch, block 3 -> 32 ch, block 5 -> 64 ch; 32 per channel; + 64 pooled.
        assert_eq!(cfg.classifier_in_dim(), (16 + 32 + 64) * 32 + 64);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(5, 0);
        cfg.branches.swap(0, 1);
        assert!(matches!(MultiLevelAttentionNet::new(cfg), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk(5, 0);
        cfg.branches[2].tap_id = 6;
        assert!(matches!(MultiLevelAttentionNet::new(cfg), Err(Error::Config(_))));
        assert!(matches!(MultiLevelAttentionNet::new(ModelConfig::desk(1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_is_dimension_error() {
        let net = MultiLevelAttentionNet::new(tiny_config(0)).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 3, 9, 8])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tap_isolation() {
        let cfg = ModelConfig {
            branches: vec![
                BranchConfig { tap_id: 0, ..tiny_config(0).branches[0].clone() },
                BranchConfig { tap_id: 1, ..tiny_config(0).branches[0].clone() },
            ],
            ..tiny_config(3)
        };
        let mut net = MultiLevelAttentionNet::new(cfg).unwrap();
        let x = batch(&mut Rng::new(2), 2, net.config());
        let before = net.features(&x).unwrap();
        let seg0 = 4 * 3; // tap 0: 4 channels x d_out 3
        net.branches[1].visit_params_mut("", &mut |_, t| {
            *t = t.with_data(t.data().iter().map(|v| v * 2.0 + 0.1).collect()).unwrap()
        });
        let after = net.features(&x).unwrap();
        let width = before.shape()[1];
        for s in 0..2 {
            let (a, b) = (&before.data()[s * width..], &after.data()[s * width..]);
            assert_eq!(a[..seg0], b[..seg0]);
            assert_ne!(a[seg0..seg0 + 6 * 3], b[seg0..seg0 + 6 * 3]);
            assert_eq!(a[width - 6..width], b[width - 6..width]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = MultiLevelAttentionNet::new(tiny_config(7)).unwrap();
        save_checkpoint(&net, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let x = batch(&mut Rng::new(5), 2, net.config());
        assert_eq!(net.forward(&x).unwrap().data(), loaded.forward(&x).unwrap().data());

        let again = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, again.path()).unwrap();
        for f in [MANIFEST_FILE, WEIGHTS_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&MultiLevelAttentionNet::new(tiny_config(1)).unwrap(), dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

        fs::write(dir.path().join(MANIFEST_FILE), b"{not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_config_is_compat_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&MultiLevelAttentionNet::new(tiny_config(1)).unwrap(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["config"]["n_classes"] = 4.into();
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Compat(_))));
    }
}
