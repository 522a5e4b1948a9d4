//! JSON run configuration. Resolution order: built-in defaults, then the
//! file, then command-line flags. The resolved document is echoed into
//! every run directory and can be passed back with `--config`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mla_core::data::{DomainDataset, SynthSpec};
use mla_core::model::{InputShape, ModelConfig};
use mla_core::protocol::Variant;
use mla_core::train::TrainConfig;
use mla_core::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Absent: the default desk architecture sized to the dataset.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub size: usize,
    pub seed: u64,
    pub spurious: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = SynthSpec::desk(0);
        DataSection {
            classes: spec.n_classes,
            domains: spec.domains.len(),
            per_cell: spec.samples_per_domain_per_class,
            size: spec.image_size,
            seed: spec.seed,
            spurious: spec.spurious_strength,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec::new(self.classes, self.domains, self.per_cell, self.size, self.seed, self.spurious)
    }
}

/// Trainer fields settable from flags.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_epoch: Option<usize>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub shuffle: Option<bool>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    /// Like the `--epochs` flag, a `train.epochs` without `train.decay_epoch`
    /// moves the decay point to `floor(0.8·epochs)`.
    pub fn parse(text: &str) -> serde_json::Result<CliConfig> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let mut cfg: CliConfig = serde_json::from_value(raw.clone())?;
        let train = &raw["train"];
        if train.get("epochs").is_some() && train.get("decay_epoch").is_none() {
            cfg.train.decay_epoch = TrainConfig::default_decay_epoch(cfg.train.epochs);
        }
        Ok(cfg)
    }

    /// Applies flag values over the file's train section. When only
    /// `epochs` changes, the decay point follows it (`floor(0.8·epochs)`).
    pub fn apply_train(&mut self, o: &TrainOverrides, seed: Option<u64>) {
        let t = &mut self.train;
        if let Some(e) = o.epochs {
            t.epochs = e;
            if o.decay_epoch.is_none() {
                t.decay_epoch = TrainConfig::default_decay_epoch(e);
            }
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = o.$field { t.$field = v; })* };
        }
        set!(batch_size, lr, momentum, decay_factor, decay_epoch, weight_decay, shuffle);
        if o.grad_clip.is_some() {
            t.grad_clip = o.grad_clip;
        }
        if let Some(s) = seed {
            t.seed = s;
        }
    }

    /// The model for `ds`: the file's `model` section (checked against the
    /// dataset) or the desk default. Its seed always follows `train.seed`.
    pub fn resolve_model(&self, ds: &DomainDataset) -> Result<ModelConfig> {
        let input = InputShape {
            channels: 3,
            height: ds.height as usize,
            width: ds.width as usize,
        };
        let mut model = match &self.model {
            Some(m) => {
                if m.n_classes != ds.n_classes as usize || m.input != input {
                    return Err(Error::Config(format!(
                        "model expects {} classes at {:?}, dataset has {} at {:?}",
                        m.n_classes, m.input, ds.n_classes, input
                    ))
                    .into());
                }
                m.clone()
            }
            None => ModelConfig {
                input,
                ..ModelConfig::desk(ds.n_classes as usize, 0)
            },
        };
        model.seed = self.train.seed;
        model.validate()?;
        Ok(model)
    }
}
