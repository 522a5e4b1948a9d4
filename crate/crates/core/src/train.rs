//! Mini-batch SGD with momentum and a single step decay of the learning rate.

use std::ops::ControlFlow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::model::MultiLevelAttentionNet;
use crate::nn::Module;
use crate::tensor::no_grad;
use crate::{exec, Error, Real, Result, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// 1-based epoch from which `lr · decay_factor` applies.
    pub decay_epoch: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// 30 epochs, batch 32, lr 0.001 decayed ×0.1 from epoch 24.
    pub fn reference() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.001,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_epoch: 24,
            seed: 0,
            shuffle: true,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    /// Defaults for from-scratch training on the synthetic data: the
    /// reference schedule at lr 0.03 with the global gradient norm clipped to 1.
    /// The attention classifier reads a few thousand features against the
    /// baseline's 64, so an unclipped rate that suits one diverges or
    /// crawls for the other.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.03,
            grad_clip: Some(1.0),
            ..Self::reference()
        }
    }

    /// Desk default decay point, `floor(0.8 · epochs)` (at least 1).
    pub fn default_decay_epoch(epochs: usize) -> usize {
        (epochs * 4 / 5).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs > 0 && !(1..=self.epochs).contains(&self.decay_epoch) {
            return bad("decay_epoch must lie in 1..=epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0");
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub lr_in_effect: f64,
    /// Seconds. Not serialized: logs must be byte-identical across reruns.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Momentum SGD state, one velocity buffer per parameter in visiting order.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<Real>>,
}

/// `v ← momentum·v + g`, `p ← p − lr·v`, elementwise.
pub fn sgd_step(param: &mut [Real], grad: &[Real], velocity: &mut [Real], lr: f64, momentum: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = (momentum * *v as f64 + g as f64) as Real;
        *p = (*p as f64 - lr * *v as f64) as Real;
    }
}

impl Sgd {
    /// Applies one update to every parameter of `net` from its accumulated
    /// gradients, then clears them.
    pub fn step(&mut self, net: &mut impl Module, cfg: &TrainConfig, lr: f64) -> Result<()> {
        let mut grads: Vec<Vec<Real>> = Vec::new();
        net.visit_params("", &mut |_, t| {
            grads.push(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]));
        });
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        if let Some(max_norm) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flatten()
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = (max_norm / norm) as Real;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let mut failure = None;
        let mut i = 0;
        net.visit_params_mut("", &mut |_, t| {
            let mut data = t.data().to_vec();
            let g = &mut grads[i];
            if cfg.weight_decay > 0.0 {
                g.iter_mut()
                    .zip(&data)
                    .for_each(|(g, &p)| *g += (cfg.weight_decay * p as f64) as Real);
            }
            sgd_step(&mut data, g, &mut self.velocity[i], lr, cfg.momentum);
            match t.with_data(data) {
                Ok(fresh) => *t = fresh,
                Err(e) => failure = Some(e),
            }
            i += 1;
        });
        failure.map_or(Ok(()), Err)
    }
}

fn argmax_lowest(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes; ties go to the lowest class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().expect("logits have a class axis");
    logits.data().chunks_exact(classes).map(argmax_lowest).collect()
}

/// Trains in place and returns one log entry per epoch.
pub fn train(net: &mut MultiLevelAttentionNet, data: &DomainDataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(net, data, cfg, |_| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; `Break` ends training
/// after that epoch.
pub fn train_with(
    net: &mut MultiLevelAttentionNet,
    data: &DomainDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.n_classes as usize != net.config().n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            data.n_classes,
            net.config().n_classes
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::default();
    let mut logs = Vec::with_capacity(cfg.epochs);
    net.zero_grads();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if let Some(held_out) = data.held_out {
                if let Some(&i) = batch.iter().find(|&&i| data.samples[i].domain_label == held_out) {
                    return Err(Error::Leakage {
                        domain: data.domain_names[data.samples[i].domain_label as usize].clone(),
                    });
                }
            }
            let abort = |reason: String| Error::Training {
                epoch,
                step: step + 1,
                reason,
            };
            let x = data.batch_tensor(batch)?;
            let labels = data.labels(batch);
            let forward = || -> Result<(Tensor, Tensor)> {
                let logits = net.forward(&x)?;
                let loss = logits.cross_entropy(&labels)?;
                Ok((logits, loss))
            };
            let (logits, loss) = forward().map_err(|e| match e {
                Error::Numeric(m) => abort(m),
                e => e,
            })?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                return Err(abort(format!("loss is {value}")));
            }
            loss.backward()?;
            opt.step(net, cfg, lr)?;
            net.zero_grads();

            loss_sum += value * batch.len() as f64;
            correct += predictions(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            lr_in_effect: lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.3} lr {lr}",
            log.mean_loss,
            log.train_accuracy
        );
        let flow = on_epoch(&log);
        logs.push(log);
        if flow.is_break() {
            break;
        }
    }
    Ok(logs)
}

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 64;

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate(net: &MultiLevelAttentionNet, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let per_chunk = exec::map_indexed(chunks.len(), |c| -> Result<usize> {
        let batch = chunks[c];
        let logits = no_grad(|| net.forward(&data.batch_tensor(batch)?))?;
        Ok(predictions(&logits)
            .iter()
            .zip(data.labels(batch))
            .filter(|(p, l)| **p == *l)
            .count())
    });
    let mut correct = 0;
    for c in per_chunk {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}
