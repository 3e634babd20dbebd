//! SGD with momentum, learning-rate schedules, and batched evaluation.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::params::Bindings;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    /// Multiply the rate by `decay_factor` every `decay_epoch` epochs.
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_decay() -> f64 {
    0.1
}

fn default_batch() -> usize {
    32
}

impl OptimizerConfig {
    /// lr 0.001 for 15 epochs, divided by 10 after epoch 10.
    pub fn finetune_schedule() -> Self {
        OptimizerConfig {
            lr: 0.001,
            momentum: 0.9,
            epochs: 15,
            decay_epoch: Some(10),
            decay_factor: 0.1,
            weight_decay: 0.0,
            batch_size: 32,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "finetune" => Ok(Self::finetune_schedule()),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.decay_epoch == Some(0) {
            return Err(Error::Config("decay_epoch must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_epoch {
            Some(d) => self.lr * self.decay_factor.powi((epoch / d) as i32),
            None => self.lr,
        }
    }
}

/// Momentum SGD over whatever parameters a forward pass bound as trainable.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, bindings: &Bindings, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, var) in bindings {
            let Some(g) = grads.get(*var) else { continue };
            let param = net
                .params_mut()
                .param_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if !param.trainable {
                continue;
            }
            let w = param.value.data_mut();
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Gathers rows `idx` of a per-sample embedding table.
pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = table.dims2()?;
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out)
}

/// Frozen-encoder embeddings of every sample, or `None` without DS.
pub fn embed_dataset(net: &Network, data: &Dataset, batch_size: usize) -> Result<Option<Tensor>> {
    let Some(enc) = net.encoder() else { return Ok(None) };
    let mut rows = Vec::with_capacity(data.len() * enc.z_dim());
    for idx in data.batches(batch_size) {
        let (x, _) = data.batch(&idx)?;
        rows.extend_from_slice(enc.encode(&x)?.data());
    }
    Ok(Some(Tensor::new(vec![data.len(), enc.z_dim()], rows)?))
}

/// One pass over `data` in shuffled batches. Returns the mean batch loss.
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    opt: &mut Sgd,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    embeddings: Option<&Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut total = 0.0;
    let batches = data.shuffled_batches(batch_size, rng);
    for idx in &batches {
        let (x, labels) = data.batch(idx)?;
        let z = embeddings.map(|t| gather_rows(t, idx)).transpose()?;
        let mut tape = Tape::new();
        let f = net.forward_with_embedding(&mut tape, &x, Mode::Train, z.as_ref())?;
        let loss = tape.softmax_cross_entropy(f.logits, &labels)?;
        total += tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        opt.step(net, &f.bindings, &grads, lr)?;
        net.apply_bn(&f.bn)?;
    }
    Ok(total / batches.len() as f64)
}

/// Eval-mode logits (N×classes) and, if `block` is given, that block's
/// per-image channel means (N×C), in dataset order.
pub fn predict(
    net: &Network,
    data: &Dataset,
    batch_size: usize,
    block: Option<usize>,
) -> Result<(Tensor, Option<Tensor>)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut logits = Vec::new();
    let mut feats = Vec::new();
    for idx in data.batches(batch_size) {
        let (x, _) = data.batch(&idx)?;
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, &x, Mode::Eval)?;
        logits.extend_from_slice(tape.value(f.logits).data());
        if let Some(k) = block {
            let v = *f
                .blocks
                .get(k.wrapping_sub(1))
                .ok_or_else(|| Error::UnknownSite(format!("block{k}")))?;
            let pooled = tape.global_avg_pool(v)?;
            feats.extend_from_slice(tape.value(pooled).data());
        }
    }
    let n = data.len();
    let logits = Tensor::new(vec![n, logits.len() / n], logits)?;
    let feats = match block {
        Some(_) => Some(Tensor::new(vec![n, feats.len() / n], feats)?),
        None => None,
    };
    Ok((logits, feats))
}
