//! Training loops: the proxy feature classifier, phase-1 and phase-2
//! tokenizer training, and the token transformers.
//!
//! Every random choice at step `t` is drawn from streams derived from
//! `(seed, t)`, so a loop resumed from a saved state replays exactly the
//! steps an uninterrupted run would have taken.

mod optim;
mod tokenizer;
mod transformer;

pub use optim::{Adam, OptimConfig, Schedule};
pub use tokenizer::{KMeansReinit, StepRecord, TokenizerTrainConfig, TokenizerTrainer};
pub use transformer::{nar_training_mask, TransformerTrainConfig, TransformerTrainer};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{batch_indices, flip_flags, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ProxyCheckpoint, ProxyConfig, ProxyNet};
use crate::rng;

/// Settings shared by every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub optim: OptimConfig,
    /// Random horizontal flips of training images.
    pub flip: bool,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            iterations: 10_000,
            optim: OptimConfig::default(),
            flip: true,
            log_every: 50,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iterations must be positive".into()));
        }
        self.optim.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.optim.lr_at(step, self.iterations)
    }

    /// Training batch for `step`, drawn with the given stream label.
    pub fn batch(&self, data: &Dataset, label: &str, step: u64, dtype: DType) -> Result<(Vec<usize>, Tensor)> {
        let seed = rng::derive_seed(self.seed, label);
        let idx = batch_indices(data.len(), self.batch_size, seed, step);
        let flips = self.flip.then(|| flip_flags(idx.len(), seed, step));
        let x = data.batch(&idx, flips.as_deref(), dtype)?;
        Ok((idx, x))
    }
}

/// Append-only line-delimited metric records, optionally mirrored to disk.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    records: Vec<Value>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, value: Value) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{value}").map_err(|e| Error::io(p, e))?;
        }
        self.records.push(value);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    /// Records whose `kind` field equals `kind`.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r["kind"] == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyTrainConfig {
    pub run: RunConfig,
    pub net: ProxyConfig,
    /// Held-out accuracy required before the network is frozen.
    pub min_accuracy: f64,
    /// Freeze even when the accuracy floor is missed.
    pub force: bool,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        Self {
            run: RunConfig {
                batch_size: 64,
                iterations: 1500,
                optim: OptimConfig {
                    lr: 2e-3,
                    ..OptimConfig::default()
                },
                ..RunConfig::default()
            },
            net: ProxyConfig::default(),
            min_accuracy: 0.8,
            force: false,
        }
    }
}

/// Fraction of `data` the network classifies correctly.
pub fn classifier_accuracy(net: &ProxyNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
        let pred = net.logits(&data.batch(&idx, None, DType::F32)?)?.argmax(1)?.to_vec1::<u32>()?;
        correct += idx.iter().zip(pred).filter(|(&i, p)| data.labels()[i] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the proxy classifier on labelled images and freezes it when the
/// held-out accuracy clears the floor (or `force` is set).
pub fn train_proxy(train: &Dataset, val: &Dataset, cfg: &ProxyTrainConfig, log: &mut MetricsLog) -> Result<ProxyCheckpoint> {
    cfg.run.validate()?;
    if train.classes() != cfg.net.classes || train.size() != cfg.net.image_size {
        return Err(Error::Config(format!(
            "proxy expects {} classes of {}px images, data has {} classes of {}px",
            cfg.net.classes,
            cfg.net.image_size,
            train.classes(),
            train.size()
        )));
    }
    let mut ck = ProxyCheckpoint::init(&cfg.net, rng::derive_seed(cfg.run.seed, "proxy"), DType::F32)?;
    let net = ck.network()?;
    let mut opt = Adam::new(cfg.run.optim)?;
    for step in 0..cfg.run.iterations {
        let (idx, x) = cfg.run.batch(train, "proxy-batch", step, DType::F32)?;
        let labels: Vec<u32> = idx.iter().map(|&i| train.labels()[i]).collect();
        let target = Tensor::new(labels.as_slice(), x.device())?;
        let loss = candle_nn::loss::cross_entropy(&net.logits(&x)?, &target)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("proxy loss became {value} at step {step}")));
        }
        let grads = loss.backward()?;
        opt.step(&ck.store, "", &grads, cfg.run.lr_at(step))?;
        if step % cfg.run.log_every == 0 || step + 1 == cfg.run.iterations {
            log.record(serde_json::json!({"kind": "proxy", "step": step, "loss": value}))?;
        }
    }
    ck.accuracy = classifier_accuracy(&net, val)?;
    ck.frozen = ck.accuracy >= cfg.min_accuracy || cfg.force;
    if ck.accuracy < cfg.min_accuracy {
        log::warn!(
            "proxy accuracy {:.3} is below the floor {:.3}{}",
            ck.accuracy,
            cfg.min_accuracy,
            if cfg.force { "; frozen anyway (forced)" } else { "; not frozen" }
        );
    }
    log.record(serde_json::json!({
        "kind": "proxy_eval",
        "accuracy": ck.accuracy,
        "frozen": ck.frozen,
        "digest": ck.digest()?,
    }))?;
    Ok(ck)
}
