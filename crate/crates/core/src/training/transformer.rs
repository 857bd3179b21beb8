use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Adam, MetricsLog, OptimConfig, RunConfig, Schedule};
use crate::data::batch_indices;
use crate::error::{Error, Result};
use crate::manifest::{fingerprint, Manifest};
use crate::rng;
use crate::transformers::{
    mask_schedule, token_cross_entropy, ModelKind, TokenCorpus, Transformer, TransformerCheckpoint, TransformerConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerTrainConfig {
    pub kind: ModelKind,
    pub run: RunConfig,
    pub model: TransformerConfig,
    /// Condition on class labels instead of a learned start token.
    pub conditional: bool,
}

impl TransformerTrainConfig {
    /// AdamW (0.9, 0.96, wd 1e-2) with exponential decay.
    // full scale: lr 1e-4 decaying to 5e-6 from iteration 80k of 500k
    pub fn ar() -> Self {
        Self {
            kind: ModelKind::Ar,
            run: RunConfig {
                batch_size: 64,
                iterations: 3_000,
                optim: OptimConfig {
                    lr: 3e-4,
                    beta1: 0.9,
                    beta2: 0.96,
                    weight_decay: 1e-2,
                    schedule: Schedule::Exponential {
                        end_lr: 1.5e-5,
                        start_iter: 500,
                    },
                    ..OptimConfig::default()
                },
                flip: false,
                ..RunConfig::default()
            },
            model: TransformerConfig::default(),
            conditional: false,
        }
    }

    /// AdamW (0.9, 0.96, wd 1e-2) with linear decay to zero.
    // full scale: lr 1e-4 decaying linearly to 0 from iteration 50k
    pub fn nar() -> Self {
        let mut c = Self::ar();
        c.kind = ModelKind::Nar;
        c.run.optim.schedule = Schedule::Linear {
            end_lr: 0.0,
            start_iter: 300,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.model.validate()
    }
}

/// Next-token (AR) or masked-token (NAR) training on a token corpus.
pub struct TransformerTrainer<'a> {
    pub cfg: TransformerTrainConfig,
    ck: TransformerCheckpoint,
    model: Transformer,
    opt: Adam,
    train: &'a TokenCorpus,
    val: &'a TokenCorpus,
    corpus_digest: String,
}

/// Positions to hide in one NAR training sequence: a mask ratio drawn from
/// the cosine schedule at a uniform time, at least one position.
pub fn nar_training_mask<R: Rng>(n: usize, rng: &mut R) -> Vec<bool> {
    let ratio = mask_schedule(rng.random::<f64>());
    let count = ((n as f64 * ratio).ceil() as usize).clamp(1, n);
    let mut pos: Vec<usize> = (0..n).collect();
    pos.shuffle(rng);
    let mut m = vec![false; n];
    for &p in &pos[..count] {
        m[p] = true;
    }
    m
}

impl<'a> TransformerTrainer<'a> {
    pub fn new(
        mut ck: TransformerCheckpoint,
        train: &'a TokenCorpus,
        val: &'a TokenCorpus,
        cfg: TransformerTrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        for c in [train, val] {
            ck.check_tokenizer(&c.tokenizer_digest, c.vocab)?;
            if c.seq_len != ck.config.seq_len {
                return Err(Error::Config(format!(
                    "corpus sequences of {} tokens, transformer expects {}",
                    c.seq_len, ck.config.seq_len
                )));
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Contract("empty token corpus".into()));
        }
        if ck.kind != cfg.kind || ck.config != cfg.model {
            return Err(Error::Config("checkpoint does not match the transformer configuration".into()));
        }
        let model = ck.model()?;
        let opt = Adam::new(cfg.run.optim)?;
        Ok(Self {
            corpus_digest: train.digest(),
            cfg,
            ck,
            model,
            opt,
            train,
            val,
        })
    }

    /// Fresh checkpoint for `cfg` on tokens of `corpus`.
    pub fn init(train: &'a TokenCorpus, val: &'a TokenCorpus, mut cfg: TransformerTrainConfig) -> Result<Self> {
        cfg.model.vocab = train.vocab;
        cfg.model.seq_len = train.seq_len;
        if cfg.conditional {
            cfg.model.classes = train.labels.iter().max().map_or(0, |&m| m as usize + 1);
        }
        let ck = TransformerCheckpoint::init(
            &cfg.model,
            cfg.kind,
            &train.tokenizer_digest,
            rng::derive_seed(cfg.run.seed, "transformer-init"),
        )?;
        Self::new(ck, train, val, cfg)
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn checkpoint(&self) -> &TransformerCheckpoint {
        &self.ck
    }

    pub fn into_checkpoint(self) -> TransformerCheckpoint {
        self.ck
    }

    pub fn step_count(&self) -> u64 {
        self.ck.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.train.len() as u64).div_ceil(self.cfg.run.batch_size as u64).max(1)
    }

    fn labels<'l>(&self, labels: &'l [u32]) -> Option<&'l [u32]> {
        self.cfg.conditional.then_some(labels)
    }

    /// Loss of one batch; `seed` drives the NAR masks and, when `train`,
    /// dropout.
    fn batch_loss(&self, tokens: &[u32], labels: &[u32], seed: u64, train: bool) -> Result<Tensor> {
        let b = labels.len();
        let cond = self.model.conditions(b, self.labels(labels))?;
        let mut drop_rng = rng::stream(seed, "dropout");
        let drop = if train { Some(&mut drop_rng) } else { None };
        match self.cfg.kind {
            ModelKind::Ar => {
                let logits = self.model.ar_teacher_forced(tokens, b, &cond, drop)?;
                token_cross_entropy(&logits, tokens, None)
            }
            ModelKind::Nar => {
                let n = self.model.config.seq_len;
                let mask_id = self.model.config.mask_token();
                let mut weight = Vec::with_capacity(tokens.len());
                for i in 0..b {
                    weight.extend(nar_training_mask(n, &mut rng::stream_n(seed, "mask", i as u64)));
                }
                let input: Vec<u32> = tokens.iter().zip(&weight).map(|(&t, &m)| if m { mask_id } else { t }).collect();
                let logits = self.model.nar_forward(&input, b, &cond, drop)?;
                token_cross_entropy(&logits, tokens, Some(&weight))
            }
        }
    }

    pub fn step(&mut self) -> Result<f64> {
        let step = self.ck.step;
        let seed = rng::derive_seed(self.cfg.run.seed, "transformer-batch");
        let idx = batch_indices(self.train.len(), self.cfg.run.batch_size, seed, step);
        let (tokens, labels) = self.train.gather(&idx);
        let loss = self.batch_loss(&tokens, &labels, rng::derive_seed_n(seed, step), true)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("transformer loss became {value} at step {step}")));
        }
        let grads = loss.backward()?;
        self.opt.step(&self.ck.store, "", &grads, self.cfg.run.lr_at(step))?;
        self.ck.step += 1;
        Ok(value)
    }

    /// Mean loss over a corpus without dropout; NAR masks are fixed per
    /// sequence index.
    pub fn evaluate(&self, corpus: &TokenCorpus) -> Result<f64> {
        let seed = rng::derive_seed(self.cfg.run.seed, "validation");
        let mut total = 0.0;
        for start in (0..corpus.len()).step_by(128) {
            let idx: Vec<usize> = (start..(start + 128).min(corpus.len())).collect();
            let (tokens, labels) = corpus.gather(&idx);
            let l = self.batch_loss(&tokens, &labels, rng::derive_seed_n(seed, start as u64), false)?;
            total += l.to_scalar::<f32>()? as f64 * idx.len() as f64;
        }
        Ok(total / corpus.len() as f64)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        self.evaluate(self.val)
    }

    /// Trains to the configured iteration count, logging the training loss
    /// every `log_every` steps and the validation loss at every epoch end.
    pub fn run(&mut self, log: &mut MetricsLog) -> Result<()> {
        let kind = self.cfg.kind.to_string();
        let epoch = self.steps_per_epoch();
        while self.ck.step < self.cfg.run.iterations {
            let step = self.ck.step;
            let loss = self.step()?;
            let done = self.ck.step >= self.cfg.run.iterations;
            if step % self.cfg.run.log_every == 0 || done {
                log.record(json!({"kind": format!("{kind}_train"), "step": step, "lr": self.cfg.run.lr_at(step), "loss": loss}))?;
            }
            if self.ck.step % epoch == 0 || done {
                if self.train.digest() != self.corpus_digest {
                    return Err(Error::Contract("token corpus changed during transformer training".into()));
                }
                log.record(json!({
                    "kind": "val_loss",
                    "model": kind,
                    "step": self.ck.step,
                    "epoch": self.ck.step as f64 / epoch as f64,
                    "val_loss": self.validation_loss()?,
                }))?;
            }
        }
        Ok(())
    }

    pub fn save_state(&self, dir: &Path) -> Result<()> {
        self.ck.save(&dir.join("checkpoint"))?;
        self.opt.save(&dir.join("opt.safetensors"))?;
        let mut m = Manifest::new();
        m.set("format", "vqtok-transformer-state/1")
            .set("step", self.ck.step)
            .set("run_fingerprint", fingerprint(&self.cfg)?);
        m.write(&dir.join("state.txt"))
    }

    pub fn resume(dir: &Path, train: &'a TokenCorpus, val: &'a TokenCorpus, cfg: TransformerTrainConfig) -> Result<Self> {
        let m = Manifest::read(&dir.join("state.txt"))?;
        let fp = fingerprint(&cfg)?;
        if m.require("run_fingerprint")? != fp {
            return Err(Error::DigestMismatch {
                what: "run configuration".into(),
                expected: m.require("run_fingerprint")?.into(),
                found: fp,
            });
        }
        let ck = TransformerCheckpoint::load(&dir.join("checkpoint"))?;
        let mut t = Self::new(ck, train, val, cfg)?;
        t.opt = Adam::load(t.cfg.run.optim, &dir.join("opt.safetensors"))?;
        Ok(t)
    }
}
