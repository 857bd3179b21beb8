use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Adam, MetricsLog, OptimConfig, RunConfig, Schedule};
use crate::autoenc::{Discriminator, Phase, Tokenizer, TokenizerCheckpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{assemble_loss, hinge_d_loss, LossConfig, LossInputs, LossReport, ProxyNet};
use crate::manifest::{fingerprint, Manifest};
use crate::quantizer::{kmeans, renormalize_codes, usage_distribution, CodebookVariant, UsageTally};
use crate::rng;

const CODES: &str = "quant.codes";

/// Periodic k-means re-initialisation of the codebook from encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansReinit {
    /// Re-cluster every this many steps.
    pub every: u64,
    /// No re-clustering at or after this step.
    pub until: u64,
    /// Training images encoded to collect features.
    pub sample_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub run: RunConfig,
    /// Discriminator optimiser; the generator's when absent.
    pub disc_optim: Option<OptimConfig>,
    pub loss: LossConfig,
    pub kmeans: Option<KMeansReinit>,
    /// Before the first phase-1 step, cluster this many training images'
    /// encoder outputs into the initial codebook.
    pub kmeans_init: Option<usize>,
    /// Steps per codebook-usage accounting window.
    pub usage_every: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

impl TokenizerTrainConfig {
    /// Adam (0.9, 0.99), lr 1e-4 with cosine decay to 5e-5.
    pub fn phase1() -> Self {
        Self {
            run: RunConfig {
                optim: OptimConfig {
                    lr: 1e-4,
                    beta1: 0.9,
                    beta2: 0.99,
                    schedule: Schedule::Cosine { end_lr: 5e-5 },
                    ..OptimConfig::default()
                },
                ..RunConfig::default()
            },
            disc_optim: None,
            loss: LossConfig::phase1(),
            kmeans: None,
            kmeans_init: None,
            usage_every: 100,
        }
    }

    /// Adam (0.5, 0.9), lr 5e-5.
    pub fn phase2() -> Self {
        Self {
            run: RunConfig {
                iterations: 2_000,
                optim: OptimConfig {
                    lr: 5e-5,
                    beta1: 0.5,
                    beta2: 0.9,
                    ..OptimConfig::default()
                },
                ..RunConfig::default()
            },
            loss: LossConfig::phase2(),
            ..Self::phase1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if let Some(d) = &self.disc_optim {
            d.validate()?;
        }
        self.loss.validate()?;
        if self.kmeans_init == Some(0) {
            return Err(Error::Config("k-means initialisation needs a positive sample".into()));
        }
        if let Some(k) = &self.kmeans {
            if k.every == 0 || k.sample_images == 0 {
                return Err(Error::Config("k-means re-initialisation needs positive period and sample".into()));
            }
        }
        if self.usage_every == 0 {
            return Err(Error::Config("usage_every must be positive".into()));
        }
        Ok(())
    }

    /// First step with the adversarial term switched on.
    pub fn adversarial_start(&self) -> u64 {
        (self.loss.adv_warmup * self.run.iterations as f64).ceil() as u64
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
    pub d_loss: Option<f64>,
}

/// Alternating generator / discriminator optimisation of a tokenizer
/// checkpoint. The checkpoint's phase selects the objective: phase 2 trains
/// only the decoder and refuses any change to the frozen parameters.
pub struct TokenizerTrainer<'a> {
    pub cfg: TokenizerTrainConfig,
    ck: TokenizerCheckpoint,
    tok: Tokenizer,
    disc: Discriminator,
    proxy: ProxyNet,
    opt_g: Adam,
    opt_d: Adam,
    data: &'a Dataset,
    tally: UsageTally,
}

impl<'a> TokenizerTrainer<'a> {
    pub fn new(mut ck: TokenizerCheckpoint, proxy: ProxyNet, data: &'a Dataset, cfg: TokenizerTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.size() != ck.config.image_size {
            return Err(Error::Config(format!(
                "tokenizer expects {}px images, data has {}px",
                ck.config.image_size,
                data.size()
            )));
        }
        if data.is_empty() {
            return Err(Error::Contract("empty training split".into()));
        }
        ck.verify_freeze()?;
        let tok = ck.tokenizer()?;
        let disc = ck.build_discriminator(rng::derive_seed(cfg.run.seed, "disc"))?;
        let opt_g = Adam::new(cfg.run.optim)?;
        let opt_d = Adam::new(cfg.disc_optim.unwrap_or(cfg.run.optim))?;
        let tally = UsageTally::new(ck.config.codebook_size);
        ck.run_fingerprint = Some(fingerprint(&cfg)?);
        Ok(Self {
            cfg,
            ck,
            tok,
            disc,
            proxy,
            opt_g,
            opt_d,
            data,
            tally,
        })
    }

    pub fn checkpoint(&self) -> &TokenizerCheckpoint {
        &self.ck
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tok
    }

    pub fn into_checkpoint(self) -> TokenizerCheckpoint {
        self.ck
    }

    pub fn step_count(&self) -> u64 {
        self.ck.step
    }

    pub fn is_done(&self) -> bool {
        self.ck.step >= self.cfg.run.iterations
    }

    fn phase(&self) -> Phase {
        self.ck.phase
    }

    fn reinit_codebook(&mut self, step: u64) -> Result<()> {
        if self.phase() == Phase::Phase2 {
            return Ok(());
        }
        let sample = match (self.cfg.kmeans_init, self.cfg.kmeans) {
            (Some(n), _) if step == 0 => n,
            (_, Some(k)) if step > 0 && step % k.every == 0 && step < k.until => k.sample_images,
            _ => return Ok(()),
        };
        let n = sample.min(self.data.len());
        let mut rows: Vec<f32> = Vec::new();
        let mut dim = 0;
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let x = self.data.batch(&idx, None, DType::F32)?;
            let latent = self.tok.quantizer.prepare(&self.tok.encoder.forward(&x)?.detach())?;
            let r = latent.rows()?;
            dim = r.dim(1)?;
            rows.extend(r.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        let size = self.ck.config.codebook_size;
        let km = kmeans(&rows, dim, size, rng::derive_seed_n(self.cfg.run.seed, step), 20)?;
        let centers = candle_core::Tensor::from_vec(km.centers, (size, dim), &candle_core::Device::Cpu)?;
        self.ck.encoder.insert(CODES, centers)?;
        if matches!(self.ck.config.codebook, CodebookVariant::FactorizedNormed { .. }) {
            renormalize_codes(&self.ck.encoder, CODES)?;
        }
        self.opt_g.reset(CODES);
        Ok(())
    }

    /// One generator step followed, once the warm-up is over, by one
    /// discriminator step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.ck.step;
        self.reinit_codebook(step)?;
        let phase = self.phase();
        let (_, x) = self.cfg.run.batch(self.data, "tokenizer-batch", step, DType::F32)?;
        let out = self.tok.quantize(&x)?;
        let x_hat = self.tok.decoder.forward(&out.decoder_input)?;
        let usage = match phase {
            Phase::Phase1 => Some(usage_distribution(&out.latent, &self.tok.quantizer.codebook)?),
            Phase::Phase2 => None,
        };
        let adv = self.cfg.loss.lambda_adv > 0.0 && step >= self.cfg.adversarial_start();
        let fake_logits = if adv { Some(self.disc.forward(&x_hat)?) } else { None };
        let inputs = LossInputs {
            x: &x,
            x_hat: &x_hat,
            latent: Some(&out.latent),
            quant: Some(&out.quant),
            usage: usage.as_ref(),
            disc_fake: fake_logits.as_ref(),
            encoder_frozen: self.ck.encoder.is_frozen(),
        };
        let loss = assemble_loss(phase, &self.proxy, inputs, &self.cfg.loss)?;
        let lr = self.cfg.run.lr_at(step);
        let grads = loss.total.backward()?;
        if phase == Phase::Phase1 {
            self.opt_g.step(&self.ck.encoder, "", &grads, lr)?;
        }
        self.opt_g.step(&self.ck.decoder, "", &grads, lr)?;
        drop(grads);

        let d_loss = if adv {
            let disc_lr = self.cfg.disc_optim.unwrap_or(self.cfg.run.optim).lr_at(step, self.cfg.run.iterations);
            let d = hinge_d_loss(&self.disc.forward(&x)?, &self.disc.forward(&x_hat.detach())?)?;
            let value = d.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("discriminator loss became {value} at step {step}")));
            }
            let grads = d.backward()?;
            if let Some(store) = &self.ck.discriminator {
                self.opt_d.step(store, "", &grads, disc_lr)?;
            }
            Some(value)
        } else {
            None
        };

        if phase == Phase::Phase1 && matches!(self.ck.config.codebook, CodebookVariant::FactorizedNormed { .. }) {
            renormalize_codes(&self.ck.encoder, CODES)?;
        }
        for i in 0..out.quant.batch() {
            self.tally.record(out.quant.grid(i))?;
        }
        self.ck.step += 1;
        Ok(StepRecord {
            step,
            lr,
            loss: loss.report,
            d_loss,
        })
    }

    /// Runs until the configured iteration count, logging step records and
    /// windowed codebook usage.
    pub fn run(&mut self, log: &mut MetricsLog) -> Result<()> {
        let kind = self.phase().to_string();
        while !self.is_done() {
            let rec = self.step()?;
            let last = self.is_done();
            if rec.step % self.cfg.run.log_every == 0 || last {
                log.record(json!({"kind": kind, "step": rec.step, "lr": rec.lr, "loss": rec.loss, "d_loss": rec.d_loss}))?;
            }
            if self.ck.step % self.cfg.usage_every == 0 || last {
                log.record(json!({"kind": "usage", "phase": kind, "step": rec.step, "usage": self.tally.fraction()?}))?;
                self.tally.reset();
            }
        }
        if self.phase() == Phase::Phase2 {
            self.ck.verify_freeze()?;
        }
        Ok(())
    }

    /// Writes checkpoint, optimiser moments and step counter.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        self.ck.save(&dir.join("checkpoint"))?;
        self.opt_g.save(&dir.join("opt_g.safetensors"))?;
        self.opt_d.save(&dir.join("opt_d.safetensors"))?;
        let mut m = Manifest::new();
        m.set("format", "vqtok-train-state/1")
            .set("step", self.ck.step)
            .set("run_fingerprint", fingerprint(&self.cfg)?);
        m.write(&dir.join("state.txt"))
    }

    pub fn resume(dir: &Path, proxy: ProxyNet, data: &'a Dataset, cfg: TokenizerTrainConfig) -> Result<Self> {
        let m = Manifest::read(&dir.join("state.txt"))?;
        let fp = fingerprint(&cfg)?;
        if m.require("run_fingerprint")? != fp {
            return Err(Error::DigestMismatch {
                what: "run configuration".into(),
                expected: m.require("run_fingerprint")?.into(),
                found: fp,
            });
        }
        let ck = TokenizerCheckpoint::load(&dir.join("checkpoint"))?;
        let mut t = Self::new(ck, proxy, data, cfg)?;
        t.opt_g = Adam::load(t.cfg.run.optim, &dir.join("opt_g.safetensors"))?;
        t.opt_d = Adam::load(t.cfg.disc_optim.unwrap_or(t.cfg.run.optim), &dir.join("opt_d.safetensors"))?;
        Ok(t)
    }
}
