use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{build_enhanced_decoder, Discriminator, NetConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::manifest::{fingerprint, Manifest};
use crate::params::VarStore;

const FORMAT: &str = "vqtok-tokenizer/1";
const ENCODER_FILE: &str = "encoder.safetensors";
const DECODER_FILE: &str = "decoder.safetensors";
const DISC_FILE: &str = "discriminator.safetensors";
const CONFIG_FILE: &str = "net_config.json";
const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Joint encoder, codebook and convolutional decoder training.
    Phase1,
    /// Frozen encoder and codebook, attention-enhanced decoder finetuning.
    Phase2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase1" => Ok(Phase::Phase1),
            "phase2" => Ok(Phase::Phase2),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// Digests of the phase-1 parameters a phase-2 checkpoint must keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentDigests {
    pub encoder: String,
    pub codebook: String,
}

/// Tokenizer parameters plus the bookkeeping needed to audit them.
#[derive(Debug, Clone)]
pub struct TokenizerCheckpoint {
    pub config: NetConfig,
    pub phase: Phase,
    pub step: u64,
    /// `encoder.*` and `quant.*` parameters.
    pub encoder: VarStore,
    /// `decoder.*` parameters.
    pub decoder: VarStore,
    pub discriminator: Option<VarStore>,
    pub parent: Option<ParentDigests>,
    /// Fingerprint of the run configuration that produced this checkpoint.
    pub run_fingerprint: Option<String>,
}

impl TokenizerCheckpoint {
    /// Freshly initialised phase-1 parameters.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut encoder = VarStore::new(seed, DType::F32);
        let mut decoder = VarStore::new(seed, DType::F32);
        let mut disc = VarStore::new(seed, DType::F32);
        Tokenizer::build(&mut encoder, &mut decoder, config, false)?;
        Discriminator::new(&mut disc.scope("disc"), config)?;
        Ok(Self {
            config: config.clone(),
            phase: Phase::Phase1,
            step: 0,
            encoder,
            decoder,
            discriminator: Some(disc),
            parent: None,
            run_fingerprint: None,
        })
    }

    /// Builds the networks over this checkpoint's stores. Phase-2 checkpoints
    /// get the enhanced decoder and a frozen encoder store.
    pub fn tokenizer(&mut self) -> Result<Tokenizer> {
        let enhanced = self.phase == Phase::Phase2;
        self.encoder.set_frozen(enhanced);
        Tokenizer::build(&mut self.encoder, &mut self.decoder, &self.config, enhanced)
    }

    /// Builds the discriminator, initialising it from `seed` when absent.
    pub fn build_discriminator(&mut self, seed: u64) -> Result<Discriminator> {
        let store = self
            .discriminator
            .get_or_insert_with(|| VarStore::new(seed, DType::F32));
        Discriminator::new(&mut store.scope("disc"), &self.config)
    }

    pub fn config_fingerprint(&self) -> Result<String> {
        fingerprint(&self.config)
    }

    pub fn encoder_digest(&self) -> Result<String> {
        self.encoder.digest_prefix("encoder.")
    }

    pub fn codebook_digest(&self) -> Result<String> {
        self.encoder.digest_prefix("quant.")
    }

    /// Digest of everything that determines the token indices: encoder,
    /// codebook and config. Unchanged by phase 2.
    pub fn token_digest(&self) -> Result<String> {
        let joined = format!("{}:{}:{}", self.config_fingerprint()?, self.encoder_digest()?, self.codebook_digest()?);
        Ok(crate::manifest::sha256_hex(joined.as_bytes()))
    }

    pub fn decoder_digest(&self) -> Result<String> {
        self.decoder.digest_prefix("decoder.")
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.num_parameters() + self.decoder.num_parameters()
    }

    /// Starts phase 2 from a phase-1 checkpoint: the encoder and codebook
    /// are copied and frozen, the decoder gains identity-initialised
    /// attention whose fresh weights are drawn from `seed`.
    pub fn begin_phase2(&self, seed: u64) -> Result<Self> {
        if self.phase != Phase::Phase1 {
            return Err(Error::Contract(format!("phase 2 needs a phase1 parent, got {}", self.phase)));
        }
        let mut encoder = self.encoder.deep_copy()?;
        encoder.set_frozen(true);
        let (decoder, _) = build_enhanced_decoder(&self.decoder, &self.config, seed)?;
        let discriminator = match &self.discriminator {
            Some(d) => Some(d.deep_copy()?),
            None => None,
        };
        Ok(Self {
            config: self.config.clone(),
            phase: Phase::Phase2,
            step: 0,
            encoder,
            decoder,
            discriminator,
            parent: Some(ParentDigests {
                encoder: self.encoder_digest()?,
                codebook: self.codebook_digest()?,
            }),
            run_fingerprint: None,
        })
    }

    /// Phase-2 checkpoints must carry the parent's encoder and codebook
    /// bit for bit.
    pub fn verify_freeze(&self) -> Result<()> {
        if self.phase != Phase::Phase2 {
            return Ok(());
        }
        let parent = self
            .parent
            .as_ref()
            .ok_or_else(|| Error::Contract("phase2 checkpoint without parent digests".into()))?;
        check_digest("encoder", &parent.encoder, &self.encoder_digest()?)?;
        check_digest("codebook", &parent.codebook, &self.codebook_digest()?)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let mut m = Manifest::new();
        m.set("format", FORMAT)
            .set("phase", self.phase)
            .set("step", self.step)
            .set("config_fingerprint", self.config_fingerprint()?)
            .set("encoder_digest", self.encoder_digest()?)
            .set("codebook_digest", self.codebook_digest()?)
            .set("decoder_digest", self.decoder_digest()?)
            .set("num_parameters", self.num_parameters());
        if let Some(p) = &self.parent {
            m.set("parent_encoder_digest", &p.encoder)
                .set("parent_codebook_digest", &p.codebook);
        }
        if let Some(r) = &self.run_fingerprint {
            m.set("run_fingerprint", r);
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.verify_freeze()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(&dir.join(ENCODER_FILE))?;
        self.decoder.save(&dir.join(DECODER_FILE))?;
        if let Some(d) = &self.discriminator {
            d.save(&dir.join(DISC_FILE))?;
        }
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let p = dir.join(CONFIG_FILE);
        std::fs::write(&p, cfg).map_err(|e| Error::io(&p, e))?;
        self.manifest()?.write(&dir.join(MANIFEST_FILE))
    }

    /// Loads and verifies a checkpoint directory: stored digests must match
    /// the parameters, and phase-2 checkpoints must match their parent.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join(MANIFEST_FILE))?;
        if m.require("format")? != FORMAT {
            return Err(Error::Contract(format!("{} is not a tokenizer checkpoint", dir.display())));
        }
        let p = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: NetConfig = serde_json::from_str(&text)?;
        let phase: Phase = m.require("phase")?.parse()?;
        let step = m
            .require("step")?
            .parse()
            .map_err(|_| Error::Serde("manifest step is not an integer".into()))?;
        let encoder = VarStore::from_file(&dir.join(ENCODER_FILE), 0, DType::F32)?;
        let decoder = VarStore::from_file(&dir.join(DECODER_FILE), 0, DType::F32)?;
        let disc_path = dir.join(DISC_FILE);
        let discriminator = if disc_path.exists() {
            Some(VarStore::from_file(&disc_path, 0, DType::F32)?)
        } else {
            None
        };
        let parent = match (m.get("parent_encoder_digest"), m.get("parent_codebook_digest")) {
            (Some(e), Some(c)) => Some(ParentDigests {
                encoder: e.to_string(),
                codebook: c.to_string(),
            }),
            _ => None,
        };
        let ck = Self {
            config,
            phase,
            step,
            encoder,
            decoder,
            discriminator,
            parent,
            run_fingerprint: m.get("run_fingerprint").map(str::to_string),
        };
        check_digest("config", m.require("config_fingerprint")?, &ck.config_fingerprint()?)?;
        check_digest("encoder", m.require("encoder_digest")?, &ck.encoder_digest()?)?;
        check_digest("codebook", m.require("codebook_digest")?, &ck.codebook_digest()?)?;
        check_digest("decoder", m.require("decoder_digest")?, &ck.decoder_digest()?)?;
        ck.verify_freeze()?;
        Ok(ck)
    }
}

fn check_digest(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::DigestMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}
