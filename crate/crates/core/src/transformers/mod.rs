//! Token-grid transformers. Sequences are raster (row-major) scans of the
//! tokenizer's latent grid, preceded by a condition token: a class id for
//! class-conditional runs, a learned start token otherwise.

mod model;
mod sampling;

pub use model::{token_cross_entropy, ModelKind, Transformer, TransformerConfig};
pub use sampling::{
    ar_sample, commit_counts, mask_schedule, nar_sample, nar_sample_traced, nucleus_support, sample, sample_nucleus,
    softmax, SamplerConfig,
};

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::autoenc::Tokenizer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::manifest::{fingerprint, sha256_hex, Manifest};
use crate::params::VarStore;

/// Token sequences of a whole dataset under one tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub seq_len: usize,
    pub vocab: usize,
    pub tokenizer_digest: String,
}

impl TokenCorpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Concatenated sequences and labels for the given rows.
    pub fn gather(&self, idx: &[usize]) -> (Vec<u32>, Vec<u32>) {
        let tokens = idx.iter().flat_map(|&i| self.sequence(i).iter().copied()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (tokens, labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (tokens, labels) = self.gather(idx);
        Self {
            tokens,
            labels,
            ..self.clone()
        }
    }

    /// SHA-256 over tokens, labels and the producing tokenizer's digest.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * (self.tokens.len() + self.labels.len()) + 64);
        for t in self.tokens.iter().chain(&self.labels) {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        bytes.extend_from_slice(self.tokenizer_digest.as_bytes());
        sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a cached corpus, refusing one made by a different tokenizer.
    pub fn load(path: &Path, tokenizer_digest: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Serde(e.to_string()))?;
        if c.tokenizer_digest != tokenizer_digest {
            return Err(Error::DigestMismatch {
                what: format!("token corpus {}", path.display()),
                expected: tokenizer_digest.into(),
                found: c.tokenizer_digest,
            });
        }
        Ok(c)
    }
}

/// Encodes every image of `data` into its token sequence.
pub fn tokenize_dataset(tok: &Tokenizer, tokenizer_digest: &str, data: &Dataset) -> Result<TokenCorpus> {
    if data.size() != tok.config.image_size {
        return Err(Error::Config(format!(
            "tokenizer expects {}px images, data has {}px",
            tok.config.image_size,
            data.size()
        )));
    }
    let mut tokens = Vec::with_capacity(data.len() * tok.config.tokens_per_image());
    for start in (0..data.len()).step_by(128) {
        let idx: Vec<usize> = (start..(start + 128).min(data.len())).collect();
        let q = tok.tokens(&data.batch(&idx, None, DType::F32)?)?;
        tokens.extend_from_slice(q.indices());
    }
    Ok(TokenCorpus {
        tokens,
        labels: data.labels().to_vec(),
        seq_len: tok.config.tokens_per_image(),
        vocab: tok.config.codebook_size,
        tokenizer_digest: tokenizer_digest.to_string(),
    })
}

/// Reuses the corpus cached at `path` when it was made by the same
/// tokenizer, otherwise tokenizes and caches.
pub fn cached_corpus(path: &Path, tok: &Tokenizer, tokenizer_digest: &str, data: &Dataset) -> Result<TokenCorpus> {
    match TokenCorpus::load(path, tokenizer_digest) {
        Ok(c) if c.len() == data.len() => Ok(c),
        Ok(_) | Err(Error::Missing(_)) => {
            let c = tokenize_dataset(tok, tokenizer_digest, data)?;
            c.save(path)?;
            Ok(c)
        }
        Err(e) => Err(e),
    }
}

const WEIGHTS: &str = "transformer.safetensors";
const CONFIG: &str = "transformer_config.json";
const MANIFEST: &str = "manifest.txt";

/// Trained transformer weights with the tokenizer they model.
#[derive(Debug)]
pub struct TransformerCheckpoint {
    pub config: TransformerConfig,
    pub kind: ModelKind,
    pub store: VarStore,
    pub tokenizer_digest: String,
    pub step: u64,
}

impl TransformerCheckpoint {
    pub fn init(config: &TransformerConfig, kind: ModelKind, tokenizer_digest: &str, seed: u64) -> Result<Self> {
        let mut store = VarStore::new(seed, DType::F32);
        Transformer::new(&mut store.root(), config, kind)?;
        Ok(Self {
            config: config.clone(),
            kind,
            store,
            tokenizer_digest: tokenizer_digest.to_string(),
            step: 0,
        })
    }

    pub fn model(&mut self) -> Result<Transformer> {
        Transformer::new(&mut self.store.root(), &self.config, self.kind)
    }

    /// Errors unless the checkpoint was trained on tokens of `tokenizer_digest`
    /// over a codebook of `vocab` codes.
    pub fn check_tokenizer(&self, tokenizer_digest: &str, vocab: usize) -> Result<()> {
        if self.config.vocab != vocab {
            return Err(Error::Config(format!(
                "transformer vocabulary {} does not match codebook size {vocab}",
                self.config.vocab
            )));
        }
        if self.tokenizer_digest != tokenizer_digest {
            return Err(Error::DigestMismatch {
                what: "transformer tokenizer".into(),
                expected: self.tokenizer_digest.clone(),
                found: tokenizer_digest.into(),
            });
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(WEIGHTS))?;
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(dir.join(CONFIG), json).map_err(|e| Error::io(dir.join(CONFIG), e))?;
        let mut m = Manifest::new();
        m.set("format", "vqtok-transformer/1")
            .set("kind", self.kind)
            .set("step", self.step)
            .set("tokenizer_digest", &self.tokenizer_digest)
            .set("config_fingerprint", fingerprint(&self.config)?)
            .set("weights_digest", self.digest()?);
        m.write(&dir.join(MANIFEST))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join(MANIFEST))?;
        let cfg_path = dir.join(CONFIG);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: TransformerConfig = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        let store = VarStore::from_file(&dir.join(WEIGHTS), 0, DType::F32)?;
        let ck = Self {
            config,
            kind: m.require("kind")?.parse()?,
            store,
            tokenizer_digest: m.require("tokenizer_digest")?.to_string(),
            step: m.require("step")?.parse().map_err(|_| Error::Serde("bad step".into()))?,
        };
        let found = ck.digest()?;
        if found != m.require("weights_digest")? {
            return Err(Error::DigestMismatch {
                what: format!("transformer weights in {}", dir.display()),
                expected: m.require("weights_digest")?.into(),
                found,
            });
        }
        Ok(ck)
    }
}

/// Sampled token sequences with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Option<Vec<u32>>,
    pub sampler: SamplerConfig,
    pub sampler_fingerprint: String,
    pub transformer_digest: String,
    pub tokenizer_digest: String,
}

impl SampleBatch {
    pub fn new(
        sequences: Vec<Vec<u32>>,
        labels: Option<Vec<u32>>,
        sampler: &SamplerConfig,
        transformer: &TransformerCheckpoint,
    ) -> Result<Self> {
        Ok(Self {
            sequences,
            labels,
            sampler: sampler.clone(),
            sampler_fingerprint: fingerprint(sampler)?,
            transformer_digest: transformer.digest()?,
            tokenizer_digest: transformer.tokenizer_digest.clone(),
        })
    }

    pub fn flat(&self) -> Vec<u32> {
        self.sequences.iter().flatten().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Serde(e.to_string()))?;
        if fingerprint(&s.sampler)? != s.sampler_fingerprint {
            return Err(Error::DigestMismatch {
                what: "sampler configuration".into(),
                expected: s.sampler_fingerprint.clone(),
                found: fingerprint(&s.sampler)?,
            });
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests;
