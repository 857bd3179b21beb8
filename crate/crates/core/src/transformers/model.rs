use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, softmax_last, LayerNorm, Linear};
use crate::params::{Init, Scope};

/// Attention pattern of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Causal attention, next-token prediction.
    Ar,
    /// Bidirectional attention over a sequence with mask tokens.
    Nar,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ar => "ar",
            ModelKind::Nar => "nar",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(ModelKind::Ar),
            "nar" => Ok(ModelKind::Nar),
            _ => Err(Error::Config(format!("unknown transformer kind {s:?} (ar|nar)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Codebook size K; the mask token gets id K.
    pub vocab: usize,
    /// Tokens per image, N = h * w.
    pub seq_len: usize,
    /// Number of condition classes; 0 for unconditional runs, which use a
    /// learned start token instead.
    pub classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        // full scale: 24 blocks, 16 heads, dim 768, hidden 3072, N = 256
        Self {
            blocks: 4,
            heads: 4,
            dim: 128,
            hidden: 512,
            dropout: 0.1,
            vocab: 128,
            seq_len: 64,
            classes: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("model dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(Error::Config("vocabulary and sequence length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab as u32
    }

    /// Condition id of the learned start token.
    pub fn start_token(&self) -> u32 {
        self.classes as u32
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Decoder-only transformer trunk with token, condition and position
/// embeddings.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub kind: ModelKind,
    tok_emb: Tensor,
    cond_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Transformer {
    pub fn new(vs: &mut Scope, config: &TransformerConfig, kind: ModelKind) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let tok_emb = vs.var("tok_emb", &[config.vocab + 1, d], Init::Normal(0.02))?;
        let cond_emb = vs.var("cond_emb", &[config.classes + 1, d], Init::Normal(0.02))?;
        let pos_emb = vs.var("pos_emb", &[config.seq_len + 1, d], Init::Normal(0.02))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mut s = vs.sub(&format!("block{i}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&mut s.sub("ln1"), d)?,
                qkv: Linear::normal(&mut s.sub("qkv"), d, 3 * d, 0.02)?,
                proj: Linear::normal(&mut s.sub("proj"), d, d, 0.02 / (2.0 * config.blocks as f64).sqrt())?,
                ln2: LayerNorm::new(&mut s.sub("ln2"), d)?,
                fc1: Linear::normal(&mut s.sub("fc1"), d, config.hidden, 0.02)?,
                fc2: Linear::normal(&mut s.sub("fc2"), config.hidden, d, 0.02 / (2.0 * config.blocks as f64).sqrt())?,
            });
        }
        Ok(Self {
            config: config.clone(),
            kind,
            tok_emb,
            cond_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(&mut vs.sub("ln_f"), d)?,
            head: Linear::normal(&mut vs.sub("head"), d, config.vocab, 0.02)?,
        })
    }

    fn device(&self) -> &Device {
        self.tok_emb.device()
    }

    /// Condition ids for a batch: the given class labels, or the start token.
    pub fn conditions(&self, batch: usize, labels: Option<&[u32]>) -> Result<Vec<u32>> {
        match labels {
            None => Ok(vec![self.config.start_token(); batch]),
            Some(l) => {
                if l.len() != batch {
                    return Err(Error::Shape(format!("{} labels for a batch of {batch}", l.len())));
                }
                if let Some(bad) = l.iter().find(|&&c| c as usize >= self.config.classes) {
                    return Err(Error::Config(format!(
                        "label {bad} but the transformer has {} condition classes",
                        self.config.classes
                    )));
                }
                Ok(l.to_vec())
            }
        }
    }

    /// Embeds `[cond, tokens...]`, shape `(batch, 1 + len, dim)`.
    fn embed(&self, tokens: &[u32], batch: usize, len: usize, cond: &[u32]) -> Result<Tensor> {
        let dev = self.device();
        let c = self.cond_emb.embedding(&Tensor::new(cond, dev)?)?.unsqueeze(1)?;
        let x = if len == 0 {
            c
        } else {
            let ids = Tensor::from_slice(tokens, (batch * len,), dev)?;
            let t = self.tok_emb.embedding(&ids)?.reshape((batch, len, self.config.dim))?;
            Tensor::cat(&[&c, &t], 1)?
        };
        Ok(x.broadcast_add(&self.pos_emb.narrow(0, 0, len + 1)?.unsqueeze(0)?)?)
    }

    fn attention(&self, blk: &Block, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.config.heads;
        let dh = d / h;
        let qkv = blk.qkv.forward(x)?.reshape((b, t, 3, h, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        if causal {
            let mask: Vec<f32> = (0..t)
                .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
                .collect();
            let mask = Tensor::from_vec(mask, (t, t), x.device())?.to_dtype(x.dtype())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let y = softmax_last(&scores)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        blk.proj.forward(&y)
    }

    fn trunk(&self, mut x: Tensor, causal: bool, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.config.dropout;
        let drop_out = |t: Tensor, rng: &mut Option<&mut ChaCha8Rng>| -> Result<Tensor> {
            match rng {
                Some(r) => dropout(&t, p, *r),
                None => Ok(t),
            }
        };
        x = drop_out(x, &mut rng)?;
        for blk in &self.blocks {
            let a = self.attention(blk, &blk.ln1.forward(&x)?, causal)?;
            x = (x + drop_out(a, &mut rng)?)?;
            let m = blk.fc2.forward(&blk.fc1.forward(&blk.ln2.forward(&x)?)?.gelu_erf()?)?;
            x = (x + drop_out(m, &mut rng)?)?;
        }
        self.head.forward(&self.ln_f.forward(&x)?)
    }

    fn check_tokens(&self, tokens: &[u32], allow_mask: bool) -> Result<()> {
        let limit = self.config.vocab as u32 + u32::from(allow_mask);
        if let Some(bad) = tokens.iter().find(|&&t| t >= limit) {
            return Err(Error::Config(format!("token {bad} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Causal logits for `[cond, context...]`: row `i` of the output
    /// predicts token `i` from the condition and `context[..i]`. `context`
    /// holds `batch` row-major sequences of equal length `< seq_len`.
    /// Passing an rng enables dropout.
    pub fn ar_forward(&self, context: &[u32], batch: usize, cond: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if self.kind != ModelKind::Ar {
            return Err(Error::Contract("ar_forward on a mask-predict transformer".into()));
        }
        if batch == 0 || context.len() % batch != 0 || cond.len() != batch {
            return Err(Error::Shape(format!("{} context tokens / {} conditions for batch {batch}", context.len(), cond.len())));
        }
        let len = context.len() / batch;
        if len + 1 > self.config.seq_len {
            return Err(Error::Config(format!(
                "context of {len} tokens overflows the sequence length {}",
                self.config.seq_len
            )));
        }
        self.check_tokens(context, false)?;
        let x = self.embed(context, batch, len, cond)?;
        self.trunk(x, true, rng)
    }

    /// Teacher-forced logits `(batch, N, K)` for complete sequences.
    pub fn ar_teacher_forced(&self, seqs: &[u32], batch: usize, cond: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let n = self.config.seq_len;
        if seqs.len() != batch * n {
            return Err(Error::Shape(format!("expected {batch} sequences of {n} tokens, got {} tokens", seqs.len())));
        }
        let context: Vec<u32> = seqs.chunks(n).flat_map(|s| s[..n - 1].iter().copied()).collect();
        self.ar_forward(&context, batch, cond, rng)
    }

    /// Bidirectional logits `(batch, N, K)`; masked positions carry the mask
    /// token id.
    pub fn nar_forward(&self, tokens: &[u32], batch: usize, cond: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if self.kind != ModelKind::Nar {
            return Err(Error::Contract("nar_forward on an autoregressive transformer".into()));
        }
        let n = self.config.seq_len;
        if tokens.len() != batch * n || cond.len() != batch {
            return Err(Error::Config(format!(
                "mask-predict input must be {batch} x {n} tokens, got {}",
                tokens.len()
            )));
        }
        self.check_tokens(tokens, true)?;
        let x = self.embed(tokens, batch, n, cond)?;
        Ok(self.trunk(x, false, rng)?.narrow(1, 1, n)?)
    }
}

/// Mean cross-entropy of `logits (batch, n, K)` against `targets`, over the
/// positions where `weight` is set (all positions when `None`).
pub fn token_cross_entropy(logits: &Tensor, targets: &[u32], weight: Option<&[bool]>) -> Result<Tensor> {
    let (b, n, k) = logits.dims3()?;
    if targets.len() != b * n {
        return Err(Error::Shape(format!("{} targets for {b} x {n} logits", targets.len())));
    }
    let flat = logits.reshape((b * n, k))?.to_dtype(DType::F32)?;
    let logp = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    let t = Tensor::from_slice(targets, (b * n, 1), logits.device())?;
    let nll = logp.gather(&t, 1)?.squeeze(1)?.neg()?;
    match weight {
        None => Ok(nll.mean_all()?),
        Some(w) => {
            let count = w.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Contract("cross-entropy over an empty position set".into()));
            }
            let wv: Vec<f32> = w.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let wt = Tensor::from_vec(wv, b * n, logits.device())?;
            Ok(((nll * wt)?.sum_all()? / count as f64)?)
        }
    }
}
