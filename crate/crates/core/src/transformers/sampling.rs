use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelKind, Transformer};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: ModelKind,
    /// Nucleus mass in (0, 1].
    pub top_p: f64,
    /// Refinement steps (mask-predict only).
    pub steps: usize,
    /// AR: logit temperature. NAR: scale of the Gumbel noise added to the
    /// selection confidences.
    pub temperature: f64,
    pub seed: u64,
    /// Sequences decoded per forward batch.
    pub batch: usize,
}

impl SamplerConfig {
    // full scale: top-p 0.92 (class-conditional) / 0.98
    pub fn ar(seed: u64) -> Self {
        Self {
            kind: ModelKind::Ar,
            top_p: 0.92,
            steps: 1,
            temperature: 1.0,
            seed,
            batch: 64,
        }
    }

    // full scale: 12 steps, temperature 0.45 (class-conditional) / 0.65
    pub fn nar(seed: u64) -> Self {
        Self {
            kind: ModelKind::Nar,
            top_p: 1.0,
            steps: 12,
            temperature: 0.45,
            seed,
            batch: 64,
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) || self.batch == 0 {
            return Err(Error::Config("temperature and batch must be positive".into()));
        }
        if self.kind == ModelKind::Nar && (self.steps == 0 || self.steps > seq_len) {
            return Err(Error::Config(format!("{} refinement steps for {seq_len} tokens", self.steps)));
        }
        Ok(())
    }
}

/// Indices of the smallest set of highest-probability entries whose mass
/// reaches `top_p`, in descending probability order (ties by index).
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let total: f64 = probs.iter().sum();
    let target = top_p * total;
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        keep += 1;
        mass += probs[i];
        // relative slack absorbs summation rounding at top_p = 1
        if mass >= target * (1.0 - 1e-12) {
            break;
        }
    }
    order.truncate(keep.max(1));
    order
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Draws from the renormalised nucleus of `probs`.
pub fn sample_nucleus<R: Rng>(probs: &[f64], top_p: f64, rng: &mut R) -> u32 {
    let support = nucleus_support(probs, top_p);
    let mass: f64 = support.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in &support {
        u -= probs[i];
        if u < 0.0 {
            return i as u32;
        }
    }
    *support.last().unwrap() as u32
}

fn rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(logits.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Sequential nucleus decoding, one forward pass per position. Each
/// sequence `i` draws from its own stream derived from `(seed, i)`.
pub fn ar_sample(model: &Transformer, n: usize, labels: Option<&[u32]>, cfg: &SamplerConfig) -> Result<Vec<Vec<u32>>> {
    if model.kind != ModelKind::Ar || cfg.kind != ModelKind::Ar {
        return Err(Error::Contract("ar_sample needs an autoregressive model and sampler".into()));
    }
    let len = model.config.seq_len;
    cfg.validate(len)?;
    let cond_all = model.conditions(n, labels)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(cfg.batch) {
        let b = cfg.batch.min(n - start);
        let cond = &cond_all[start..start + b];
        let mut rngs: Vec<_> = (0..b).map(|i| rng::stream_n(cfg.seed, "ar-sample", (start + i) as u64)).collect();
        let mut seqs: Vec<Vec<u32>> = vec![Vec::with_capacity(len); b];
        for pos in 0..len {
            let context: Vec<u32> = seqs.iter().flatten().copied().collect();
            let logits = model.ar_forward(&context, b, cond, None)?.narrow(1, pos, 1)?.squeeze(1)?;
            for (i, row) in rows(&logits)?.into_iter().enumerate() {
                let p = softmax(&row, cfg.temperature);
                seqs[i].push(sample_nucleus(&p, cfg.top_p, &mut rngs[i]));
            }
        }
        out.extend(seqs);
    }
    Ok(out)
}

/// Fraction of tokens still masked after `r` of the refinement schedule.
pub fn mask_schedule(r: f64) -> f64 {
    if r <= 0.0 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        (std::f64::consts::FRAC_PI_2 * r).cos()
    }
}

/// Cumulative committed-token count after each of `steps` refinement steps.
pub fn commit_counts(n: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .map(|t| {
            let keep = (n as f64 * (1.0 - mask_schedule(t as f64 / steps as f64))).ceil() as usize;
            keep.clamp(1, n)
        })
        .collect()
}

/// Mask-predict decoding. Returns the final sequences and the state of every
/// sequence after each step (uncommitted positions hold the mask token).
pub fn nar_sample_traced(
    model: &Transformer,
    n: usize,
    labels: Option<&[u32]>,
    cfg: &SamplerConfig,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<Vec<u32>>>)> {
    if model.kind != ModelKind::Nar || cfg.kind != ModelKind::Nar {
        return Err(Error::Contract("nar_sample needs a mask-predict model and sampler".into()));
    }
    let len = model.config.seq_len;
    cfg.validate(len)?;
    let mask = model.config.mask_token();
    let counts = commit_counts(len, cfg.steps);
    let cond_all = model.conditions(n, labels)?;
    let mut out = Vec::with_capacity(n);
    let mut trace: Vec<Vec<Vec<u32>>> = vec![Vec::with_capacity(n); cfg.steps];
    for start in (0..n).step_by(cfg.batch) {
        let b = cfg.batch.min(n - start);
        let cond = &cond_all[start..start + b];
        let mut rngs: Vec<_> = (0..b).map(|i| rng::stream_n(cfg.seed, "nar-sample", (start + i) as u64)).collect();
        let mut state = vec![mask; b * len];
        for (t, &target) in counts.iter().enumerate() {
            let logits = model.nar_forward(&state, b, cond, None)?;
            let anneal = cfg.temperature * (1.0 - (t + 1) as f64 / cfg.steps as f64);
            for i in 0..b {
                let row_logits = rows(&logits.get(i)?)?;
                let seq = &mut state[i * len..(i + 1) * len];
                let committed = seq.iter().filter(|&&s| s != mask).count();
                let mut proposals: Vec<(f64, usize, u32)> = Vec::new();
                for (pos, l) in row_logits.iter().enumerate() {
                    if seq[pos] != mask {
                        continue;
                    }
                    let p = softmax(l, 1.0);
                    let tok = sample_nucleus(&p, cfg.top_p, &mut rngs[i]);
                    let conf = p[tok as usize].max(f64::MIN_POSITIVE).ln() + anneal * rng::gumbel(&mut rngs[i]);
                    proposals.push((conf, pos, tok));
                }
                proposals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(_, pos, tok) in proposals.iter().take(target.saturating_sub(committed)) {
                    seq[pos] = tok;
                }
                trace[t].push(seq.to_vec());
            }
        }
        if state.contains(&mask) {
            return Err(Error::Contract("mask-predict decoding ended with masked positions".into()));
        }
        out.extend(state.chunks(len).map(|s| s.to_vec()));
    }
    Ok((out, trace))
}

pub fn nar_sample(model: &Transformer, n: usize, labels: Option<&[u32]>, cfg: &SamplerConfig) -> Result<Vec<Vec<u32>>> {
    Ok(nar_sample_traced(model, n, labels, cfg)?.0)
}

/// Dispatches on the sampler kind.
pub fn sample(model: &Transformer, n: usize, labels: Option<&[u32]>, cfg: &SamplerConfig) -> Result<Vec<Vec<u32>>> {
    match cfg.kind {
        ModelKind::Ar => ar_sample(model, n, labels, cfg),
        ModelKind::Nar => nar_sample(model, n, labels, cfg),
    }
}
