//! Discrete quantization of latent grids, the VQ gradient routing, the
//! soft-usage entropy regulariser and codebook maintenance.
//!
//! Grids are stored channel-first, `(batch, n_z, h, w)`, matching the
//! convolutional encoder. Whenever grid positions are flattened they are
//! taken in raster order: batch, then row, then column.

mod kmeans;

pub use kmeans::{kmeans, KMeans};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, Scope, VarStore};

/// Commitment weight of the VQ objective.
pub const DEFAULT_BETA: f64 = 0.25;
/// Weight of the soft-usage entropy term.
pub const DEFAULT_GAMMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CodebookVariant {
    Plain,
    /// Codes live in a low-dimensional projected space and are L2-normalised.
    FactorizedNormed { proj_dim: usize },
}

/// How the entropy of the soft usage enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `-gamma * H`: minimising the loss spreads usage over the codebook.
    #[default]
    Maximize,
    /// `+gamma * H`, the literal reading of the written objective.
    Penalize,
}

/// Per-code assignment counts accumulated over one accounting window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTally {
    counts: Vec<u64>,
    grids: usize,
}

impl UsageTally {
    pub fn new(size: usize) -> Self {
        Self {
            counts: vec![0; size],
            grids: 0,
        }
    }

    /// Records one token grid.
    pub fn record(&mut self, indices: &[u32]) -> Result<()> {
        let size = self.counts.len();
        for &i in indices {
            let slot = self
                .counts
                .get_mut(i as usize)
                .ok_or_else(|| Error::Shape(format!("code index {i} outside codebook of {size}")))?;
            *slot += 1;
        }
        self.grids += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &UsageTally) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::Shape("usage tallies of different codebook sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.grids += other.grids;
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn grids(&self) -> usize {
        self.grids
    }

    /// Fraction of codes used at least once.
    pub fn fraction(&self) -> Result<f64> {
        if self.grids == 0 {
            return Err(Error::Contract("codebook usage requested before any grid was recorded".into()));
        }
        let used = self.counts.iter().filter(|&&c| c > 0).count();
        Ok(used as f64 / self.counts.len() as f64)
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.grids = 0;
    }
}

/// Fraction of the `size` codes appearing in at least one of `grids`.
pub fn codebook_usage<'a>(grids: impl IntoIterator<Item = &'a [u32]>, size: usize) -> Result<f64> {
    let mut tally = UsageTally::new(size);
    for g in grids {
        tally.record(g)?;
    }
    tally.fraction()
}

/// `K x dim` code matrix. The tensor may be a tracked variable view, in which
/// case gradients of the codebook term flow into it.
#[derive(Debug, Clone)]
pub struct Codebook {
    raw: Tensor,
    variant: CodebookVariant,
    pub usage: UsageTally,
}

impl Codebook {
    pub fn new(codes: Tensor, variant: CodebookVariant) -> Result<Self> {
        let (k, dim) = codes.dims2()?;
        if k == 0 || dim == 0 {
            return Err(Error::Config("codebook must have at least one code of positive dimension".into()));
        }
        if let CodebookVariant::FactorizedNormed { proj_dim } = variant {
            if proj_dim != dim {
                return Err(Error::Config(format!(
                    "factorized codebook has code dimension {dim}, expected {proj_dim}"
                )));
            }
        }
        Ok(Self {
            raw: codes,
            variant,
            usage: UsageTally::new(k),
        })
    }

    /// Builds the `codes` parameter inside a scope, VQGAN-style uniform init.
    pub fn from_scope(vs: &mut Scope, size: usize, dim: usize, variant: CodebookVariant) -> Result<Self> {
        let codes = vs.var("codes", &[size, dim], Init::Uniform(1.0 / size as f64))?;
        Self::new(codes, variant)
    }

    pub fn size(&self) -> usize {
        self.raw.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.raw.dims()[1]
    }

    pub fn variant(&self) -> CodebookVariant {
        self.variant
    }

    /// Codes used for lookup: raw for plain, row-normalised for factorized.
    pub fn codes(&self) -> Result<Tensor> {
        match self.variant {
            CodebookVariant::Plain => Ok(self.raw.clone()),
            CodebookVariant::FactorizedNormed { .. } => l2_normalize_rows(&self.raw),
        }
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }
}

/// Rewrites a factorized codebook variable so every stored row has unit norm.
pub fn renormalize_codes(store: &VarStore, name: &str) -> Result<()> {
    let var = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("no codebook variable {name}")))?;
    let normed = l2_normalize_rows(&var.as_tensor().detach())?;
    var.set(&normed)?;
    Ok(())
}

fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(t.broadcast_div(&(norm + 1e-12)?)?)
}

/// Real-valued grid before quantization, `(batch, n_z, h, w)`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    values: Tensor,
}

impl LatentGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims4()?;
        Ok(Self { values })
    }

    /// Builds a grid from raster-ordered rows `(batch*h*w, n_z)`.
    pub fn from_rows(rows: &Tensor, batch: usize, h: usize, w: usize) -> Result<Self> {
        let (_, c) = rows.dims2()?;
        Self::new(rows.reshape((batch, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.values.dims()[2], self.values.dims()[3])
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.hw();
        self.batch() * h * w
    }

    /// Raster-ordered rows `(batch*h*w, n_z)`.
    pub fn rows(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.values.dims4()?;
        Ok(self.values.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?)
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
        }
    }
}

/// Quantized grid and its code indices (raster order).
#[derive(Debug, Clone)]
pub struct QuantizedGrid {
    values: Tensor,
    indices: Vec<u32>,
}

impl QuantizedGrid {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.values.dims()[2], self.values.dims()[3])
    }

    /// Indices of batch element `i`.
    pub fn grid(&self, i: usize) -> &[u32] {
        let (h, w) = self.hw();
        &self.indices[i * h * w..(i + 1) * h * w]
    }

    /// Looks codes up for given indices, `(batch, dim, h, w)`.
    pub fn from_indices(cb: &Codebook, indices: Vec<u32>, batch: usize, h: usize, w: usize) -> Result<Self> {
        if indices.len() != batch * h * w {
            return Err(Error::Shape(format!(
                "{} indices for a {batch}x{h}x{w} grid",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= cb.size()) {
            return Err(Error::Shape(format!("index {bad} outside codebook of {}", cb.size())));
        }
        let idx = Tensor::from_slice(&indices, indices.len(), cb.raw.device())?;
        let rows = cb.codes()?.index_select(&idx, 0)?;
        let values = LatentGrid::from_rows(&rows, batch, h, w)?.into_values();
        Ok(Self { values, indices })
    }
}

/// Nearest-code assignment under Euclidean distance, lowest index on ties.
///
/// Candidates are screened with the expanded `|z|^2 - 2 z.c + |c|^2` form in
/// the working precision and the final choice among near-minimal codes is
/// made with exact f64 differences, so the result equals an exhaustive
/// argmin.
pub fn quantize(latent: &LatentGrid, cb: &Codebook) -> Result<QuantizedGrid> {
    let codes = cb.codes()?;
    let (k, dim) = codes.dims2()?;
    if latent.channels() != dim {
        return Err(Error::Config(format!(
            "latent dimension {} does not match code dimension {dim}",
            latent.channels()
        )));
    }
    let rows = latent.rows()?.detach();
    let z: Vec<f64> = rows.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in latent grid".into()));
    }
    let c: Vec<f64> = codes.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n = z.len() / dim;

    let approx: Vec<f32> = {
        let r = rows.to_dtype(DType::F32)?;
        let cc = codes.detach().to_dtype(DType::F32)?;
        let zz = r.sqr()?.sum_keepdim(1)?;
        let cn = cc.sqr()?.sum_keepdim(1)?.t()?;
        let cross = r.matmul(&cc.t()?)?;
        zz.broadcast_add(&cn)?
            .broadcast_sub(&(cross * 2.0)?)?
            .flatten_all()?
            .to_vec1()?
    };
    let code_norm_max = c
        .chunks(dim)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);

    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        let zi = &z[i * dim..(i + 1) * dim];
        let row = &approx[i * k..(i + 1) * k];
        let best = row.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let zn: f64 = zi.iter().map(|v| v * v).sum();
        let margin = 1e-4 * (zn + code_norm_max) + 1e-12;
        let mut arg = 0usize;
        let mut arg_d = f64::INFINITY;
        for (j, &a) in row.iter().enumerate() {
            if (a as f64) <= best + margin {
                let d = squared_distance(zi, &c[j * dim..(j + 1) * dim]);
                if d < arg_d {
                    arg_d = d;
                    arg = j;
                }
            }
        }
        indices.push(arg as u32);
    }

    let idx = Tensor::from_slice(&indices, n, codes.device())?;
    let q_rows = codes.index_select(&idx, 0)?;
    let (h, w) = latent.hw();
    let values = LatentGrid::from_rows(&q_rows, latent.batch(), h, w)?.into_values();
    Ok(QuantizedGrid { values, indices })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Forward value of `q`, identity Jacobian back to `latent`.
///
/// Computed as `sg[q] + (z - sg[z])`; the bypass term is exactly zero in
/// floating point, so the output equals the quantized values bit for bit.
pub fn straight_through(latent: &LatentGrid, q: &QuantizedGrid) -> Result<LatentGrid> {
    if latent.values.dims() != q.values.dims() {
        return Err(Error::Shape(format!(
            "latent {:?} vs quantized {:?}",
            latent.values.dims(),
            q.values.dims()
        )));
    }
    let bypass = (&latent.values - latent.values.detach())?;
    LatentGrid::new((q.values.detach() + bypass)?)
}

/// `(|sg[z] - q|^2, beta |sg[q] - z|^2)`, each summed over channels and
/// averaged over grid positions.
pub fn vq_latent_losses(latent: &LatentGrid, q: &QuantizedGrid, beta: f64) -> Result<(Tensor, Tensor)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::Config(format!("commitment weight must be >= 0, got {beta}")));
    }
    if latent.values.dims() != q.values.dims() {
        return Err(Error::Shape("latent and quantized grids differ in shape".into()));
    }
    let per_position = |t: Tensor| -> Result<Tensor> { Ok(t.sqr()?.sum_keepdim(1)?.mean_all()?) };
    let codebook_term = per_position((latent.values.detach() - &q.values)?)?;
    let commitment_term = (per_position((q.values.detach() - &latent.values)?)? * beta)?;
    Ok((codebook_term, commitment_term))
}

/// Soft usage and its entropy (nats). Both are differentiable in the latent
/// grid and in the codes.
#[derive(Debug, Clone)]
pub struct UsageDistribution {
    pub dbar: Tensor,
    pub entropy: Tensor,
}

impl UsageDistribution {
    pub fn entropy_value(&self) -> Result<f64> {
        Ok(self.entropy.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Softmax over codes of negative squared distances, one row per position.
pub fn soft_assignments(latent: &LatentGrid, cb: &Codebook) -> Result<Tensor> {
    let codes = cb.codes()?;
    let rows = latent.rows()?;
    if rows.dims()[1] != codes.dims()[1] {
        return Err(Error::Config("latent and code dimensions differ".into()));
    }
    let zz = rows.sqr()?.sum_keepdim(1)?;
    let cc = codes.sqr()?.sum_keepdim(1)?.t()?;
    let cross = rows.matmul(&codes.t()?)?;
    let dist = zz.broadcast_add(&cc)?.broadcast_sub(&(cross * 2.0)?)?.relu()?;
    Ok(crate::nn::softmax_last(&dist.neg()?)?)
}

pub fn usage_distribution(latent: &LatentGrid, cb: &Codebook) -> Result<UsageDistribution> {
    if latent.positions() == 0 {
        return Err(Error::Shape("usage distribution of an empty grid".into()));
    }
    let d = soft_assignments(latent, cb)?;
    let dbar = d.mean(0)?;
    let entropy = entropy_of(&dbar)?;
    Ok(UsageDistribution { dbar, entropy })
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy_of(p: &Tensor) -> Result<Tensor> {
    let logp = p.clamp(1e-30, 1.0)?.log()?;
    Ok((p * logp)?.sum_all()?.neg()?)
}

/// The scalar added to the VQ objective for a given usage distribution.
pub fn entropy_regularizer(u: &UsageDistribution, gamma: f64, sign: EntropySign) -> Result<Tensor> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("entropy weight must be >= 0, got {gamma}")));
    }
    let s = match sign {
        EntropySign::Maximize => -gamma,
        EntropySign::Penalize => gamma,
    };
    Ok((&u.entropy * s)?)
}

/// Projects rows `(N, n_z)` with `proj` and rescales each to unit L2 norm.
pub fn factorize_normalize(x: &Tensor, proj: &Linear) -> Result<Tensor> {
    let y = proj.forward(x)?;
    let norm = y.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min_norm = norm.detach().to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if !(min_norm > 1e-12) {
        return Err(Error::Numeric(format!(
            "cannot L2-normalise a projected latent vector of norm {min_norm:e}"
        )));
    }
    Ok(y.broadcast_div(&norm)?)
}

/// Output of the quantization stage of the tokenizer.
#[derive(Debug, Clone)]
pub struct QuantOutput {
    /// Grid that was quantized (projected and normalised for factorized codes).
    pub latent: LatentGrid,
    pub quant: QuantizedGrid,
    /// Straight-through values mapped back to the decoder's channel count.
    pub decoder_input: Tensor,
}

/// Codebook plus the optional factorized in/out projections.
#[derive(Debug, Clone)]
pub struct VectorQuantizer {
    pub codebook: Codebook,
    proj_in: Option<Linear>,
    proj_out: Option<Linear>,
}

impl VectorQuantizer {
    pub fn new(vs: &mut Scope, size: usize, n_z: usize, variant: CodebookVariant) -> Result<Self> {
        match variant {
            CodebookVariant::Plain => Ok(Self {
                codebook: Codebook::from_scope(vs, size, n_z, variant)?,
                proj_in: None,
                proj_out: None,
            }),
            CodebookVariant::FactorizedNormed { proj_dim } => {
                let codes = vs.var("codes", &[size, proj_dim], Init::Normal(1.0))?;
                Ok(Self {
                    codebook: Codebook::new(codes, variant)?,
                    proj_in: Some(Linear::no_bias(&mut vs.sub("proj_in"), n_z, proj_dim)?),
                    proj_out: Some(Linear::new(&mut vs.sub("proj_out"), proj_dim, n_z)?),
                })
            }
        }
    }

    /// Maps an encoder output `(batch, n_z, h, w)` to the grid that gets quantized.
    pub fn prepare(&self, z: &Tensor) -> Result<LatentGrid> {
        let grid = LatentGrid::new(z.clone())?;
        match &self.proj_in {
            None => Ok(grid),
            Some(p) => {
                let (h, w) = grid.hw();
                let rows = factorize_normalize(&grid.rows()?, p)?;
                LatentGrid::from_rows(&rows, grid.batch(), h, w)
            }
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<QuantOutput> {
        let latent = self.prepare(z)?;
        let quant = quantize(&latent, &self.codebook)?;
        let st = straight_through(&latent, &quant)?;
        let decoder_input = self.to_decoder(st.values())?;
        Ok(QuantOutput {
            latent,
            quant,
            decoder_input,
        })
    }

    /// Decoder input for a grid of code values.
    pub fn to_decoder(&self, values: &Tensor) -> Result<Tensor> {
        match &self.proj_out {
            None => Ok(values.clone()),
            Some(p) => {
                let g = LatentGrid::new(values.clone())?;
                let (h, w) = g.hw();
                let rows = p.forward(&g.rows()?)?;
                Ok(LatentGrid::from_rows(&rows, g.batch(), h, w)?.into_values())
            }
        }
    }

    /// Decoder input for raster-ordered token grids.
    pub fn lookup(&self, indices: Vec<u32>, batch: usize, h: usize, w: usize) -> Result<Tensor> {
        let q = QuantizedGrid::from_indices(&self.codebook, indices, batch, h, w)?;
        self.to_decoder(&q.values.detach())
    }
}

#[cfg(test)]
mod tests;
