//! Encoder, decoder, attention-enhanced decoder and patch discriminator,
//! together with the tokenizer that ties them to the quantizer.

pub mod attention;
mod checkpoint;
mod nets;

pub use checkpoint::{ParentDigests, Phase, TokenizerCheckpoint};
pub use nets::{Decoder, Discriminator, Encoder};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::VarStore;
use crate::quantizer::{CodebookVariant, LatentGrid, QuantOutput, QuantizedGrid, VectorQuantizer};

/// Network shape shared by every tokenizer component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    /// Spatial downsampling factor `f`.
    pub compression: usize,
    pub base_channels: usize,
    /// One entry per resolution level, `log2(f) + 1` in total.
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
    pub n_z: usize,
    pub codebook_size: usize,
    pub codebook: CodebookVariant,
    pub norm_groups: usize,
    /// Decoder levels (0 = full resolution) that gain attention in phase 2.
    pub attention_levels: Vec<usize>,
    pub attention_window: usize,
    pub disc_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            compression: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            res_blocks: 1,
            n_z: 64,
            codebook_size: 128,
            codebook: CodebookVariant::Plain,
            norm_groups: 8,
            attention_levels: vec![1, 2],
            attention_window: 4,
            disc_channels: 32,
        }
    }
}

impl NetConfig {
    /// 16x16 images with `f = 2`; sized for quick CPU runs.
    pub fn quick() -> Self {
        Self {
            image_size: 16,
            compression: 2,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            res_blocks: 1,
            n_z: 32,
            codebook_size: 64,
            codebook: CodebookVariant::Plain,
            norm_groups: 8,
            attention_levels: vec![0, 1],
            attention_window: 4,
            disc_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.compression;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!("compression {f} is not a power of two")));
        }
        if self.image_size == 0 || self.image_size % f != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by compression {f}",
                self.image_size
            )));
        }
        let levels = f.trailing_zeros() as usize + 1;
        if self.channel_multipliers.len() != levels {
            return Err(Error::Config(format!(
                "compression {f} needs {levels} channel multipliers, got {}",
                self.channel_multipliers.len()
            )));
        }
        if self.channel_multipliers.contains(&0) || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.n_z == 0 || self.codebook_size == 0 || self.res_blocks == 0 {
            return Err(Error::Config("n_z, codebook_size and res_blocks must be positive".into()));
        }
        if self.norm_groups == 0 || self.disc_channels == 0 || self.attention_window == 0 {
            return Err(Error::Config("norm_groups, disc_channels and attention_window must be positive".into()));
        }
        if let CodebookVariant::FactorizedNormed { proj_dim } = self.codebook {
            if proj_dim == 0 {
                return Err(Error::Config("factorized projection dimension must be positive".into()));
            }
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= levels) {
            return Err(Error::Config(format!("attention level {l} out of range for {levels} levels")));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.compression
    }

    pub fn tokens_per_image(&self) -> usize {
        self.latent_size() * self.latent_size()
    }
}

/// Tolerance on the `[-1, 1]` pixel range check.
const RANGE_SLACK: f32 = 1e-4;

pub fn check_image(x: &Tensor, size: usize) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != 3 || dims[2] != size || dims[3] != size {
        return Err(Error::Shape(format!("expected images (B, 3, {size}, {size}), got {dims:?}")));
    }
    let lo = x.min_all()?.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?;
    let hi = x.max_all()?.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?;
    if !lo.is_finite() || !hi.is_finite() || lo < -1.0 - RANGE_SLACK || hi > 1.0 + RANGE_SLACK {
        return Err(Error::Contract(format!("pixel values must lie in [-1, 1], found [{lo}, {hi}]")));
    }
    Ok(())
}

/// Encoder, quantizer and decoder assembled over their parameter stores.
///
/// The encoder store holds `encoder.*` and `quant.*`; the decoder store
/// holds `decoder.*`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: NetConfig,
    pub encoder: Encoder,
    pub quantizer: VectorQuantizer,
    pub decoder: Decoder,
}

impl Tokenizer {
    pub fn build(enc: &mut VarStore, dec: &mut VarStore, config: &NetConfig, enhanced: bool) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&mut enc.scope("encoder"), config)?;
        let quantizer = VectorQuantizer::new(&mut enc.scope("quant"), config.codebook_size, config.n_z, config.codebook)?;
        let decoder = if enhanced {
            Decoder::enhanced(&mut dec.scope("decoder"), config)?
        } else {
            Decoder::new(&mut dec.scope("decoder"), config)?
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            quantizer,
            decoder,
        })
    }

    /// Raw encoder output, `(batch, n_z, h, w)`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentGrid> {
        check_image(x, self.config.image_size)?;
        LatentGrid::new(self.encoder.forward(x)?)
    }

    pub fn quantize(&self, x: &Tensor) -> Result<QuantOutput> {
        check_image(x, self.config.image_size)?;
        self.quantizer.forward(&self.encoder.forward(x)?)
    }

    /// Token grids of a batch, without gradient tracking.
    pub fn tokens(&self, x: &Tensor) -> Result<QuantizedGrid> {
        let out = self.quantize(&x.detach())?;
        Ok(out.quant)
    }

    pub fn decode(&self, q: &QuantizedGrid) -> Result<Tensor> {
        self.decoder.forward(&self.quantizer.to_decoder(q.values())?)
    }

    /// Decodes raster-ordered token grids, `tokens_per_image` per image.
    pub fn decode_tokens(&self, indices: &[u32]) -> Result<Tensor> {
        let n = self.config.tokens_per_image();
        if indices.is_empty() || indices.len() % n != 0 {
            return Err(Error::Shape(format!(
                "{} tokens do not form whole {n}-token grids",
                indices.len()
            )));
        }
        let s = self.config.latent_size();
        let z = self.quantizer.lookup(indices.to_vec(), indices.len() / n, s, s)?;
        self.decoder.forward(&z)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&self.quantize(x)?.decoder_input)
    }
}

/// Copies a trained decoder store and inserts identity-initialised
/// attention at `config.attention_levels`. Convolutional weights are shared
/// by name with the base decoder; new attention weights come from `seed`.
pub fn build_enhanced_decoder(base: &VarStore, config: &NetConfig, seed: u64) -> Result<(VarStore, Decoder)> {
    let mut store = VarStore::new(seed, base.dtype());
    store.copy_from(base, "", "")?;
    let decoder = Decoder::enhanced(&mut store.scope("decoder"), config)?;
    Ok((store, decoder))
}
