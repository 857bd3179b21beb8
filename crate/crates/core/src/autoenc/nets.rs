use candle_core::Tensor;

use super::attention::InterleavedAttention;
use super::NetConfig;
use crate::error::{Error, Result};
use crate::nn::{swish, Conv2d, GroupNorm, ResBlock, Upsample};
use crate::params::Scope;

/// Convolution-only encoder: per level a residual stack, then a strided
/// downsample between levels, finished by GN-Swish-Conv to `n_z` channels.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    image_size: usize,
}

impl Encoder {
    pub fn new(vs: &mut Scope, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let chans = cfg.level_channels();
        let conv_in = Conv2d::new(&mut vs.sub("conv_in"), 3, chans[0], 3, 1, 1)?;
        let mut levels = Vec::new();
        let mut c_prev = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            let mut lv = vs.sub(&format!("level{i}"));
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&mut lv.sub(&format!("res{r}")), c_prev, c, g)?);
                c_prev = c;
            }
            let down = if i + 1 < chans.len() {
                Some(Conv2d::downsample(&mut lv.sub("down"), c)?)
            } else {
                None
            };
            levels.push((blocks, down));
        }
        Ok(Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut vs.sub("norm_out"), c_prev, g)?,
            conv_out: Conv2d::new(&mut vs.sub("conv_out"), c_prev, cfg.n_z, 3, 1, 1)?,
            image_size: cfg.image_size,
        })
    }

    /// `(batch, 3, H, W)` in `[-1, 1]` to `(batch, n_z, H/f, W/f)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "encoder expects (B, 3, {s}, {s}), got {:?}",
                x.dims(),
                s = self.image_size
            )));
        }
        let mut h = self.conv_in.forward(x)?;
        for (blocks, down) in &self.levels {
            for b in blocks {
                h = b.forward(&h)?;
            }
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        self.conv_out.forward(&swish(&self.norm_out.forward(&h)?)?)
    }
}

/// Mirror of the encoder with nearest-neighbour upsampling. When built with
/// attention levels, an interleaved block/dilated attention follows the
/// residual stack at each listed level.
#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv2d,
    /// Ordered from the coarsest level to the finest.
    levels: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    n_z: usize,
    latent_size: usize,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    attention: Option<InterleavedAttention>,
    up: Option<Upsample>,
}

impl Decoder {
    /// Plain convolutional decoder.
    pub fn new(vs: &mut Scope, cfg: &NetConfig) -> Result<Self> {
        Self::build(vs, cfg, &[])
    }

    /// Decoder with attention inserted at `cfg.attention_levels`.
    pub fn enhanced(vs: &mut Scope, cfg: &NetConfig) -> Result<Self> {
        let levels = cfg.attention_levels.clone();
        for &l in &levels {
            if l >= cfg.num_levels() {
                return Err(Error::Config(format!(
                    "attention level {l} out of range for {} levels",
                    cfg.num_levels()
                )));
            }
        }
        Self::build(vs, cfg, &levels)
    }

    fn build(vs: &mut Scope, cfg: &NetConfig, attention_levels: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let chans = cfg.level_channels();
        let last = *chans.last().unwrap();
        let conv_in = Conv2d::new(&mut vs.sub("conv_in"), cfg.n_z, last, 3, 1, 1)?;
        let mut levels = Vec::new();
        let mut c_prev = last;
        for i in (0..chans.len()).rev() {
            let c = chans[i];
            let mut lv = vs.sub(&format!("level{i}"));
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&mut lv.sub(&format!("res{r}")), c_prev, c, g)?);
                c_prev = c;
            }
            let attention = if attention_levels.contains(&i) {
                Some(InterleavedAttention::new(&mut lv.sub("attn"), c, g, cfg.attention_window)?)
            } else {
                None
            };
            let up = if i > 0 { Some(Upsample::new(&mut lv.sub("up"), c)?) } else { None };
            levels.push(DecoderLevel { blocks, attention, up });
        }
        Ok(Self {
            conv_in,
            levels,
            norm_out: GroupNorm::new(&mut vs.sub("norm_out"), c_prev, g)?,
            conv_out: Conv2d::new(&mut vs.sub("conv_out"), c_prev, 3, 3, 1, 1)?,
            n_z: cfg.n_z,
            latent_size: cfg.latent_size(),
        })
    }

    pub fn has_attention(&self) -> bool {
        self.levels.iter().any(|l| l.attention.is_some())
    }

    /// `(batch, n_z, h, w)` to an image in `[-1, 1]`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.n_z || h != self.latent_size || w != self.latent_size {
            return Err(Error::Shape(format!(
                "decoder expects (B, {}, {s}, {s}), got {:?}",
                self.n_z,
                z.dims(),
                s = self.latent_size
            )));
        }
        let mut h = self.conv_in.forward(z)?;
        for lv in &self.levels {
            for b in &lv.blocks {
                h = b.forward(&h)?;
            }
            if let Some(a) = &lv.attention {
                h = a.forward(&h)?;
            }
            if let Some(u) = &lv.up {
                h = u.forward(&h)?;
            }
        }
        Ok(self.conv_out.forward(&swish(&self.norm_out.forward(&h)?)?)?.tanh()?)
    }
}

/// Strided convolutional patch discriminator producing one logit per
/// `4 x 4` image patch: output map is `(batch, 1, H/4, W/4)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    norm2: GroupNorm,
    conv3: Conv2d,
    norm3: GroupNorm,
    conv4: Conv2d,
    image_size: usize,
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

impl Discriminator {
    pub fn new(vs: &mut Scope, cfg: &NetConfig) -> Result<Self> {
        let c = cfg.disc_channels;
        Ok(Self {
            conv1: Conv2d::new(&mut vs.sub("conv1"), 3, c, 3, 2, 1)?,
            conv2: Conv2d::new(&mut vs.sub("conv2"), c, 2 * c, 3, 2, 1)?,
            norm2: GroupNorm::new(&mut vs.sub("norm2"), 2 * c, cfg.norm_groups)?,
            conv3: Conv2d::new(&mut vs.sub("conv3"), 2 * c, 4 * c, 3, 1, 1)?,
            norm3: GroupNorm::new(&mut vs.sub("norm3"), 4 * c, cfg.norm_groups)?,
            conv4: Conv2d::new(&mut vs.sub("conv4"), 4 * c, 1, 3, 1, 1)?,
            image_size: cfg.image_size,
        })
    }

    pub fn output_size(&self) -> usize {
        self.image_size.div_ceil(2).div_ceil(2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!("discriminator got {:?}", x.dims())));
        }
        let h = leaky(&self.conv1.forward(x)?)?;
        let h = leaky(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        let h = leaky(&self.norm3.forward(&self.conv3.forward(&h)?)?)?;
        self.conv4.forward(&h)
    }
}
