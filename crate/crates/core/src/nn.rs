//! Small layer set on top of candle tensors, parameterised through
//! [`VarStore`](crate::params::VarStore) so that initialisation is seeded.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, Scope};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    /// Extra zero padding on the bottom/right edge only (strided downsampling).
    pad_trailing: bool,
}

impl Conv2d {
    pub fn new(vs: &mut Scope, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, k, stride, padding, Init::FanIn(c_in * k * k))
    }

    /// Zero-initialised convolution (used for identity-at-init residual branches).
    pub fn zeros(vs: &mut Scope, c_in: usize, c_out: usize, k: usize, padding: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, k, 1, padding, Init::Zeros)
    }

    fn with_init(
        vs: &mut Scope,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::FanIn(c_in * k * k),
        };
        Ok(Self {
            weight: vs.var("weight", &[c_out, c_in, k, k], init)?,
            bias: vs.var("bias", &[c_out], bias_init)?,
            stride,
            padding,
            pad_trailing: false,
        })
    }

    /// 3x3 stride-2 convolution with asymmetric (0, 1) padding, halving H and W.
    pub fn downsample(vs: &mut Scope, c: usize) -> Result<Self> {
        let mut conv = Self::new(vs, c, c, 3, 2, 0)?;
        conv.pad_trailing = true;
        Ok(conv)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad_trailing {
            x.pad_with_zeros(D::Minus1, 0, 1)?.pad_with_zeros(D::Minus2, 0, 1)?
        } else {
            x.clone()
        };
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vs: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[d_out, d_in], Init::FanIn(d_in))?,
            bias: Some(vs.var("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn normal(vs: &mut Scope, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[d_out, d_in], Init::Normal(std))?,
            bias: Some(vs.var("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn zeros(vs: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[d_out, d_in], Init::Zeros)?,
            bias: Some(vs.var("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn no_bias(vs: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[d_out, d_in], Init::FanIn(d_in))?,
            bias: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies the layer over the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(vs: &mut Scope, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        let weight = vs.var("weight", &[channels], Init::Ones)?;
        let bias = vs.var("bias", &[channels], Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-6)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::Module::forward(&self.inner, x)?)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|g| n % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(vs: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.var("weight", &[dim], Init::Ones)?,
            bias: vs.var("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Differentiable softmax over the last dimension. The fused kernel in
/// `candle_nn` has no backward pass, so it is not used on training paths.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// GN-Swish-Conv-GN-Swish-Conv with a 1x1 shortcut when channels change.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vs: &mut Scope, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut vs.sub("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&mut vs.sub("conv1"), c_in, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&mut vs.sub("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&mut vs.sub("conv2"), c_out, c_out, 3, 1, 1)?,
            shortcut: if c_in != c_out {
                Some(Conv2d::new(&mut vs.sub("shortcut"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&swish(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&swish(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Nearest-neighbour x2 upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(vs: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(vs, c, c, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)
    }
}

/// Dropout driven by an explicit mask source so runs stay reproducible.
pub fn dropout<R: rand::Rng>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.elem_count();
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}
