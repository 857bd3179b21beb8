//! Windowed self-attention over feature maps: non-overlapping block windows
//! and their dilated counterpart (one token from each block).

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{GroupNorm, Linear};
use crate::params::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Each `w x w` spatial block attends within itself.
    Block,
    /// Positions sharing the same offset inside their block attend together,
    /// giving a `w x w` grid of tokens spread with stride `H / w`.
    Dilated,
}

/// Residual windowed attention; the output projection starts at zero so a
/// freshly inserted block is the identity.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    window: usize,
    kind: WindowKind,
    channels: usize,
}

impl WindowAttention {
    pub fn new(vs: &mut Scope, channels: usize, groups: usize, window: usize, kind: WindowKind) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        Ok(Self {
            norm: GroupNorm::new(&mut vs.sub("norm"), channels, groups)?,
            qkv: Linear::new(&mut vs.sub("qkv"), channels, 3 * channels)?,
            proj: Linear::zeros(&mut vs.sub("proj"), channels, channels)?,
            window,
            kind,
            channels,
        })
    }

    fn partition(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        let win = self.window.min(h).min(w);
        if h % win != 0 || w % win != 0 {
            return Err(Error::Config(format!("window {win} does not tile a {h}x{w} map")));
        }
        let (nh, nw) = (h / win, w / win);
        let tokens = match self.kind {
            WindowKind::Block => x
                .reshape((b, c, nh, win, nw, win))?
                .permute((0, 2, 4, 3, 5, 1))?
                .reshape((b * nh * nw, win * win, c))?,
            WindowKind::Dilated => x
                .reshape((b, c, win, nh, win, nw))?
                .permute((0, 3, 5, 2, 4, 1))?
                .reshape((b * nh * nw, win * win, c))?,
        };
        Ok((tokens, win, nh * nw))
    }

    fn unpartition(&self, t: &Tensor, b: usize, h: usize, w: usize, win: usize) -> Result<Tensor> {
        let c = self.channels;
        let (nh, nw) = (h / win, w / win);
        Ok(match self.kind {
            WindowKind::Block => t
                .reshape((b, nh, nw, win, win, c))?
                .permute((0, 5, 1, 3, 2, 4))?
                .reshape((b, c, h, w))?,
            WindowKind::Dilated => t
                .reshape((b, nh, nw, win, win, c))?
                .permute((0, 5, 3, 1, 4, 2))?
                .reshape((b, c, h, w))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("attention over {} channels got {c}", self.channels)));
        }
        let hn = self.norm.forward(x)?;
        let (tokens, win, _) = self.partition(&hn)?;
        let qkv = self.qkv.forward(&tokens)?;
        let q = qkv.narrow(D::Minus1, 0, c)?.contiguous()?;
        let k = qkv.narrow(D::Minus1, c, c)?.contiguous()?;
        let v = qkv.narrow(D::Minus1, 2 * c, c)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
        let attn = crate::nn::softmax_last(&scores)?;
        let out = self.proj.forward(&attn.matmul(&v)?)?;
        let out = self.unpartition(&out, b, h, w, win)?;
        Ok((x + out)?)
    }
}

/// A block-window attention followed by a dilated-window attention.
#[derive(Debug, Clone)]
pub struct InterleavedAttention {
    block: WindowAttention,
    dilated: WindowAttention,
}

impl InterleavedAttention {
    pub fn new(vs: &mut Scope, channels: usize, groups: usize, window: usize) -> Result<Self> {
        Ok(Self {
            block: WindowAttention::new(&mut vs.sub("block"), channels, groups, window, WindowKind::Block)?,
            dilated: WindowAttention::new(&mut vs.sub("dilated"), channels, groups, window, WindowKind::Dilated)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.dilated.forward(&self.block.forward(x)?)
    }
}
