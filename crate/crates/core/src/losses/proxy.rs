use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{fingerprint, Manifest};
use crate::nn::{Conv2d, Linear};
use crate::params::{Scope, VarStore};

/// Named feature taps of the proxy network, shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Stage5,
    /// Pre-softmax class scores.
    Logit,
}

impl Tap {
    pub const ALL: [Tap; 6] = [Tap::Stage1, Tap::Stage2, Tap::Stage3, Tap::Stage4, Tap::Stage5, Tap::Logit];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Stage1 => "stage1",
            Tap::Stage2 => "stage2",
            Tap::Stage3 => "stage3",
            Tap::Stage4 => "stage4",
            Tap::Stage5 => "stage5",
            Tap::Logit => "logit",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature tap `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub image_size: usize,
    /// Output channels of the five stages.
    pub channels: [usize; 5],
    pub classes: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: [16, 32, 32, 64, 64],
            classes: 10,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "proxy network needs images of at least 16 pixels, got {}",
                self.image_size
            )));
        }
        if self.classes < 2 || self.channels.contains(&0) {
            return Err(Error::Config("proxy needs >= 2 classes and positive channels".into()));
        }
        Ok(())
    }

    /// Spatial size of each stage output.
    pub fn stage_sizes(&self) -> [usize; 5] {
        let mut s = [self.image_size; 5];
        for i in 1..5 {
            s[i] = s[i - 1].div_ceil(2);
        }
        s
    }
}

/// Feature stack of a batch: five `(B, C, H, W)` maps and `(B, classes)` logits.
#[derive(Debug, Clone)]
pub struct ProxyFeatures {
    pub stages: Vec<Tensor>,
    pub logit: Tensor,
}

impl ProxyFeatures {
    pub fn tap(&self, t: Tap) -> &Tensor {
        match t {
            Tap::Stage1 => &self.stages[0],
            Tap::Stage2 => &self.stages[1],
            Tap::Stage3 => &self.stages[2],
            Tap::Stage4 => &self.stages[3],
            Tap::Stage5 => &self.stages[4],
            Tap::Logit => &self.logit,
        }
    }

    /// Stage-5 activations pooled to one vector per image.
    pub fn pooled(&self) -> Result<Tensor> {
        Ok(self.stages[4].mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// Five-stage convolutional classifier whose stage outputs stand in for
/// the perceptual feature layers. Stage 1 keeps full resolution; each later
/// stage halves it.
#[derive(Debug, Clone)]
pub struct ProxyNet {
    stages: Vec<(Conv2d, Conv2d)>,
    head: Linear,
    config: ProxyConfig,
}

impl ProxyNet {
    pub fn new(vs: &mut Scope, config: &ProxyConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_prev = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let mut s = vs.sub(&format!("stage{}", i + 1));
            let stride = if i == 0 { 1 } else { 2 };
            let a = Conv2d::new(&mut s.sub("conv_a"), c_prev, c, 3, stride, 1)?;
            let b = Conv2d::new(&mut s.sub("conv_b"), c, c, 3, 1, 1)?;
            stages.push((a, b));
            c_prev = c;
        }
        Ok(Self {
            stages,
            head: Linear::new(&mut vs.sub("head"), c_prev, config.classes)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn features(&self, x: &Tensor) -> Result<ProxyFeatures> {
        let s = self.config.image_size;
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::Shape(format!("proxy expects (B, 3, {s}, {s}), got {dims:?}")));
        }
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(5);
        for (a, b) in &self.stages {
            h = a.forward(&h)?.relu()?;
            h = b.forward(&h)?.relu()?;
            stages.push(h.clone());
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logit = self.head.forward(&pooled)?;
        Ok(ProxyFeatures { stages, logit })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.features(x)?.logit)
    }
}

/// Trained proxy parameters and their audit record.
#[derive(Debug, Clone)]
pub struct ProxyCheckpoint {
    pub config: ProxyConfig,
    pub store: VarStore,
    /// Held-out accuracy measured after training.
    pub accuracy: f64,
    /// Only frozen proxies may drive tokenizer training.
    pub frozen: bool,
}

const PROXY_FORMAT: &str = "vqtok-proxy/1";

impl ProxyCheckpoint {
    pub fn init(config: &ProxyConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = VarStore::new(seed, dtype);
        ProxyNet::new(&mut store.scope("proxy"), config)?;
        Ok(Self {
            config: config.clone(),
            store,
            accuracy: 0.0,
            frozen: false,
        })
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    /// Trainable network over the checkpoint's store.
    pub fn network(&mut self) -> Result<ProxyNet> {
        self.store.set_frozen(false);
        ProxyNet::new(&mut self.store.scope("proxy"), &self.config)
    }

    /// Detached network for use as a fixed feature extractor. Refuses
    /// proxies that were not frozen after training.
    pub fn frozen_network(&self) -> Result<ProxyNet> {
        if !self.frozen {
            return Err(Error::Contract(format!(
                "proxy network (held-out accuracy {:.3}) was not frozen; retrain or force",
                self.accuracy
            )));
        }
        let mut store = self.store.clone();
        store.set_frozen(true);
        ProxyNet::new(&mut store.scope("proxy"), &self.config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("proxy.safetensors"))?;
        let p = dir.join("proxy_config.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&p, e))?;
        let mut m = Manifest::new();
        m.set("format", PROXY_FORMAT)
            .set("config_fingerprint", fingerprint(&self.config)?)
            .set("digest", self.digest()?)
            .set("accuracy", format!("{:.6}", self.accuracy))
            .set("frozen", self.frozen);
        m.write(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("manifest.txt"))?;
        if m.require("format")? != PROXY_FORMAT {
            return Err(Error::Contract(format!("{} is not a proxy checkpoint", dir.display())));
        }
        let p = dir.join("proxy_config.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: ProxyConfig = serde_json::from_str(&text)?;
        let store = VarStore::from_file(&dir.join("proxy.safetensors"), 0, DType::F32)?;
        let ck = Self {
            config,
            store,
            accuracy: m
                .require("accuracy")?
                .parse()
                .map_err(|_| Error::Serde("proxy accuracy is not a number".into()))?,
            frozen: m.require("frozen")? == "true",
        };
        let found = ck.digest()?;
        let expected = m.require("digest")?;
        if found != expected {
            return Err(Error::DigestMismatch {
                what: "proxy".into(),
                expected: expected.into(),
                found,
            });
        }
        Ok(ck)
    }
}
