use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::VarStore;

/// Learning-rate decay over a run of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `end_lr` at the final step.
    Cosine { end_lr: f64 },
    /// Geometric decay to `end_lr`, starting at `start_iter`.
    Exponential { end_lr: f64, start_iter: u64 },
    /// Linear decay to `end_lr`, starting at `start_iter`.
    Linear { end_lr: f64, start_iter: u64 },
}

impl Schedule {
    pub fn validate(&self, base: f64) -> Result<()> {
        if !(base > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {base}")));
        }
        let (end, floor_ok) = match *self {
            Schedule::Constant => return Ok(()),
            Schedule::Cosine { end_lr } | Schedule::Linear { end_lr, .. } => (end_lr, end_lr >= 0.0),
            // geometric decay cannot reach zero
            Schedule::Exponential { end_lr, .. } => (end_lr, end_lr > 0.0),
        };
        if !floor_ok || end > base {
            return Err(Error::Config(format!("end rate {end} out of range for base rate {base}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, base: f64, step: u64, total: u64) -> f64 {
        let frac = |start: u64| -> f64 {
            if step <= start || total <= start {
                0.0
            } else {
                ((step - start) as f64 / (total - start) as f64).min(1.0)
            }
        };
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { end_lr } => {
                let t = frac(0);
                end_lr + (base - end_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Exponential { end_lr, start_iter } => base * (end_lr / base).powf(frac(start_iter)),
            Schedule::Linear { end_lr, start_iter } => base + (end_lr - base) * frac(start_iter),
        }
    }
}

/// Adam moments and rates. `weight_decay` is applied decoupled (AdamW)
/// when positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.lr)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        self.schedule.lr_at(self.lr, step, total)
    }
}

/// Adam with explicit, serialisable state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every variable under `prefix` that received a
    /// gradient. Returns the number of tensors updated.
    pub fn step(&mut self, store: &VarStore, prefix: &str, grads: &GradStore, lr: f64) -> Result<usize> {
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut n = 0;
        for (name, var) in store.vars_with_prefix(prefix) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // gradients carry the forward graph; keeping them in the moments
            // would retain every past step's graph
            let g = g.detach().to_dtype(var.dtype())?;
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut theta = var.as_tensor().detach();
            if c.weight_decay > 0.0 {
                theta = (&theta * (1.0 - lr * c.weight_decay))?;
            }
            var.set(&(theta - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m.detach());
            self.v.insert(name.to_string(), v.detach());
            n += 1;
        }
        Ok(n)
    }

    /// Drops the moments of one variable, e.g. after it was re-initialised.
    pub fn reset(&mut self, name: &str) {
        self.m.remove(name);
        self.v.remove(name);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        map.insert(
            "steps".into(),
            Tensor::from_vec(vec![self.steps as i64], 1, &Device::Cpu)?,
        );
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(config: OptimConfig, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut opt = Self::new(config)?;
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                opt.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                opt.v.insert(name.to_string(), t);
            } else if k == "steps" {
                opt.steps = t.to_vec1::<i64>()?[0] as u64;
            }
        }
        Ok(opt)
    }
}
