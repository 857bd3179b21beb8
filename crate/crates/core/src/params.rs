//! Named parameter storage with seeded initialisation, safetensors
//! persistence and content digests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Kaiming-style uniform for a layer with the given fan-in.
    FanIn(usize),
}

/// A flat, name-ordered set of trainable variables.
///
/// Parameters are created lazily through [`Scope::var`]. When a name is
/// already present (for instance after [`VarStore::load`]) the stored value
/// is reused, so the same constructor builds fresh and restored networks.
/// Initial values depend only on `(seed, name)`.
#[derive(Debug, Clone)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// When frozen, [`Scope::var`] hands out detached tensors so no gradient
    /// is ever tracked for this store.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: name.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Var)> {
        self.vars
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Insert or replace a variable directly.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) => {
                if v.dims() != value.dims() {
                    return Err(Error::Shape(format!(
                        "{name}: stored {:?}, new {:?}",
                        v.dims(),
                        value.dims()
                    )));
                }
                v.set(&value)?;
            }
            None => {
                self.vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    /// Copies every variable of `other` whose name (after stripping
    /// `from_prefix` and prepending `to_prefix`) is not yet present here.
    pub fn copy_from(&mut self, other: &VarStore, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (k, v) in other.vars.iter() {
            if let Some(rest) = k.strip_prefix(from_prefix) {
                let name = format!("{to_prefix}{rest}");
                self.insert(&name, v.as_tensor().copy()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Independent copy: the clone shares no storage with `self`.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = Self::new(self.seed, self.dtype);
        out.frozen = self.frozen;
        out.copy_from(self, "", "")?;
        Ok(out)
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn digest(&self) -> Result<String> {
        self.digest_prefix("")
    }

    pub fn digest_prefix(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars_with_prefix(prefix) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for x in flat {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads every tensor from a safetensors file into this store,
    /// replacing values of variables that already exist.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let map = candle_core::safetensors::load(path, &self.device)?;
        let mut names: Vec<_> = map.keys().cloned().collect();
        names.sort();
        for k in names {
            self.insert(&k, map[&k].clone())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path, seed: u64, dtype: DType) -> Result<Self> {
        let mut vs = Self::new(seed, dtype);
        vs.load(path)?;
        Ok(vs)
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, requested {:?}",
                    v.dims(),
                    shape
                )));
            }
        } else {
            let n: usize = shape.iter().product();
            let mut r = rng::stream(self.seed, name);
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n)
                    .map(|_| (rand::Rng::random::<f64>(&mut r) * 2.0 - 1.0) * b)
                    .collect(),
                Init::Normal(s) => (0..n).map(|_| rng::normal(&mut r) * s).collect(),
                Init::FanIn(fan_in) => {
                    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n)
                        .map(|_| (rand::Rng::random::<f64>(&mut r) * 2.0 - 1.0) * b)
                        .collect()
                }
            };
            let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
            self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        }
        let v = &self.vars[name];
        Ok(if self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        })
    }
}

/// A naming prefix into a [`VarStore`].
pub struct Scope<'a> {
    store: &'a mut VarStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
