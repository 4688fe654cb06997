//! Named parameter and buffer storage with deterministic initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// U(-b, b).
    Uniform(f64),
    /// N(0, std²).
    Normal(f64),
}

impl Init {
    /// Default for weights feeding `fan_in` inputs: U(±1/sqrt(fan_in)).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }

    fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * s
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Param,
    Buffer,
}

/// Host copy of one named tensor, used by checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn f64_to_tensor(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Present in the store but absent from the source; left at their current values.
    pub missing: Vec<String>,
    /// Present in the source but unknown to the store; ignored.
    pub unexpected: Vec<String>,
}

/// All trainable parameters and non-trainable buffers of a model family.
///
/// Layers keep clones of their [`Var`]s, which share storage with the store,
/// so loading or optimizer updates through the store are visible to them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, kind: Kind, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name {name}"
            )));
        }
        let var = Var::from_tensor(&f64_to_tensor(data, shape, self.dtype)?)?;
        let map = match kind {
            Kind::Param => &mut self.params,
            Kind::Buffer => &mut self.buffers,
        };
        map.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(Kind::Param, name, init.sample(n, rng), shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n = shape.iter().product();
        let value = match init {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Const(c) => c,
            Init::Uniform(_) | Init::Normal(_) => {
                return Err(Error::InvalidInput(
                    "buffers take constant initializers".into(),
                ))
            }
        };
        self.insert(Kind::Buffer, name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Trainable parameters whose names start with any of `prefixes`, in name order.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_params(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn entries(&self) -> impl Iterator<Item = (Kind, &String, &Var)> {
        self.params
            .iter()
            .map(|(n, v)| (Kind::Param, n, v))
            .chain(self.buffers.iter().map(|(n, v)| (Kind::Buffer, n, v)))
    }

    /// SHA-256 over names, shapes and exact values of every entry under `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (_, name, var) in self.entries().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in tensor_to_f64(var.as_tensor())? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_blobs(&self) -> Result<Vec<(Kind, Blob)>> {
        self.entries()
            .map(|(kind, name, var)| {
                Ok((
                    kind,
                    Blob {
                        name: name.clone(),
                        shape: var.dims().to_vec(),
                        data: tensor_to_f64(var.as_tensor())?,
                    },
                ))
            })
            .collect()
    }

    /// Overwrites entries present in `blobs`. Shapes must match; nothing is
    /// written unless every matching blob is valid.
    pub fn load_blobs(&self, blobs: &[Blob]) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut staged = Vec::new();
        for b in blobs {
            match self.get(&b.name) {
                Some(var) => {
                    if var.dims() != b.shape.as_slice()
                        || b.shape.iter().product::<usize>() != b.data.len()
                    {
                        return Err(Error::Checkpoint(format!(
                            "shape mismatch for {}: store {:?}, checkpoint {:?}",
                            b.name,
                            var.dims(),
                            b.shape
                        )));
                    }
                    staged.push((var, f64_to_tensor(b.data.clone(), &b.shape, self.dtype)?));
                    report.loaded.push(b.name.clone());
                }
                None => report.unexpected.push(b.name.clone()),
            }
        }
        for (var, t) in staged {
            var.set(&t)?;
        }
        let loaded: std::collections::BTreeSet<&str> =
            report.loaded.iter().map(String::as_str).collect();
        report.missing = self
            .entries()
            .map(|(_, n, _)| n.clone())
            .filter(|n| !loaded.contains(n.as_str()))
            .collect();
        Ok(report)
    }

    /// Copies values of every entry under `prefix` from `other`.
    pub fn copy_from(&self, other: &ParamStore, prefix: &str) -> Result<()> {
        let blobs: Vec<Blob> = other
            .to_blobs()?
            .into_iter()
            .map(|(_, b)| b)
            .filter(|b| b.name.starts_with(prefix))
            .collect();
        self.load_blobs(&blobs)?;
        Ok(())
    }
}
