//! Named tensor storage shared by the base model and the adapter.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, Result};

/// An ordered map from stable parameter names to tensors.
#[derive(Clone, Debug, Default)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| config(format!("missing parameter tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_> {
        Scope {
            map: self,
            prefix: prefix.into(),
        }
    }

    /// Converts every tensor to `dtype` (a detached copy).
    pub fn to_dtype(&self, dtype: DType) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.detach().to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// Deep copy with every tensor turned into a trainable variable. Returns
    /// the variable-backed map and the variables in name order.
    pub fn to_vars(&self) -> Result<(TensorMap, Vec<Var>)> {
        let mut out = TensorMap::new();
        let mut vars = Vec::with_capacity(self.len());
        for (k, v) in &self.tensors {
            let var = Var::from_tensor(&v.detach().copy()?)?;
            out.insert(k.clone(), var.as_tensor().clone());
            vars.push(var);
        }
        Ok((out, vars))
    }

    /// Detached deep copy; the result shares no storage with `self`.
    pub fn frozen(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.detach().copy()?);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for t in self.tensors.values() {
            let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A view of a [`TensorMap`] under a dotted name prefix.
#[derive(Clone)]
pub struct Scope<'a> {
    map: &'a TensorMap,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a> {
        Scope {
            map: self.map,
            prefix: self.join(&name.to_string()),
        }
    }

    pub fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.map.get(&self.join(name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.map.contains(&self.join(name))
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }
}

/// Deterministic parameter initializer. Creation order fixes the random
/// stream, so the same call sequence with the same seed gives the same map.
pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamInit {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Gaussian with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.gaussian(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn gaussian(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }

    pub fn conv(&mut self, map: &mut TensorMap, name: &str, out: usize, inp: usize, k: usize) -> Result<()> {
        map.insert(format!("{name}.weight"), self.fan_in(&[out, inp, k, k], inp * k * k)?);
        map.insert(format!("{name}.bias"), self.zeros(&[out])?);
        Ok(())
    }

    pub fn zero_conv(&mut self, map: &mut TensorMap, name: &str, out: usize, inp: usize, k: usize) -> Result<()> {
        map.insert(format!("{name}.weight"), self.zeros(&[out, inp, k, k])?);
        map.insert(format!("{name}.bias"), self.zeros(&[out])?);
        Ok(())
    }

    pub fn linear(&mut self, map: &mut TensorMap, name: &str, out: usize, inp: usize, bias: bool) -> Result<()> {
        map.insert(format!("{name}.weight"), self.fan_in(&[out, inp], inp)?);
        if bias {
            map.insert(format!("{name}.bias"), self.zeros(&[out])?);
        }
        Ok(())
    }

    pub fn norm(&mut self, map: &mut TensorMap, name: &str, channels: usize) -> Result<()> {
        map.insert(format!("{name}.weight"), self.ones(&[channels])?);
        map.insert(format!("{name}.bias"), self.zeros(&[channels])?);
        Ok(())
    }
}
