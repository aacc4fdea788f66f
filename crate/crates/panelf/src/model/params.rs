use std::collections::BTreeMap;

use panelf_core::{Real, Rng, Tensor};

use crate::error::{Error, Result};

/// Named parameter tensors, keyed by dot-separated path and iterated in path order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.tensors.insert(path, t);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.tensors.values().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    /// Independent copy of every tensor (no shared storage).
    pub fn deep_clone(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let c = v.detach();
                c.set_requires_grad(v.requires_grad());
                (k.clone(), c)
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy with every path prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries under `prefix.`, with the prefix removed.
    pub fn sub(&self, prefix: &str) -> Self {
        let lead = format!("{prefix}.");
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelParams<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// True when every tensor holds bit-identical values to `other`'s.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data().iter()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

impl ModelParams<f32> {
    pub(crate) fn init_weight(&mut self, path: &str, shape: &[usize], rng: &mut Rng) -> Result<()> {
        let n = shape.iter().product();
        self.insert(path, Tensor::param(shape.to_vec(), rng.truncated_normal_vec(n, INIT_STD))?)
    }

    pub(crate) fn init_const(&mut self, path: &str, shape: &[usize], value: f32) -> Result<()> {
        let n = shape.iter().product();
        self.insert(path, Tensor::param(shape.to_vec(), vec![value; n])?)
    }
}

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f32 = 0.02;
