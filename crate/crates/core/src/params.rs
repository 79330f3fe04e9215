//! Named parameter storage shared by the model, optimizer, EMA and
//! checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone)]
pub struct Entry<T: Element> {
    pub tensor: Tensor<T>,
    /// Buffers (fixed positional tables) are stored and checkpointed but
    /// never updated or counted as parameters.
    pub trainable: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore<T: Element> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let tensor = if trainable {
            tensor.requires_grad()
        } else {
            tensor.detach()
        };
        self.entries.insert(name.into(), Entry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry<T>> {
        self.entries.remove(name)
    }

    /// Replaces the values of an existing entry, keeping its role.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        let t = Tensor::from_vec(data, entry.tensor.shape())?;
        entry.tensor = if entry.trainable { t.requires_grad() } else { t };
        Ok(())
    }

    /// Swaps in `tensor` unchanged (no re-wrapping as a leaf), so gradients
    /// flow to a caller-owned tensor. Shape must match.
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "replace",
                format!("`{name}`: {:?} vs {:?}", entry.tensor.shape(), tensor.shape()),
            ));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Copy with every entry detached, for graph-free inference.
    pub fn frozen(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.detach(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, e) in &self.entries {
            out.insert(k.clone(), e.tensor.cast::<U>(), e.trainable);
        }
        out
    }
}

/// Initialization rule for a freshly allocated weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

impl Init {
    pub fn sample<T: Element, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n = crate::tensor::numel(shape);
        let data: Vec<T> = match self {
            Init::Zeros => vec![T::from_f64(0.0); n],
            Init::Ones => vec![T::from_f64(1.0); n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::from_f64(z * std)
                })
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::from_f64(z * std);
                    }
                })
                .collect(),
        };
        Tensor::from_vec(data, shape).expect("init shape has no zero extent")
    }
}

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
pub fn linear<T: Element>(x: &Tensor<T>, store: &ParamStore<T>, prefix: &str) -> Result<Tensor<T>> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let y = x.matmul(w)?;
    match store.entry(&format!("{prefix}.bias")) {
        Some(b) => y.add(&b.tensor),
        None => Ok(y),
    }
}

/// Registers a linear layer's weight and bias.
pub fn alloc_linear<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    init: Init,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.weight"), init.sample(&[d_in, d_out], rng), true);
    store.insert(format!("{prefix}.bias"), Init::Zeros.sample(&[d_out], rng), true);
}
