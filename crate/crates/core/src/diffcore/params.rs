use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f32),
    Zeros,
    Ones,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    fnv1a(&bytes)
}

/// Named model parameters. Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. The initial value is a pure function of
    /// `(name, shape, seed)`. Re-registering an existing name with the same
    /// shape is a no-op.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if let Some(t) = self.params.get(name) {
            if t.shape() == shape {
                return Ok(());
            }
            return Err(Error::shape(
                "param init",
                format!("`{name}` already registered with shape {:?}", t.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let mut label = name.to_string();
                for d in shape {
                    label.push_str(&format!("/{d}"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &label));
                let normal = Normal::new(0.0f32, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::new(shape.to_vec(), data)?.with_requires_grad(true);
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) {
        for (k, t) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// Adds the parameter-leaf gradients of a finished backward pass.
    pub fn accumulate_grads(&mut self, graph: &Graph<f32>) {
        for (name, g) in graph.param_grads() {
            if let Some(t) = self.params.get_mut(name) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Gradient of `name`, or zeros when none has been accumulated.
    pub fn grad_or_zeros(&self, name: &str) -> Option<Vec<f32>> {
        self.params
            .get(name)
            .map(|t| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
    }

    /// Sub-store with the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            seed: self.seed,
        }
    }

    /// Copies every parameter of `other` into `self`, replacing same names.
    pub fn merge(&mut self, other: &ParameterStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }
}
