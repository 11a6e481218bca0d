use std::collections::BTreeMap;
use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed (lexicographic) order.
///
/// Tensors sit behind `Arc` so that registering them on a tape is a pointer
/// copy; mutation goes through [`ParamStore::get_mut`], which clones only when
/// a tape still holds the old value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Total number of scalar parameters.
    pub fn n_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    /// Same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn zeros_like(&self) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(Tensor::zeros(v.shape().to_vec()))))
            .collect();
        ParamStore { entries }
    }

    /// Registers every tensor on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf_shared(v.clone()) } else { tape.constant_shared(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Binds `self + t * direction` for a scalar variable `t`, so that the
    /// derivative with respect to `t` is the directional derivative along
    /// `direction`.
    pub fn bind_along(&self, tape: &mut Tape, t: Var, direction: &ParamStore) -> Result<Bound> {
        if !self.same_layout(direction) {
            return Err(Error::ShapeMismatch("direction does not match the parameter layout".into()));
        }
        let mut vars = BTreeMap::new();
        for ((k, v), d) in self.entries.iter().zip(direction.entries.values()) {
            let base = tape.constant_shared(v.clone());
            let dir = tape.constant_shared(d.clone());
            let tt = tape.expand_scalar(t, v.shape().to_vec());
            let step = tape.mul(tt, dir);
            vars.insert(k.clone(), tape.add(base, step));
        }
        Ok(Bound { vars })
    }

    /// Same layout with entries drawn uniformly from `[-1, 1]`.
    pub fn random_like(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let data = (0..v.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                (k.clone(), Arc::new(Tensor::new(v.shape().to_vec(), data)))
            })
            .collect();
        ParamStore { entries }
    }
}

/// Tape variables of a [`ParamStore`], same order as the store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub fn init_bias(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

/// Builds a store from `(name, tensor)` pairs, rejecting duplicates.
pub(crate) fn store_from(pairs: Vec<(String, Tensor)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (k, v) in pairs {
        if store.get(&k).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {k}")));
        }
        store.insert(k, v);
    }
    Ok(store)
}
