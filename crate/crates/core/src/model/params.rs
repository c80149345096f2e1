use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
}

/// Named trainable tensors; `ParamId(i)` addresses the `i`-th entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Adds a tensor initialized from a stream keyed by `(seed, name)`, so a
    /// parameter's initial value depends only on its name and the seed.
    pub fn add(&mut self, name: String, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let mut t = Tensor::zeros(shape);
        if let Init::Uniform(scale) = init {
            let mut rng = param_rng(seed, &name);
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites `name` with `value`, checking the shape.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::ParamMismatch(vec![name.to_string()]))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::ParamMismatch(vec![format!(
                "{name}: {:?} vs {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )]));
        }
        self.tensors[id.0] = value.clone();
        Ok(())
    }
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    for (k, s) in key.iter_mut().zip(seed.to_le_bytes()) {
        *k ^= s;
    }
    ChaCha8Rng::from_seed(key)
}
