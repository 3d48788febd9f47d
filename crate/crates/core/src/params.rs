use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vlamd_tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a named trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
///
/// Layers keep [`ParamId`]s and look their weights up at forward time, so
/// the optimizer can swap in updated leaves without touching the layers.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
        let tensor = if tensor.requires_grad() { tensor } else { tensor.to_param() };
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces the values of a parameter with a fresh leaf of the same shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::param(data, &shape)?;
        Ok(())
    }

    /// Puts `tensor` itself in place of a parameter, keeping its graph
    /// links. Used to differentiate through externally supplied weights.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::Checkpoint(format!(
                "{} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn zero_grad(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Registers parameters under a dotted prefix with seeded initialization.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child scope `prefix.name`.
    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::param(data, shape)?;
        let full = self.full_name(name);
        self.store.add(full, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.register(name, data, shape)
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` matrix or any tensor whose
    /// fan sizes are given explicitly.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        {
            let mut vlad = init.scope("vlad");
            let mut l2r = vlad.scope("l2r");
            let mut agf = l2r.scope("agf");
            agf.xavier("w_m", &[4, 4], 4, 4).unwrap();
            assert!(agf.constant("w_m", &[1], 0.0).is_err());
        }
        drop(init);
        assert!(store.id("vlad.l2r.agf.w_m").is_some());
        assert!(store.get(store.id("vlad.l2r.agf.w_m").unwrap()).requires_grad());
    }
}
