use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor.with_requires_grad(true));
    }

    /// Xavier-uniform weight matrix `[fan_in × fan_out]`.
    pub fn insert_xavier<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound) as Real)
            .collect();
        self.insert(name, Tensor::from_parts(vec![fan_in, fan_out], data));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: Real) {
        let numel = shape.iter().product();
        self.insert(name, Tensor::from_parts(shape.to_vec(), vec![value; numel]));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Scope<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Scope<'p> {
    /// Parameters bound in this scope are recorded with `requires_grad`.
    pub fn train(store: &'p ParamStore) -> Self {
        Scope {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Parameters are recorded as constants; backward is never needed.
    pub fn inference(store: &'p ParamStore) -> Self {
        Scope {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            trainable: false,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone().with_requires_grad(self.trainable);
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    /// Runs backward from `loss` and returns gradients keyed by parameter
    /// name, in name order. Unreached parameters get zero gradients.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Vec<Real>>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            let g = self
                .bound
                .get(name)
                .and_then(|v| grads.take(*v))
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }
}
