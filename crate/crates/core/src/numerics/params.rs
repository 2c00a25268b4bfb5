use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Array, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array<F>,
    pub grad: Array<F>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named parameter and buffer store. Insertion order is stable and defines
/// the checkpoint layout and optimizer iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Array<F>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let grad = Array::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Array<F>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Array<F>) -> ParamId {
        self.insert(name, value, false)
    }

    /// Zero-mean Gaussian init with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
        let data = (0..n)
            .map(|_| F::from_f64_lossy(dist.sample(rng)))
            .collect();
        self.add_param(name, Array::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add_param(name, Array::full(shape.to_vec(), F::from_f64_lossy(value)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Array<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array<F> {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[F]) {
        for (a, &b) in self.entries[id.0].grad.data_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replace a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Array<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::dim("param set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
