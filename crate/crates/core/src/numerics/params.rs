use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable tensors plus non-learnable buffers (batch-norm running statistics).
///
/// Parameter order is insertion order and is stable, so gradient reductions
/// and optimizer updates always visit parameters in the same sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter path {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Uniform initialization in ±1/√fan_in.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` (indexed like the store) into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim("gradient set does not match parameter store"));
        }
        for (p, g) in self.params.iter_mut().zip(grads.iter()) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Checks that `other` has the same parameter paths and shapes.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::dim(format!(
                "parameter count differs: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::dim(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass, indexed by [`ParamId`].
/// `None` means the parameter did not take part in the computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self(vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.0[id.0].as_mut()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.0[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Option<Vec<f64>>> {
        self.0.iter()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
