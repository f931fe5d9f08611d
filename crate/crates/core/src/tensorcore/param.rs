use rand::Rng as _;

use super::ArrayF;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its accumulated gradient and freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    value: ArrayF,
    grad: ArrayF,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayF) -> Self {
        let grad = ArrayF::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn value(&self) -> &ArrayF {
        &self.value
    }

    pub fn grad(&self) -> &ArrayF {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: ArrayF) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f64], &[f64]) {
        (self.value.data_mut(), self.grad.data())
    }

    pub(crate) fn accumulate_grad(&mut self, g: &ArrayF) {
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// Ordered collection of parameters addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayF) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Drops every parameter from `len` onwards.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of scalar entries in trainable parameters.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Uniform Glorot initialisation: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> ArrayF {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayF::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn glorot_respects_bound_and_seed() {
        let a = glorot_uniform(&[8, 4, 16], 32, 128, &mut seeded(3));
        let b = glorot_uniform(&[8, 4, 16], 32, 128, &mut seeded(3));
        assert_eq!(a, b);
        let bound = (6.0f64 / 160.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn trainable_count_follows_flags() {
        let mut s = ParamStore::new();
        let a = s.add("a", ArrayF::zeros(&[3, 2]));
        s.add("b", ArrayF::zeros(&[4]));
        assert_eq!(s.count_trainable(), 10);
        s.set_trainable(a, false);
        assert_eq!(s.count_trainable(), 4);
        assert_eq!(s.count_total(), 10);
    }
}
