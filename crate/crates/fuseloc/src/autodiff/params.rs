//! Named parameter store shared by the model, the optimizer, and
//! checkpointing.
//!
//! Parameters live outside any tape and keep insertion order, which fixes
//! both the optimizer update order and the checkpoint record order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One learnable tensor (or non-learnable buffer) with its gradient slot.
pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Vec<F>,
    /// Buffers (e.g. running statistics) are checkpointed but never updated
    /// by the optimizer and never bound to a tape as trainable leaves.
    pub trainable: bool,
}

/// Insertion-ordered collection of named parameters.
pub struct ParamSet<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<F>) -> ParamId {
        self.insert(name, shape, values, true)
    }

    /// Register a non-trainable buffer (checkpointed, not optimized).
    pub fn add_buffer(&mut self, name: &str, shape: Vec<usize>, values: Vec<F>) -> ParamId {
        self.insert(name, shape, values, false)
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<F>, trainable: bool) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value mismatch"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = vec![F::zero(); values.len()];
        self.params.push(Param { name: name.to_string(), shape, values, grad, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// All parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = F::zero();
            }
        }
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.values.len()).sum()
    }

    /// Deep copy with the same ids, names and values but freshly zeroed
    /// gradients — a scratch set for forwards that must not disturb the
    /// original (e.g. running-statistic updates during probing).
    pub fn clone_values(&self) -> Self {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.clone(),
                    grad: vec![F::zero(); p.values.len()],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("b", vec![1], vec![0.0]);
        ps.add("a", vec![2], vec![1.0, 2.0]);
        let names: Vec<&str> = ps.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", vec![1], vec![0.0]);
        ps.add("w", vec![1], vec![0.0]);
    }

    #[test]
    fn zero_grad_clears_accumulation() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add("w", vec![2], vec![1.0, 1.0]);
        ps.get_mut(id).grad = vec![3.0, -1.0];
        ps.zero_grad();
        assert_eq!(ps.get(id).grad, vec![0.0, 0.0]);
    }
}
