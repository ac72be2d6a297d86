use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{Gradients, Matrix};
use crate::error::{Error, Result};

/// Identifies a parameter across parameter sets: `group` names the owning
/// [`ParamSet`], `index` the slot inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: u32,
    pub index: usize,
}

/// A trainable (or frozen) matrix together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: Matrix,
    grad: Matrix,
    trainable: bool,
    has_grad: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix, trainable: bool) -> Self {
        let grad = Array2::zeros(value.dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable,
            has_grad: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.has_grad = false;
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut Matrix, &Matrix) {
        (&mut self.value, &self.grad)
    }
}

/// An ordered collection of parameters sharing one group id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    group: u32,
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            params: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> usize {
        self.params.push(Parameter::new(name, value, trainable));
        self.params.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.params[index].value
    }

    /// Mutable access to a value, bypassing the optimizer. Used for
    /// initialization, loading and finite-difference probes.
    pub fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.params[index].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_at(&mut self, index: usize, trainable: bool) {
        self.params[index].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn has_grad(&self) -> bool {
        self.params.iter().any(|p| p.has_grad)
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Parameter::len)
            .sum()
    }

    /// Adds the gradients belonging to this group into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (key, g) in grads.iter() {
            if key.group != self.group {
                continue;
            }
            let p = self
                .params
                .get_mut(key.index)
                .ok_or_else(|| Error::Tape(format!("gradient for unknown parameter {key:?}")))?;
            if p.grad.dim() != g.dim() {
                return Err(Error::shape(
                    "accumulate",
                    format!(
                        "{}: gradient {:?} vs value {:?}",
                        p.name,
                        g.dim(),
                        p.value.dim()
                    ),
                ));
            }
            p.grad += g;
            p.has_grad = true;
        }
        Ok(())
    }

    /// All values in declaration order, row-major within each parameter.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.params {
            out.extend(p.value.iter());
        }
        out
    }

    /// Overwrites every value from a flat payload produced by [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::shape(
                "load_flat",
                format!("{} values for {} slots", flat.len(), self.scalar_count()),
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            for (dst, src) in p.value.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
