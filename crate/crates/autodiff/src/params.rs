use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors. Order is part of the
/// checkpoint format, so it is fixed by whoever builds the set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(AutodiffError::Contract(format!(
                "duplicate parameter {name}"
            )));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All coordinates concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().cloned())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(AutodiffError::Dimension {
                op: "assign_flat",
                lhs: vec![self.numel()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Gradients for the vars returned by [`ParamSet::attach`], zeros where
    /// the sweep did not reach.
    pub fn gradients(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }

    /// `p -= lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}
