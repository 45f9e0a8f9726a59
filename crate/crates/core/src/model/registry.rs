use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> TensorSet<T> {
    pub fn new() -> Self {
        TensorSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TensorSet<U> {
        TensorSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces tensor `idx`, keeping its shape.
    pub fn replace(&mut self, idx: usize, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[idx].shape() {
            return Err(Error::shape(
                "registry",
                format!("{} {:?}", self.names[idx], self.tensors[idx].shape()),
                format!("{:?}", tensor.shape()),
            ));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }
}

/// Trainable parameters and non-trainable buffers (BN running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry<T: Scalar = f32> {
    pub params: TensorSet<T>,
    pub buffers: TensorSet<T>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: TensorSet::new(),
            buffers: TensorSet::new(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.numel()
    }

    /// Adds every parameter to `graph`, as variables if `trainable` else constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    graph.variable(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}
