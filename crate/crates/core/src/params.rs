//! Named, trainable parameters with gradient buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which side of the autoencoder a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered parameter collection. Insertion order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
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

    pub fn group_ids(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
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

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `scale * grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64], scale: f64) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.numel() != grad.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: p.grad.shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        for (acc, g) in p.grad.data_mut().iter_mut().zip(grad) {
            *acc += scale * g;
        }
        Ok(())
    }

    /// Global L2 norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}
