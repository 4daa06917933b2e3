//! Named parameter storage shared by every model component.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to. Freezing and the
/// gradient audit both work per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Lora,
    Head,
    Artifact,
    Detection,
    Attribution,
    Mgap,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Lora => "lora",
            ParamGroup::Head => "head",
            ParamGroup::Artifact => "artifact",
            ParamGroup::Detection => "detection",
            ParamGroup::Attribution => "attribution",
            ParamGroup::Mgap => "mgap",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    /// Decoupled weight decay applies (false for gains and biases).
    pub decay: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor,
        group: ParamGroup,
        trainable: bool,
        decay: bool,
    ) -> ParamId {
        tensor.set_requires_grad(trainable);
        self.params.push(Param {
            name: name.into(),
            tensor,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].tensor.set_requires_grad(on);
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter gradients recorded by one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.param_grads() {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| shape_err!("gradient for unknown parameter {}", id.0))?;
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies every parameter's values; paired with [`ParamStore::restore`].
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.tensor.values().to_vec())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(shape_err!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            ));
        }
        for (p, values) in self.params.iter_mut().zip(snapshot) {
            if values.len() != p.tensor.len() {
                return Err(shape_err!("snapshot length mismatch for {}", p.name));
            }
            p.tensor.values_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.len())
            .sum()
    }
}

pub(crate) fn normal(rng: &mut impl Rng, dims: Vec<usize>, std: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(dims, values).expect("dims match")
}

pub(crate) fn filled(dims: Vec<usize>, value: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, vec![value; n]).expect("dims match")
}
