//! Named parameter registry shared by the network, optimizer and checkpoints.

use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Registration order is the
/// checkpoint manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape leaves for every parameter of a store, in registry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Per-parameter gradients in registry order; `None` for frozen parameters.
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(invalid_arg!("parameter {name:?} registered twice"));
        }
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape` as a leaf; trainable ones require grad.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    pub fn collect_grads(&self, grads: &Gradients<T>, bound: &Bound) -> ParamGrads<T> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| p.trainable.then(|| grads.wrt(v)))
            .collect()
    }

    /// Replace the values of parameters present in `other` by name.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            let id = self
                .find(&p.name)
                .ok_or_else(|| invalid_arg!("unknown parameter {:?}", p.name))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(invalid_arg!(
                    "parameter {:?}: shape {:?} does not match {:?}",
                    p.name,
                    p.value.shape(),
                    dst.value.shape()
                ));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }
}
