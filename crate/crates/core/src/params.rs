//! Named parameter storage, batch-norm running statistics, and the forward
//! scope that binds both to a [`Record`].

use std::collections::HashMap;

use crate::autodiff::{Record, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormId(pub(crate) usize);

/// Which part of the network a parameter belongs to. Encoding parameters
/// (codebooks and their heads) are frozen during pretraining and may be
/// absent from pretraining checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Encoding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Enables or disables gradient flow for a whole parameter group.
    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.tensor.set_requires_grad(trainable);
        }
    }

    /// Moves gradients accumulated on parameter leaves of `rec` into the
    /// store, adding to any gradient already held.
    pub fn absorb_grads(&mut self, rec: &mut Record<T>) {
        for (id, g) in rec.take_param_grads() {
            self.params[id.0].tensor.accumulate_grad(&g);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub name: String,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
    /// False until the first training-mode update or checkpoint load.
    pub initialized: bool,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

impl<T: Real> BatchNormState<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            initialized: false,
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.values_mut().iter_mut().zip(mean) {
            *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.values_mut().iter_mut().zip(var) {
            *r = T::from_f64(m * r.as_f64() + (1.0 - m) * b);
        }
        self.initialized = true;
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            name: self.name.clone(),
            running_mean: self.running_mean.cast().with_requires_grad(false),
            running_var: self.running_var.cast().with_requires_grad(false),
            momentum: self.momentum,
            epsilon: self.epsilon,
            initialized: self.initialized,
        }
    }
}

/// Binds parameters and normalization state to a record for one forward
/// pass. Batch statistics observed in training mode are collected and
/// applied afterwards with [`Scope::finish`], so evaluation never mutates
/// the model.
pub struct Scope<'a, T: Real> {
    pub rec: &'a mut Record<T>,
    params: &'a ParamStore<T>,
    norms: &'a [BatchNormState<T>],
    mode: Mode,
    bound: HashMap<ParamId, Var>,
    updates: Vec<(NormId, Vec<f64>, Vec<f64>)>,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn new(rec: &'a mut Record<T>, params: &'a ParamStore<T>, norms: &'a [BatchNormState<T>], mode: Mode) -> Self {
        Self {
            rec,
            params,
            norms,
            mode,
            bound: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Returns the record variable for a parameter, inserting it on first use
    /// so that shared parameters map to a single leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.rec.param_leaf(self.params.get(id).tensor.clone(), id);
        self.bound.insert(id, v);
        v
    }

    /// Binds a parameter to an existing variable instead of a fresh leaf
    /// (used to differentiate with respect to externally supplied values).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, norm: NormId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let state = &self.norms[norm.0];
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.rec.batch_norm_train(x, g, b, state.epsilon)?;
                self.updates.push((norm, stats.mean, stats.var));
                Ok(y)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::UninitializedNorm(state.name.clone()));
                }
                let mean = state.running_mean.to_f64_vec();
                let var = state.running_var.to_f64_vec();
                self.rec.batch_norm_eval(x, g, b, &mean, &var, state.epsilon)
            }
        }
    }

    /// Returns the pending running-statistics updates, in forward order.
    pub fn finish(self) -> NormUpdates {
        NormUpdates(self.updates)
    }
}

/// Batch statistics gathered during a training-mode forward pass.
#[derive(Debug, Default)]
#[must_use]
pub struct NormUpdates(Vec<(NormId, Vec<f64>, Vec<f64>)>);

impl NormUpdates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply<T: Real>(self, norms: &mut [BatchNormState<T>]) {
        for (id, mean, var) in self.0 {
            norms[id.0].update(&mean, &var);
        }
    }
}
