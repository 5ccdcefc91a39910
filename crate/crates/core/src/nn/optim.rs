//! SGD with classical momentum and per-group learning rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything that owns named parameter tensors.
pub trait ParameterStore {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    /// Copies every parameter into a name-ordered map.
    fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }
}

impl ParameterStore for BTreeMap<String, Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, v) in self {
            f(k, v);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, v) in self.iter_mut() {
            f(k, v);
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    /// Adds `grad` into the entry for `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, grad: Tensor) -> Result<()> {
        match self.0.get_mut(name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.0.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        for (k, v) in other.0 {
            self.accumulate(&k, v)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.scale(factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: Self::default_momentum(),
            weight_decay: Self::default_weight_decay(),
        }
    }
}

impl OptimizerConfig {
    pub fn default_momentum() -> f64 {
        0.9
    }

    pub fn default_weight_decay() -> f64 {
        0.00004
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// A named set of parameters sharing one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub lr: f64,
    pub frozen: bool,
    velocity: BTreeMap<String, Tensor>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<String>, lr: f64, frozen: bool) -> Self {
        ParamGroup {
            name: name.into(),
            params,
            lr,
            frozen,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, param: &str) -> Option<&Tensor> {
        self.velocity.get(param)
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.clear();
    }
}

/// Weight decay applies to weights only.
fn decays(name: &str) -> bool {
    !name.ends_with("bias")
}

/// One SGD step: for every non-frozen group,
/// `v <- momentum * v + g + weight_decay * theta` and `theta <- theta - lr * v`.
/// Frozen groups, including their velocity buffers, are left untouched.
pub fn sgd_step(
    groups: &mut [ParamGroup],
    params: &mut dyn ParameterStore,
    grads: &Gradients,
    config: &OptimizerConfig,
) -> Result<()> {
    config.validate()?;
    let mut owner: BTreeMap<String, usize> = BTreeMap::new();
    for (gi, group) in groups.iter().enumerate() {
        if group.frozen {
            continue;
        }
        if !(group.lr >= 0.0 && group.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("group `{}` has invalid lr {}", group.name, group.lr)));
        }
        for p in &group.params {
            if grads.get(p).is_none() {
                return Err(Error::MissingGradient(p.clone()));
            }
            owner.insert(p.clone(), gi);
        }
    }

    let mut failure = None;
    params.visit_mut(&mut |name, theta| {
        if failure.is_some() {
            return;
        }
        let Some(&gi) = owner.get(name) else { return };
        let grad = grads.get(name).expect("checked above");
        if grad.shape() != theta.shape() {
            failure = Some(Error::ShapeMismatch {
                layer: format!("sgd:{name}"),
                expected: theta.shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
            return;
        }
        let group = &mut groups[gi];
        let lr = group.lr;
        let wd = if decays(name) { config.weight_decay } else { 0.0 };
        let v = group
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        for ((t, g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *v = config.momentum * *v + g + wd * *t;
            *t -= lr * *v;
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
