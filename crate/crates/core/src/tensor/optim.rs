use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Momentum buffer.
    pub velocity: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad, velocity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// An ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::ZERO);
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    velocity: p.velocity.cast(),
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// `(epoch, multiplier)` pairs; every pair whose epoch is reached scales the rate.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    4e-4
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: vec![(35, 0.1), (55, 0.1)],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.schedule.iter().filter(|(e, _)| *e <= epoch).fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// One momentum-SGD update over every parameter; gradients are zeroed afterwards.
pub fn sgd_step<S: Scalar>(params: &mut ParamSet<S>, cfg: &OptimizerConfig, epoch: usize) {
    let lr = cfg.rate_at(epoch);
    for p in params.iter_mut() {
        let n = p.value.len();
        for i in 0..n {
            let w = p.value.data()[i].to_f64();
            let g = p.grad.data()[i].to_f64() + cfg.weight_decay * w;
            let v = cfg.momentum * p.velocity.data()[i].to_f64() - lr * g;
            p.velocity.data_mut()[i] = S::from_f64(v);
            p.value.data_mut()[i] = S::from_f64(w + v);
        }
        p.grad.data_mut().iter_mut().for_each(|g| *g = S::ZERO);
    }
}
