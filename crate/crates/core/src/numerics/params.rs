use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyperparameters for [`ParamStore::adam_step`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_epsilon() -> f32 {
    1e-8
}

impl AdamConfig {
    /// Adam with the usual moment decay rates (0.9, 0.999) and ε = 1e-8.
    pub fn with_learning_rate(learning_rate: f32) -> Result<Self> {
        let cfg = AdamConfig {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f32| v > 0.0 && v < 1.0;
        if !(open_unit(self.beta1) && open_unit(self.beta2)) {
            return Err(Error::InvalidConfig(format!(
                "adam betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adam epsilon and learning rate must be positive, got {} and {}",
                self.epsilon, self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

/// Named parameters in insertion order, with their gradients and Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!(
                "parameter name `{name}` must be non-empty without whitespace"
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                first_moment: Tensor::zeros(&shape),
                second_moment: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    pub(crate) fn insert_with_state(&mut self, name: &str, param: Param) -> Result<()> {
        let shape = param.value.shape();
        if param.first_moment.shape() != shape || param.second_moment.shape() != shape {
            return Err(Error::shape(
                "param state",
                format!("{shape:?}"),
                format!(
                    "{:?}/{:?}",
                    param.first_moment.shape(),
                    param.second_moment.shape()
                ),
            ));
        }
        self.insert(name, param.value.clone())?;
        self.params[name] = param;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Number of completed Adam updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Sets every gradient to zero so that later accumulation starts clean.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{:?}", p.value.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Multiplies every populated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f32) {
        for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// One bias-corrected Adam update over every parameter.
    ///
    /// Fails without touching any state if a gradient is missing or not finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for (name, p) in &self.params {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            g.ensure_finite(&format!("gradient of `{name}`"))?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let step_size = (cfg.learning_rate as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
        for p in self.params.values_mut() {
            let g = p.grad.as_ref().expect("checked above").data();
            let w = p.value.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
