use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Adam hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One named trainable tensor with its Adam moments.
#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named parameters plus Adam state; all slots share one step counter.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a slot and return its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let shape = value.shape().to_vec();
        self.slots.push(Slot {
            name: name.into(),
            value,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        });
        self.slots.len() - 1
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.slots[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.slots[index].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    /// Place every slot on the tape as a differentiable leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.slots.iter().map(|s| tape.param(s.value.clone())).collect()
    }

    /// Place every slot on the tape as a constant.
    pub fn attach_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.slots.iter().map(|s| tape.constant(s.value.clone())).collect()
    }

    /// Apply one Adam step. `grads[i]` is the gradient for slot `i`; `None`
    /// is treated as a zero gradient.
    pub fn adam_step(&mut self, grads: &[Option<Tensor>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Shape(format!("{} gradients for {} slots", grads.len(), self.slots.len())));
        }
        for (slot, g) in self.slots.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != slot.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for slot `{}` of shape {:?}",
                        g.shape(),
                        slot.name,
                        slot.value.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { slot: slot.name.clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let p = slot.value.data_mut();
            let m = slot.first_moment.data_mut();
            let v = slot.second_moment.data_mut();
            for k in 0..p.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.5, -2.0]));
        store.adam_step(&[Some(Tensor::vector(vec![0.0, 0.0]))], &no_decay()).unwrap();
        assert_eq!(store.value(0).data(), &[1.5, -2.0]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn single_step_from_zero() {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::scalar(0.0));
        store.adam_step(&[Some(Tensor::scalar(1.0))], &no_decay()).unwrap();
        // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        assert!((store.value(0).item() + 0.001).abs() < 1e-10);
    }

    /// Independent scalar Adam recurrence.
    fn scalar_adam(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_scalar_trace() {
        let cfg = AdamConfig { weight_decay: 0.01, ..AdamConfig::default() };
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::scalar(0.7));
        let gs = [0.3, 0.3];
        for g in gs {
            store.adam_step(&[Some(Tensor::scalar(g))], &cfg).unwrap();
        }
        let expected = scalar_adam(0.7, &gs, cfg.learning_rate, cfg.weight_decay);
        assert!((store.value(0).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_slot() {
        let mut store = ParameterStore::new();
        store.insert("bias", Tensor::scalar(0.0));
        let err = store.adam_step(&[Some(Tensor::scalar(f64::NAN))], &no_decay()).unwrap_err();
        assert!(err.to_string().contains("bias"));
        assert_eq!(store.step_count(), 0);
    }
}
