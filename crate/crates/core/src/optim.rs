//! SGD and bias-corrected Adam over a [`ParameterStore`].

use serde::{Deserialize, Serialize};

use crate::error::{PhnError, Result};
use crate::scalar::Scalar;
use crate::tensor::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: every step also applies `θ ← θ − lr·λ·θ`.
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PhnError::config("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PhnError::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(PhnError::config("weight_decay", "must be finite and non-negative"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(PhnError::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    spec: OptimizerSpec,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the grads currently in `store`.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> Result<()> {
        for id in store.ids() {
            if store.get(id).grad().is_none() {
                return Err(PhnError::Contract(format!(
                    "parameter `{}` has no gradient",
                    store.name(id)
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != store.len() {
            return Err(PhnError::Contract(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let lr = T::of(self.spec.learning_rate);
        let decay = T::one() - lr * T::of(self.spec.weight_decay);
        let decoupled = self.spec.weight_decay > 0.0;
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    let tensor = store.get_mut(id);
                    let grad = tensor.grad().expect("checked above").to_vec();
                    for (v, g) in tensor.values_mut().iter_mut().zip(grad) {
                        if decoupled {
                            *v *= decay;
                        }
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::of(self.spec.beta1);
                let b2 = T::of(self.spec.beta2);
                let eps = T::of(self.spec.epsilon);
                let t = self.step as i32;
                let correction1 = T::one() - b1.powi(t);
                let correction2 = T::one() - b2.powi(t);
                for id in store.ids().collect::<Vec<_>>() {
                    let m = &mut self.first_moment[id.index()];
                    let v = &mut self.second_moment[id.index()];
                    let tensor = store.get_mut(id);
                    let grad = tensor.grad().expect("checked above").to_vec();
                    if m.len() != grad.len() {
                        return Err(PhnError::Contract("moment buffer shape differs from parameter".into()));
                    }
                    for (k, value) in tensor.values_mut().iter_mut().enumerate() {
                        let g = grad[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        let m_hat = m[k] / correction1;
                        let v_hat = v[k] / correction2;
                        if decoupled {
                            *value *= decay;
                        }
                        *value -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let id = s.add("theta", Tensor::scalar(value));
        s.get_mut(id).accumulate_grad(&[grad]).unwrap();
        s
    }

    #[test]
    fn sgd_step_definition() {
        let mut s = single(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1)).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.get(s.ids().next().unwrap()).values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut s = single(1.0, 0.0);
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1)).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).values()[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² after one step, so the update is lr·g/(|g| + ε).
        for g in [0.3, -4.0, 1e-3] {
            let mut s = single(0.0, g);
            let mut opt = Optimizer::new(OptimizerSpec::adam(1e-3)).unwrap();
            opt.step(&mut s).unwrap();
            let moved = s.get(s.ids().next().unwrap()).values()[0];
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g}: {moved} vs {expected}");
        }
    }

    #[test]
    fn adam_zero_gradient_barely_moves() {
        let mut s = single(1.0, 0.0);
        let mut opt = Optimizer::new(OptimizerSpec::adam(1e-3)).unwrap();
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        let v = s.get(s.ids().next().unwrap()).values()[0];
        assert!((v - 1.0).abs() < 1e-3 * 1e-6);
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = ParameterStore::<f64>::new();
        s.add("theta", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerSpec::default()).unwrap();
        assert!(matches!(opt.step(&mut s), Err(PhnError::Contract(_))));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = OptimizerSpec {
            beta1: 1.0,
            ..OptimizerSpec::default()
        };
        assert!(Optimizer::<f64>::new(spec).is_err());
    }
}
