//! Named learnable tensors and the ADAM optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Learnable tensors keyed by hierarchical name, iterated lexicographically.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step_count: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Adds or replaces a parameter; any optimizer state for it is dropped.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.moments.remove(&name);
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    pub fn has_moments(&self) -> bool {
        !self.moments.is_empty()
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn set_optimizer_state(
        &mut self,
        moments: BTreeMap<String, Moments<T>>,
        step_count: u64,
    ) -> Result<()> {
        for (name, m) in &moments {
            let p = self.require(name)?;
            if m.first.len() != p.numel() || m.second.len() != p.numel() {
                return Err(Error::Config(format!(
                    "optimizer state for `{name}` does not match the parameter's size"
                )));
            }
        }
        self.moments = moments;
        self.step_count = step_count;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::clear_grad);
    }

    /// Drops the moment buffers and step counter (leaving training).
    pub fn reset_optimizer(&mut self) {
        self.moments.clear();
        self.step_count = 0;
    }

    /// Value copy in another precision; gradients and optimizer state are dropped.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Stable 64-bit digest of names, shapes and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = xxhash_rust::xxh3::Xxh3::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape().dims() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.as_f64().to_le_bytes());
            }
        }
        h.digest()
    }

    /// Sum of squares over every learnable scalar.
    pub fn squared_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// One bias-corrected ADAM update over every parameter.
    ///
    /// Gradients are left in place; the caller resets them.
    pub fn adam_step(&mut self, config: &OptimizerConfig) -> Result<()> {
        config.validate()?;
        if let Some((name, _)) = self.entries.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::lit(config.beta1);
        let b2 = T::lit(config.beta2);
        let one = T::one();
        let bias1 = T::lit(1.0 - config.beta1.powi(t));
        let bias2 = T::lit(1.0 - config.beta2.powi(t));
        let lr = T::lit(config.lr);
        let eps = T::lit(config.epsilon);
        for (name, param) in self.entries.iter_mut() {
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![T::zero(); param.numel()],
                second: vec![T::zero(); param.numel()],
            });
            let (values, grad) = param.values_and_grad_mut();
            let grad = grad.expect("checked above");
            for (((v, g), m1), m2) in values
                .iter_mut()
                .zip(grad)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = b1 * *m1 + (one - b1) * *g;
                *m2 = b2 * *m2 + (one - b2) * *g * *g;
                let m_hat = *m1 / bias1;
                let v_hat = *m2 / bias2;
                *v -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_store(theta: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let mut t = Tensor::scalar(theta);
        t.accumulate_grad(&[grad]);
        s.insert("theta", t);
        s
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut s = scalar_store(1.0, 0.5);
        s.adam_step(&OptimizerConfig::default().with_lr(0.1))
            .unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-7);
        assert!((s.get("theta").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = ParameterStore::<f64>::new();
        let mut t = Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![0.3, -2.0, 7.5]).unwrap();
        t.ensure_grad();
        s.insert("w", t.clone());
        for _ in 0..3 {
            s.adam_step(&OptimizerConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), t.data());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a.weight", Tensor::scalar(1.0));
        match s.adam_step(&OptimizerConfig::default()) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "a.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParameterStore::<f32>::new();
        for n in ["b", "a.z", "a.b", "c"] {
            s.insert(n, Tensor::scalar(0.0));
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a.b", "a.z", "b", "c"]);
    }
}
