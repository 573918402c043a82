//! Named parameters with Adam moment accumulators.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
    adam: AdamConfig,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_adam(adam: AdamConfig) -> Self {
        Self {
            adam,
            ..Self::default()
        }
    }

    /// Registers (or replaces) a parameter and clears its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let len = value.len();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                first_moment: vec![0.0; len],
                second_moment: vec![0.0; len],
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Overwrites an existing parameter's values, keeping its shape and moments.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.slots.get_mut(name).ok_or_else(|| TensorError::Parameter {
            name: name.to_string(),
            reason: "unknown parameter".into(),
        })?;
        if slot.value.shape() != value.shape() {
            return Err(TensorError::Parameter {
                name: name.to_string(),
                reason: format!("shape {:?} does not match {:?}", value.shape(), slot.value.shape()),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slots
            .get(name)
            .map(|s| (s.first_moment.as_slice(), s.second_moment.as_slice()))
    }

    /// Snapshot of the parameter values only.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.value.clone()))
            .collect()
    }

    /// Restores values from a snapshot taken with [`ParamStore::values`].
    pub fn restore(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in values {
            self.set(name, value.clone())?;
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` are
    /// treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!("learning rate must be finite and non-negative, got {lr}"),
            });
        }
        for (name, g) in grads {
            let slot = self.slots.get(name).ok_or_else(|| TensorError::Parameter {
                name: name.clone(),
                reason: "gradient supplied for unknown parameter".into(),
            })?;
            if slot.value.shape() != g.shape() {
                return Err(TensorError::Parameter {
                    name: name.clone(),
                    reason: format!(
                        "gradient shape {:?} does not match parameter shape {:?}",
                        g.shape(),
                        slot.value.shape()
                    ),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let grad = grads.get(name);
            let mut values = slot.value.data().to_vec();
            for i in 0..values.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                let m = beta1 * slot.first_moment[i] + (1.0 - beta1) * g;
                let v = beta2 * slot.second_moment[i] + (1.0 - beta2) * g * g;
                slot.first_moment[i] = m;
                slot.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot.value = Tensor::new(slot.value.shape(), values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("w", Tensor::new(&[n], values).unwrap());
        s
    }

    fn grads(values: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(values))])
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(vec![0.5, -1.5, 2.0]);
        s.adam_step(&grads(vec![0.0; 3]), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.5, -1.5, 2.0]);
        let (m, v) = s.moments("w").unwrap();
        assert!(m.iter().chain(v).all(|x| *x == 0.0));
    }

    #[test]
    fn first_step_moves_each_entry_by_about_lr() {
        // At step 1, m_hat = g and v_hat = g^2, so the update is lr*g/(|g|+eps).
        let lr = 0.01;
        let g = [0.3, -2.0, 1e-3];
        let mut s = store_with(vec![0.0; 3]);
        s.adam_step(&grads(g.to_vec()), lr).unwrap();
        for (w, g) in s.get("w").unwrap().data().iter().zip(g) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert!((w.abs() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut s = store_with(vec![1.0]);
        assert_eq!(s.step(), 0);
        s.adam_step(&grads(vec![1.0]), 0.1).unwrap();
        s.adam_step(&grads(vec![1.0]), 0.1).unwrap();
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let mut s = store_with(vec![1.0, 2.0]);
        let err = s.adam_step(&grads(vec![1.0]), 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn moments_track_parameter_shape() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 3]));
        let (m, v) = s.moments("a").unwrap();
        assert_eq!((m.len(), v.len()), (6, 6));
    }
}
