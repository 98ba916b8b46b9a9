//! Bias-corrected Adam and the step-indexed learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{field}.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{field}.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("{field}.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| Tensor::zeros(p.value.shape());
        Self {
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// Moments keyed `m.{param}` / `v.{param}`.
    pub fn to_named_tensors(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (i, p) in store.params().iter().enumerate() {
            out.insert(format!("m.{}", p.name), self.m[i].clone());
            out.insert(format!("v.{}", p.name), self.v[i].clone());
        }
        out
    }

    pub fn from_named_tensors(store: &ParamStore<T>, named: &BTreeMap<String, Tensor<T>>, t: u64) -> Result<Self> {
        let mut state = Self::new(store);
        if named.len() != 2 * store.len() {
            return Err(Error::Format(format!(
                "optimizer state has {} tensors, expected {}",
                named.len(),
                2 * store.len()
            )));
        }
        for (i, p) in store.params().iter().enumerate() {
            for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let key = format!("{prefix}.{}", p.name);
                let t = named
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("optimizer state lacks `{key}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("`{key}` has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
                }
                *slot = t.clone();
            }
        }
        state.t = t;
        Ok(state)
    }
}

/// One Adam update with learning rate `lr` (the schedule's value, which
/// overrides `cfg.lr`):
///
/// ```text
/// m ← β₁m + (1−β₁)g      v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ)
/// ```
///
/// Every gradient is checked before anything is modified; a non-finite
/// entry aborts with the parameter's name. With `lr = 0` the parameters
/// are left bitwise untouched.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &OptimizerConfig, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::arg("adam_step", "optimizer state does not match the parameter store"));
    }
    if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient { param: p.name.clone() });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr_t, eps) = (T::from_f64(lr), T::from_f64(cfg.eps));
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.grad.data();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
        }
        if lr == 0.0 {
            continue;
        }
        let theta = p.value.data_mut();
        for j in 0..theta.len() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Consecutive `(steps, lr)` phases. Phase `i` covers the `steps` global
/// steps after the previous phases; the last rate persists afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePhase {
    pub steps: u64,
    pub lr: f64,
}

/// Learning rate for the 0-based global `step`, or `None` when no phase is
/// configured.
pub fn scheduled_lr(phases: &[SchedulePhase], step: u64) -> Option<f64> {
    let mut end = 0u64;
    for p in phases {
        end = end.saturating_add(p.steps);
        if step < end {
            return Some(p.lr);
        }
    }
    phases.last().map(|p| p.lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(theta)).unwrap();
        (s, id)
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.params_mut()[0].grad.data_mut()[0] = g;
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(1.25);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &OptimizerConfig::default(), 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.25);
    }

    #[test]
    fn closed_form_first_step() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        set_grad(&mut s, 1.0);
        let cfg = OptimizerConfig { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 1e-8 };
        adam_step(&mut s, &mut st, &cfg, cfg.lr).unwrap();
        assert!((s.value(id).item() - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let cfg = OptimizerConfig { lr: 0.01, ..OptimizerConfig::default() };
        let mut reached = None;
        for step in 0..2000 {
            let theta = s.value(id).item();
            if (theta - 3.0).abs() < 1e-2 {
                reached = Some(step);
                break;
            }
            set_grad(&mut s, 2.0 * (theta - 3.0));
            adam_step(&mut s, &mut st, &cfg, cfg.lr).unwrap();
        }
        assert!(reached.is_some(), "theta = {}", s.value(id).item());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        set_grad(&mut s, f64::NAN);
        let err = adam_step(&mut s, &mut st, &OptimizerConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(s.value(id).item(), 0.5);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let (mut s, id) = scalar_store(-0.0);
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            set_grad(&mut s, 0.3);
            adam_step(&mut s, &mut st, &OptimizerConfig::default(), 0.0).unwrap();
        }
        assert_eq!(s.value(id).item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate("g").is_ok());
        let bad = OptimizerConfig { beta2: 1.0, ..OptimizerConfig::default() };
        assert!(bad.validate("optimizer_g").unwrap_err().to_string().contains("optimizer_g.beta2"));
        assert!(OptimizerConfig { lr: 0.0, ..OptimizerConfig::default() }.validate("g").is_err());
    }

    #[test]
    fn two_phase_schedule() {
        let phases = [SchedulePhase { steps: 59_000, lr: 2e-4 }, SchedulePhase { steps: 118_000, lr: 2e-5 }];
        assert_eq!(scheduled_lr(&phases, 0), Some(2e-4));
        assert_eq!(scheduled_lr(&phases, 58_999), Some(2e-4));
        assert_eq!(scheduled_lr(&phases, 59_000), Some(2e-5));
        assert_eq!(scheduled_lr(&phases, 176_999), Some(2e-5));
        assert_eq!(scheduled_lr(&phases, 500_000), Some(2e-5));
        assert_eq!(scheduled_lr(&[], 3), None);
    }

    #[test]
    fn state_round_trip() {
        let (mut s, _) = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        set_grad(&mut s, 0.7);
        adam_step(&mut s, &mut st, &OptimizerConfig::default(), 0.1).unwrap();
        let named = st.to_named_tensors(&s);
        assert_eq!(AdamState::from_named_tensors(&s, &named, st.t).unwrap(), st);
    }
}
