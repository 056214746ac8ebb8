use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// Named parameter collection with a monotone version counter.
///
/// Snapshots are immutable once published; the optimizer produces a new set.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Adam moment estimates plus hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update. Returns the updated parameters;
/// `state` is advanced in place and the version counter incremented.
pub fn adam_step(
    params: &ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<ParameterSet> {
    for name in grads.keys() {
        if params.get(name).is_none() {
            return Err(NumericsError::Config(format!(
                "gradient for unknown parameter '{name}'"
            )));
        }
    }
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(NumericsError::Config(format!(
                "missing gradient for parameter '{name}'"
            )));
        }
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(NumericsError::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = params.clone();
    for (name, g) in grads {
        let p = out.get_mut(name).unwrap();
        if g.shape() != p.shape() {
            return Err(NumericsError::Shape(format!(
                "gradient shape {:?} != parameter shape {:?} for '{name}'",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for i in 0..g.len() {
            let gi = g.data()[i];
            m.data_mut()[i] = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            v.data_mut()[i] = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            let mh = m.data()[i] / bc1;
            let vh = v.data()[i] / bc2;
            p.data_mut()[i] -= state.lr * mh / (vh.sqrt() + state.epsilon);
        }
    }
    out.version = params.version + 1;
    Ok(out)
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(
    grads: &BTreeMap<String, Tensor>,
    max_norm: f64,
) -> BTreeMap<String, Tensor> {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total <= max_norm {
        return grads.clone();
    }
    let scale = max_norm / total;
    grads
        .iter()
        .map(|(k, g)| (k.clone(), g.map(|v| v * scale)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_adam_step_closed_form() {
        let params = single_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let mut state = AdamState::new(3e-4, 0.9, 0.999, 1e-7);
        let out = adam_step(&params, &grads, &mut state).unwrap();
        // first step: m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        let expected = -3e-4 / (1.0 + 1e-7);
        assert!((out.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(out.version(), 1);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let params = single_param(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        let mut state = AdamState::new(3e-4, 0.9, 0.999, 1e-7);
        let out = adam_step(&params, &grads, &mut state).unwrap();
        assert_eq!(out.get("w").unwrap().item(), 0.5);
        assert_eq!(out.version(), 1);
    }

    #[test]
    fn nan_grad_is_rejected_with_name() {
        let params = single_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        let mut state = AdamState::new(3e-4, 0.9, 0.999, 1e-7);
        let err = adam_step(&params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite(ref n) if n == "w"));
    }

    #[test]
    fn missing_and_extra_grad_keys_are_config_errors() {
        let params = single_param(0.0);
        let mut state = AdamState::new(3e-4, 0.9, 0.999, 1e-7);
        let empty = BTreeMap::new();
        assert!(matches!(
            adam_step(&params, &empty, &mut state),
            Err(NumericsError::Config(_))
        ));
        let mut extra = BTreeMap::new();
        extra.insert("w".to_string(), Tensor::scalar(0.0));
        extra.insert("bogus".to_string(), Tensor::scalar(0.0));
        assert!(matches!(
            adam_step(&params, &extra, &mut state),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn adam_deterministic_and_shape_preserving() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![2, 2], vec![1., -2., 3., 0.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![2, 2], vec![0.1, -0.3, 0.2, 0.0]).unwrap(),
        );
        let mut s1 = AdamState::new(1e-3, 0.9, 0.999, 1e-7);
        let mut s2 = AdamState::new(1e-3, 0.9, 0.999, 1e-7);
        let a = adam_step(&params, &grads, &mut s1).unwrap();
        let b = adam_step(&params, &grads, &mut s2).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
        assert_eq!(a.get("w").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn clip_scales_when_over_threshold() {
        let mut grads = BTreeMap::new();
        // two tensors with global norm 80
        grads.insert("a".to_string(), Tensor::from_vec(vec![48.0]));
        grads.insert("b".to_string(), Tensor::from_vec(vec![64.0]));
        let clipped = clip_global_norm(&grads, 40.0);
        assert!((clipped["a"].item() - 24.0).abs() < 1e-12);
        assert!((clipped["b"].item() - 32.0).abs() < 1e-12);
        // under threshold: identity
        let same = clip_global_norm(&clipped, 40.0);
        assert_eq!(same["a"], clipped["a"]);
        // idempotence
        let twice = clip_global_norm(&clip_global_norm(&grads, 40.0), 40.0);
        assert_eq!(twice["a"], clipped["a"]);
        assert_eq!(twice["b"], clipped["b"]);
        // all-zero stays zero
        let mut zeros = BTreeMap::new();
        zeros.insert("z".to_string(), Tensor::zeros(&[3]));
        let z = clip_global_norm(&zeros, 40.0);
        assert_eq!(z["z"], Tensor::zeros(&[3]));
    }
}
