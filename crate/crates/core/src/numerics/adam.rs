use super::paramstore::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter with
/// `requires_grad`, then zeroes all gradients. `step` is 1-based.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("adam: step must be >= 1".into()));
    }
    if state.first.len() != store.len() {
        return Err(Error::InvalidArgument(
            "adam: state does not match parameter store".into(),
        ));
    }
    for id in 0..store.len() {
        if store.get(id).grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(store.name(id).to_string()));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (id, t) in store.tensors_mut().iter_mut().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let m = &mut state.first[id];
        let v = &mut state.second[id];
        for i in 0..t.values.len() {
            let g = t.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            t.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.step = step;
    store.zero_grad();
    Ok(())
}
