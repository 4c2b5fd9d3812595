use alloc::vec;
use alloc::vec::Vec;

use super::Parameter;
use crate::error::{Error, Result};

/// Adam moments for one parameter group, aligned by position with the
/// parameter slice passed to [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// DCGAN-conventional betas (0.5, 0.999).
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_betas(learning_rate, 0.5, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let ok = learning_rate > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0;
        if !ok {
            return Err(Error::Config(alloc::format!(
                "adam: lr={learning_rate} beta1={beta1} beta2={beta2} eps={epsilon}"
            )));
        }
        Ok(Self {
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }
}

/// One bias-corrected Adam update over `params`, then zeroes their grads.
///
/// Fails before touching anything if a parameter has never received a
/// gradient.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
        return Err(Error::MissingGrad(p.name().into()));
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.values().len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::Config(alloc::format!(
            "adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        if m.len() != p.values().len() {
            return Err(Error::ParamMismatch {
                name: p.name().into(),
                expected: m.len(),
                actual: p.values().len(),
            });
        }
        let grad = p.grad().expect("checked above").to_vec();
        let lr = state.learning_rate;
        let eps = state.epsilon;
        for (j, w) in p.values_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        p.tensor_mut().zero_grad();
    }
    Ok(())
}
