use serde::{Deserialize, Serialize};

use super::NnError;

/// Adam hyperparameters. The defaults keep the first-moment decay at 0.1,
/// as configured for the federated experiments; 0.9 is the textbook value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.1,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Invalid(format!("invalid Adam config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(NnError::Shape {
            context: "adam_step".into(),
            expected: params.len(),
            found: grad.len().min(state.m.len()),
        });
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3, AdamConfig::default());
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, -0.7, 42.0] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1, AdamConfig::default());
            adam_step(&mut p, &[g], &mut s).unwrap();
            assert!((p[0].abs() - 1e-3).abs() < 1e-7, "{}", p[0]);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let g = 0.5;
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = vec![1.0];
        let mut s = AdamState::new(1, cfg);
        adam_step(&mut p, &[g], &mut s).unwrap();
        adam_step(&mut p, &[g], &mut s).unwrap();
        assert!((p[0] - w).abs() < 1e-15);
    }

    #[test]
    fn size_mismatch() {
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s).is_err());
    }
}
