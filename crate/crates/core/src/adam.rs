//! ADAM with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates `params` in place. Nothing is modified when an error is
    /// returned.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid(format!(
                "ADAM state has {} entries, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient entry {i} at ADAM step {}",
                self.t + 1
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grads: &[f64], lr: f64) -> Result<(Vec<f64>, AdamState)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, grads, lr)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_first_step() {
        let s = AdamState::new(3);
        let (p, s) = adam_step(&s, &[1.0, -2.0, 3.0], &[0.0; 3], 0.001).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + ε).
        let (p, _) = adam_step(&AdamState::new(1), &[0.5], &[1.0], 0.001).unwrap();
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((0.5 - p[0] - 0.001).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_leaves_state() {
        let mut s = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        let err = s.step(&mut p, &[1.0, f64::NAN], 0.1).unwrap_err();
        assert!(err.to_string().contains("step 1"));
        assert_eq!(s, AdamState::new(2));
        assert_eq!(p, vec![1.0, 1.0]);
        assert!(s.step(&mut p, &[1.0], 0.1).is_err());
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = AdamState::new(4);
            let mut p = vec![0.1, 0.2, 0.3, 0.4];
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64).sin() + 0.01).collect();
                s.step(&mut p, &g, 0.01).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
