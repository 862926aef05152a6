use super::tensor::TensorBuffer;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid(format!(
                "adam state holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// One Adam state per parameter buffer, stepped together.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdam {
    pub states: Vec<AdamState>,
}

impl GroupAdam {
    pub fn new(buffers: &[&TensorBuffer], lr: f64) -> Self {
        Self { states: buffers.iter().map(|b| AdamState::new(b.len(), lr)).collect() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    pub fn step(&mut self, buffers: &mut [&mut TensorBuffer]) -> Result<()> {
        if buffers.len() != self.states.len() {
            return invalid(format!("{} optimizer groups for {} buffers", self.states.len(), buffers.len()));
        }
        for (s, b) in self.states.iter_mut().zip(buffers.iter_mut()) {
            s.step(&mut b.values, &b.gradient)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_grad_norm(buffers: &mut [&mut TensorBuffer], max_norm: f64) -> f64 {
    let norm = buffers.iter().map(|b| b.gradient.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        buffers.iter_mut().for_each(|b| b.scale_grad(f));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2  =>  update = lr * |g| / (|g| + eps)
        for g in [1e-2, 0.7, -3.0, 250.0] {
            let mut s = AdamState::new(1, 1e-3);
            let mut p = vec![0.0];
            s.step(&mut p, &[g]).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut s = AdamState::new(2, 1e-2);
            let mut p = vec![0.3, -0.1];
            for i in 0..50 {
                let g = [p[0] * 2.0 + i as f64 * 0.01, (p[1] - 1.0).sin()];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = AdamState::new(2, 1e-3);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
