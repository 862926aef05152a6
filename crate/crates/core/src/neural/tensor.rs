use crate::error::{invalid, Result};

/// Flat parameter storage with a gradient accumulator of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuffer {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl TensorBuffer {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n], gradient: vec![0.0; n] }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return invalid(format!("shape {shape:?} needs {n} values, got {}", values.len()));
        }
        let gradient = vec![0.0; n];
        Ok(Self { shape: shape.to_vec(), values, gradient })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.gradient.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale_grad(&mut self, factor: f64) {
        self.gradient.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn grad_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales the gradient so its L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grad(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_matches_shape() {
        let t = TensorBuffer::zeros(&[3, 4]);
        assert_eq!(t.len(), 12);
        assert_eq!(t.gradient.len(), 12);
        assert!(TensorBuffer::from_values(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn clip_grad_norm_caps_length() {
        let mut t = TensorBuffer::zeros(&[2]);
        t.gradient = vec![3.0, 4.0];
        assert_eq!(t.clip_grad_norm(1.0), 5.0);
        assert!((t.grad_norm() - 1.0).abs() < 1e-12);
    }
}
