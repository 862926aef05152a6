//! Small hand-rolled differentiable layers shared by the encoder, policy and
//! adaptation networks. Everything is `f64` and single-sample; minibatches are
//! handled by looping and accumulating gradients.

mod adam;
mod checkpoint;
mod conv;
mod dense;
mod gaussian;
mod init;
mod mlp;
mod tensor;

pub use adam::{adam_step, clip_global_grad_norm, AdamState, GroupAdam};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv1d_backward, conv1d_forward, Conv1DLayerSpec};
pub use dense::{dense_backward, dense_forward, sigmoid, softplus, Activation, DenseLayerSpec};
pub use gaussian::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grad, gaussian_sample,
    kl_standard_normal, kl_standard_normal_grad, sigma_from_raw, sigma_from_raw_grad,
    squared_error, SIGMA_FLOOR,
};
pub use init::orthogonal;
pub use mlp::{Mlp, MlpCache};
pub use tensor::TensorBuffer;

/// FNV-1a over the bit patterns of a parameter vector. Used to assert that a
/// network was not modified.
pub fn checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Finite-difference helpers for verifying analytic gradients.
pub mod gradcheck {
    /// Central finite differences of a scalar function.
    pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    /// Relative error; the denominator is floored at 1e-3 because central
    /// differences at h = 1e-5 carry ~1e-10 absolute noise.
    pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }
}
