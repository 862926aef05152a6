use rand::Rng;

use super::dense::{dense_backward_into, dense_forward_into, DenseLayerSpec};
use super::init::orthogonal;
use super::tensor::TensorBuffer;
use crate::error::{invalid, Result};

/// A chain of dense layers sharing one flat parameter buffer, laid out layer
/// by layer in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayerSpec>,
    offsets: Vec<usize>,
    pub params: TensorBuffer,
}

/// Per-layer activations from a forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// Orthogonal weights with each layer's activation gain, the final layer
    /// scaled by `output_gain`, and zero biases.
    pub fn new<R: Rng + ?Sized>(layers: Vec<DenseLayerSpec>, output_gain: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(layers)?;
        let last = mlp.layers.len() - 1;
        for (i, spec) in mlp.layers.iter().enumerate() {
            let gain = if i == last { output_gain } else { spec.activation.init_gain() };
            let w = orthogonal(spec.out_dim, spec.in_dim, gain, rng);
            mlp.params.values[mlp.offsets[i]..mlp.offsets[i] + w.len()].copy_from_slice(&w);
        }
        Ok(mlp)
    }

    pub fn zeros(layers: Vec<DenseLayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("mlp needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return invalid(format!("layer output {} does not feed input {}", pair[0].out_dim, pair[1].in_dim));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for spec in &layers {
            offsets.push(total);
            total += spec.param_count();
        }
        offsets.push(total);
        Ok(Self { layers, offsets, params: TensorBuffer::zeros(&[total]) })
    }

    pub fn from_params(layers: Vec<DenseLayerSpec>, values: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(layers)?;
        if values.len() != mlp.param_count() {
            return invalid(format!("mlp expects {} params, got {}", mlp.param_count(), values.len()));
        }
        mlp.params.values = values;
        Ok(mlp)
    }

    pub fn layers(&self) -> &[DenseLayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameters of layer `i` (weights then biases).
    pub fn layer_params(&self, i: usize) -> &[f64] {
        &self.params.values[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Compact architecture string, e.g. `16x16:tanh,16x8:identity`.
    pub fn descriptor(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}x{}:{}", l.in_dim, l.out_dim, l.activation.name()))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.activations.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<MlpCache> {
        if input.len() != self.in_dim() {
            return invalid(format!("mlp expects input of {}, got {}", self.in_dim(), input.len()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (i, spec) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; spec.out_dim];
            dense_forward_into(spec, self.layer_params(i), &activations[i], &mut out);
            activations.push(out);
        }
        Ok(MlpCache { activations })
    }

    /// Accumulates parameter gradients into `self.params.gradient` and returns
    /// the input gradient.
    pub fn backward(&mut self, cache: &MlpCache, grad_output: &[f64]) -> Result<Vec<f64>> {
        let Self { layers, offsets, params } = self;
        backprop(layers, offsets, &params.values, Some(&mut params.gradient), cache, grad_output)
    }

    /// Input gradient only; parameters and their gradient buffer are untouched.
    pub fn input_gradient(&self, cache: &MlpCache, grad_output: &[f64]) -> Result<Vec<f64>> {
        backprop(&self.layers, &self.offsets, &self.params.values, None, cache, grad_output)
    }
}

fn backprop(
    layers: &[DenseLayerSpec],
    offsets: &[usize],
    values: &[f64],
    mut grads: Option<&mut Vec<f64>>,
    cache: &MlpCache,
    grad_output: &[f64],
) -> Result<Vec<f64>> {
    if cache.activations.len() != layers.len() + 1 {
        return invalid("cache does not match this network");
    }
    if grad_output.len() != layers[layers.len() - 1].out_dim {
        return invalid("output gradient has the wrong length");
    }
    let mut g = grad_output.to_vec();
    for i in (0..layers.len()).rev() {
        let spec = &layers[i];
        let mut gin = vec![0.0; spec.in_dim];
        let p = &values[offsets[i]..offsets[i + 1]];
        let pg = grads.as_deref_mut().map(|gr| &mut gr[offsets[i]..offsets[i + 1]]);
        dense_backward_into(spec, p, &cache.activations[i], &cache.activations[i + 1], &g, pg, &mut gin);
        g = gin;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::dense::Activation;
    use crate::neural::gradcheck::{max_rel_error, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(rng: &mut ChaCha8Rng) -> Mlp {
        Mlp::new(
            vec![
                DenseLayerSpec::new(5, 7, Activation::Tanh).unwrap(),
                DenseLayerSpec::new(7, 6, Activation::Softplus).unwrap(),
                DenseLayerSpec::new(6, 3, Activation::Identity).unwrap(),
            ],
            0.5,
            rng,
        )
        .unwrap()
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let layers = vec![
            DenseLayerSpec::new(2, 3, Activation::Tanh).unwrap(),
            DenseLayerSpec::new(4, 1, Activation::Tanh).unwrap(),
        ];
        assert!(Mlp::zeros(layers).is_err());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let mut mlp = net(&mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = [0.3, -1.1, 0.8];
            let cache = mlp.forward_cached(&x).unwrap();
            let gx = mlp.backward(&cache, &c).unwrap();
            assert_eq!(gx, mlp.input_gradient(&cache, &c).unwrap());
            let layers = mlp.layers().to_vec();
            let dot = |y: Vec<f64>| y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
            let num_p = numeric_grad(
                &mut |p| dot(Mlp::from_params(layers.clone(), p.to_vec()).unwrap().forward(&x).unwrap()),
                &mlp.params.values,
                1e-5,
            );
            let num_x = numeric_grad(&mut |xx| dot(mlp.forward(xx).unwrap()), &x, 1e-5);
            assert!(max_rel_error(&mlp.params.gradient, &num_p) < 1e-4);
            assert!(max_rel_error(&gx, &num_x) < 1e-4);
        }
    }

    #[test]
    fn input_gradient_leaves_buffers_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = net(&mut rng);
        let before = mlp.clone();
        let cache = mlp.forward_cached(&[0.1; 5]).unwrap();
        mlp.input_gradient(&cache, &[1.0; 3]).unwrap();
        assert_eq!(mlp, before);
    }
}
