use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            // y = ln(1 + e^x)  =>  sigmoid(x) = 1 - e^{-y}
            Activation::Softplus => -(-y).exp_m1(),
        }
    }

    /// Orthogonal-init gain for a layer followed by this activation.
    pub fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            "softplus" => Activation::Softplus,
            other => return invalid(format!("unknown activation {other:?}")),
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer. Parameters are laid out as the row-major
/// `out_dim x in_dim` weight matrix followed by `out_dim` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DenseLayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl DenseLayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return invalid("dense layer dimensions must be positive");
        }
        Ok(Self { in_dim, out_dim, activation })
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return invalid(format!(
                "dense {}x{} expects {} params, got {}",
                self.out_dim,
                self.in_dim,
                self.param_count(),
                params.len()
            ));
        }
        if input.len() != self.in_dim {
            return invalid(format!("dense expects input of {}, got {}", self.in_dim, input.len()));
        }
        Ok(())
    }
}

pub fn dense_forward(spec: &DenseLayerSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.check(params, input)?;
    let mut out = vec![0.0; spec.out_dim];
    dense_forward_into(spec, params, input, &mut out);
    Ok(out)
}

pub(crate) fn dense_forward_into(spec: &DenseLayerSpec, params: &[f64], input: &[f64], out: &mut [f64]) {
    let (w, b) = params.split_at(spec.out_dim * spec.in_dim);
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(spec.in_dim).zip(b)) {
        let pre = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + bias;
        *o = spec.activation.apply(pre);
    }
}

/// Backpropagates `grad_output` (dL/d output) through one layer given the
/// forward `input` and `output`. Parameter gradients are added into
/// `param_grad` when supplied; the input gradient is returned.
pub fn dense_backward(
    spec: &DenseLayerSpec,
    params: &[f64],
    input: &[f64],
    output: &[f64],
    grad_output: &[f64],
    param_grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    spec.check(params, input)?;
    if output.len() != spec.out_dim || grad_output.len() != spec.out_dim {
        return invalid("dense backward output shape mismatch");
    }
    if let Some(g) = &param_grad {
        if g.len() != spec.param_count() {
            return invalid("dense backward gradient buffer shape mismatch");
        }
    }
    let mut grad_in = vec![0.0; spec.in_dim];
    dense_backward_into(spec, params, input, output, grad_output, param_grad, &mut grad_in);
    Ok(grad_in)
}

pub(crate) fn dense_backward_into(
    spec: &DenseLayerSpec,
    params: &[f64],
    input: &[f64],
    output: &[f64],
    grad_output: &[f64],
    param_grad: Option<&mut [f64]>,
    grad_in: &mut [f64],
) {
    let n_w = spec.out_dim * spec.in_dim;
    let w = &params[..n_w];
    grad_in.iter_mut().for_each(|g| *g = 0.0);
    match param_grad {
        Some(pg) => {
            let (gw, gb) = pg.split_at_mut(n_w);
            for o in 0..spec.out_dim {
                let d = grad_output[o] * spec.activation.derivative_from_output(output[o]);
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                let grow = &mut gw[o * spec.in_dim..(o + 1) * spec.in_dim];
                for i in 0..spec.in_dim {
                    grow[i] += d * input[i];
                    grad_in[i] += d * row[i];
                }
            }
        }
        None => {
            for o in 0..spec.out_dim {
                let d = grad_output[o] * spec.activation.derivative_from_output(output[o]);
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * spec.in_dim..(o + 1) * spec.in_dim];
                for i in 0..spec.in_dim {
                    grad_in[i] += d * row[i];
                }
            }
        }
    }
}
