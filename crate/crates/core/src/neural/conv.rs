use crate::error::{invalid, Result};

/// Valid (unpadded) strided 1-D cross-correlation. Sequences are stored
/// channel-major: `x[c * len + t]`. Parameters are the
/// `out_channels x in_channels x kernel` weights followed by `out_channels`
/// biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv1DLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1DLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return invalid("conv1d parameters must be positive");
        }
        Ok(Self { in_channels, out_channels, kernel, stride })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        if input_len < self.kernel {
            return invalid(format!("sequence length {input_len} shorter than kernel {}", self.kernel));
        }
        Ok((input_len - self.kernel) / self.stride + 1)
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<usize> {
        if params.len() != self.param_count() {
            return invalid(format!("conv1d expects {} params, got {}", self.param_count(), params.len()));
        }
        if input.len() % self.in_channels != 0 {
            return invalid("conv1d input length is not a multiple of in_channels");
        }
        self.output_len(input.len() / self.in_channels)
    }
}

/// Returns the output feature map (channel-major) and its length.
pub fn conv1d_forward(spec: &Conv1DLayerSpec, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, usize)> {
    let out_len = spec.check(params, input)?;
    let in_len = input.len() / spec.in_channels;
    let (w, b) = params.split_at(spec.out_channels * spec.in_channels * spec.kernel);
    let mut out = vec![0.0; spec.out_channels * out_len];
    for oc in 0..spec.out_channels {
        let dst = &mut out[oc * out_len..(oc + 1) * out_len];
        dst.iter_mut().for_each(|v| *v = b[oc]);
        for ic in 0..spec.in_channels {
            let kw = &w[(oc * spec.in_channels + ic) * spec.kernel..][..spec.kernel];
            let src = &input[ic * in_len..(ic + 1) * in_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let start = t * spec.stride;
                *d += kw.iter().zip(&src[start..start + spec.kernel]).map(|(a, x)| a * x).sum::<f64>();
            }
        }
    }
    Ok((out, out_len))
}

/// Input gradient of the convolution; parameter gradients are accumulated
/// into `param_grad` when supplied.
pub fn conv1d_backward(
    spec: &Conv1DLayerSpec,
    params: &[f64],
    input: &[f64],
    grad_output: &[f64],
    mut param_grad: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    let out_len = spec.check(params, input)?;
    if grad_output.len() != spec.out_channels * out_len {
        return invalid("conv1d backward output shape mismatch");
    }
    if let Some(g) = &param_grad {
        if g.len() != spec.param_count() {
            return invalid("conv1d backward gradient buffer shape mismatch");
        }
    }
    let in_len = input.len() / spec.in_channels;
    let n_w = spec.out_channels * spec.in_channels * spec.kernel;
    let w = &params[..n_w];
    let mut grad_in = vec![0.0; input.len()];
    for oc in 0..spec.out_channels {
        let go = &grad_output[oc * out_len..(oc + 1) * out_len];
        if let Some(pg) = param_grad.as_deref_mut() {
            pg[n_w + oc] += go.iter().sum::<f64>();
        }
        for ic in 0..spec.in_channels {
            let base = (oc * spec.in_channels + ic) * spec.kernel;
            let kw = &w[base..base + spec.kernel];
            let src = &input[ic * in_len..(ic + 1) * in_len];
            let gi = &mut grad_in[ic * in_len..(ic + 1) * in_len];
            for (t, &g) in go.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let start = t * spec.stride;
                for k in 0..spec.kernel {
                    gi[start + k] += g * kw[k];
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                let gk = &mut pg[base..base + spec.kernel];
                for (t, &g) in go.iter().enumerate() {
                    let start = t * spec.stride;
                    for k in 0..spec.kernel {
                        gk[k] += g * src[start + k];
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
