//! Variational autoencoder compressing normalized door parameters into the
//! 8-dimensional environment latent.
//!
//! The encoder sees `input_gain * normalize(e)`. The gain raises the
//! reconstruction weight relative to the KL term; at gain 1 the per-coordinate
//! variance of a uniform [-1, 1] input (1/3) is below the break-even point of
//! a unit-weight squared error against a nat of KL, and the posterior
//! collapses to the prior.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::envdomain::{normalize, sample_env, EnvParams, ENV_DIM};
use crate::error::{invalid, Result};
use crate::neural::{
    kl_standard_normal, sigma_from_raw, sigma_from_raw_grad, squared_error, Activation, AdamState, Checkpoint,
    DenseLayerSpec, Mlp,
};

pub const LATENT_DIM: usize = 8;
pub const DEFAULT_INPUT_GAIN: f64 = 4.0;
const HIDDEN: usize = 16;
const DESCRIPTOR: &str = "vae/v1 encoder=16x16:tanh,16x16:tanh,16x16:identity decoder=8x16:tanh,16x16:tanh,16x16:identity";

fn encoder_layers() -> Vec<DenseLayerSpec> {
    vec![
        DenseLayerSpec { in_dim: ENV_DIM, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: 2 * LATENT_DIM, activation: Activation::Identity },
    ]
}

fn decoder_layers() -> Vec<DenseLayerSpec> {
    vec![
        DenseLayerSpec { in_dim: LATENT_DIM, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: ENV_DIM, activation: Activation::Identity },
    ]
}

/// Dense stack 16 -> 16 -> 16 -> (mu 8, raw sigma 8).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub mlp: Mlp,
}

/// Dense stack 8 -> 16 -> 16 -> 16.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub rec: f64,
    pub reg: f64,
}

/// Minimized objective `||e - e_hat||^2 + KL(N(mu, sigma^2) || N(0, I))`.
pub fn vae_loss(e: &[f64], e_hat: &[f64], mu: &[f64], sigma: &[f64]) -> Result<VaeLoss> {
    if e.len() != ENV_DIM || e_hat.len() != ENV_DIM || mu.len() != LATENT_DIM || sigma.len() != LATENT_DIM {
        return invalid("vae_loss expects dims 16/16/8/8");
    }
    let rec = squared_error(e, e_hat)?;
    let reg = kl_standard_normal(mu, sigma)?;
    Ok(VaeLoss { total: rec + reg, rec, reg })
}

/// Splits a raw encoder head into `(mu, sigma)`.
pub(crate) fn split_head(out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mu, raw) = out.split_at(LATENT_DIM);
    (mu.to_vec(), raw.iter().map(|&r| sigma_from_raw(r)).collect())
}

impl EncoderNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(encoder_layers(), 1.0, rng)? })
    }

    /// Forward pass on an already gained, normalized input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != ENV_DIM {
            return invalid(format!("encoder expects {ENV_DIM} inputs, got {}", x.len()));
        }
        Ok(split_head(&self.mlp.forward(x)?))
    }
}

impl DecoderNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(decoder_layers(), 1.0, rng)? })
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != LATENT_DIM {
            return invalid(format!("decoder expects {LATENT_DIM} inputs, got {}", z.len()));
        }
        self.mlp.forward(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub input_gain: f64,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(input_gain: f64, rng: &mut R) -> Result<Self> {
        if !(input_gain > 0.0 && input_gain.is_finite()) {
            return invalid("input gain must be positive");
        }
        Ok(Self { encoder: EncoderNet::new(rng)?, decoder: DecoderNet::new(rng)?, input_gain })
    }

    fn gained(&self, e_normalized: &[f64]) -> Vec<f64> {
        e_normalized.iter().map(|v| v * self.input_gain).collect()
    }

    /// `(mu, sigma)` for a normalized parameter vector.
    pub fn encode(&self, e_normalized: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if e_normalized.len() != ENV_DIM {
            return invalid(format!("encode expects {ENV_DIM} inputs, got {}", e_normalized.len()));
        }
        self.encoder.forward(&self.gained(e_normalized))
    }

    pub fn encode_env(&self, e: &EnvParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.encode(&normalize(e)?)
    }

    /// Reparameterized latent sample for one environment.
    pub fn sample_latent<R: Rng + ?Sized>(&self, e: &EnvParams, rng: &mut R) -> Result<LatentSample> {
        let (mu, sigma) = self.encode_env(e)?;
        let z = mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(LatentSample { z, mu, sigma })
    }

    /// Reconstruction in normalized units.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.forward(z)?.into_iter().map(|v| v / self.input_gain).collect())
    }

    /// Loss and parameter gradients for one sample with fixed noise `eps`.
    /// Gradients are added (scaled by `weight`) into both networks' buffers.
    pub fn accumulate_gradients(&mut self, e_normalized: &[f64], eps: &[f64], weight: f64) -> Result<VaeLoss> {
        let x = self.gained(e_normalized);
        let enc = self.encoder.mlp.forward_cached(&x)?;
        let head = enc.output();
        let (mu, sigma) = split_head(head);
        let z: Vec<f64> = (0..LATENT_DIM).map(|i| mu[i] + eps[i] * sigma[i]).collect();
        let dec = self.decoder.mlp.forward_cached(&z)?;
        let e_hat = dec.output();
        let loss = vae_loss(&x, e_hat, &mu, &sigma)?;

        let g_hat: Vec<f64> = e_hat.iter().zip(&x).map(|(h, t)| 2.0 * (h - t) * weight).collect();
        let gz = self.decoder.mlp.backward(&dec, &g_hat)?;
        let mut g_head = vec![0.0; 2 * LATENT_DIM];
        for i in 0..LATENT_DIM {
            g_head[i] = gz[i] + weight * mu[i];
            let g_sigma = gz[i] * eps[i] + weight * (sigma[i] - 1.0 / sigma[i]);
            g_head[LATENT_DIM + i] = g_sigma * sigma_from_raw_grad(head[LATENT_DIM + i]);
        }
        self.encoder.mlp.backward(&enc, &g_head)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(DESCRIPTOR);
        c.push("input_gain", &[self.input_gain]);
        c.push("encoder", &self.encoder.mlp.params.values);
        c.push("decoder", &self.decoder.mlp.params.values);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_descriptor(DESCRIPTOR)?;
        let gain = c.get("input_gain")?;
        if gain.len() != 1 || !(gain[0] > 0.0) {
            return invalid("checkpoint input_gain is malformed");
        }
        Ok(Self {
            encoder: EncoderNet { mlp: Mlp::from_params(encoder_layers(), c.get("encoder")?.to_vec())? },
            decoder: DecoderNet { mlp: Mlp::from_params(decoder_layers(), c.get("decoder")?.to_vec())? },
            input_gain: gain[0],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub samples: usize,
    pub holdout: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub input_gain: f64,
    pub ridge_lambda: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            holdout: 5_000,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            input_gain: DEFAULT_INPUT_GAIN,
            ridge_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeReport {
    pub curve: Vec<EpochStats>,
    /// Mean squared reconstruction error per normalized coordinate on the
    /// held-out set, decoding from the posterior mean.
    pub heldout_mse: f64,
    /// Per-coordinate R^2 of a ridge regression from mu to normalized e,
    /// fitted on training samples and scored on the held-out set.
    pub probe_r2: Vec<f64>,
}

impl VaeReport {
    pub fn mean_probe_r2(&self) -> f64 {
        self.probe_r2.iter().sum::<f64>() / self.probe_r2.len() as f64
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,total,rec,reg\n");
        for e in &self.curve {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.total, e.rec, e.reg));
        }
        s
    }
}

/// Draws `n` normalized parameter vectors.
pub fn sample_dataset<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<[f64; ENV_DIM]>> {
    (0..n).map(|_| normalize(&sample_env(rng))).collect()
}

/// Trains a VAE on freshly sampled domains. Deterministic in `seed`.
pub fn train_vae(config: &VaeConfig, seed: u64) -> Result<(Vae, VaeReport)> {
    if config.samples == 0 {
        return invalid("VAE dataset is empty");
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return invalid("batch size and epochs must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample_dataset(config.samples, &mut rng)?;
    let heldout = sample_dataset(config.holdout.max(1), &mut rng)?;
    let mut vae = Vae::new(config.input_gain, &mut rng)?;
    let mut enc_opt = AdamState::new(vae.encoder.mlp.param_count(), config.lr);
    let mut dec_opt = AdamState::new(vae.decoder.mlp.param_count(), config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut eps = [0.0; LATENT_DIM];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut rec, mut reg) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            vae.encoder.mlp.params.zero_grad();
            vae.decoder.mlp.params.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
                let l = vae.accumulate_gradients(&train[i], &eps, w)?;
                tot += l.total;
                rec += l.rec;
                reg += l.reg;
            }
            let Vae { encoder, decoder, .. } = &mut vae;
            enc_opt.step(&mut encoder.mlp.params.values, &encoder.mlp.params.gradient)?;
            dec_opt.step(&mut decoder.mlp.params.values, &decoder.mlp.params.gradient)?;
        }
        let n = train.len() as f64;
        curve.push(EpochStats { epoch, total: tot / n, rec: rec / n, reg: reg / n });
    }
    vae.encoder.mlp.params.zero_grad();
    vae.decoder.mlp.params.zero_grad();
    let heldout_mse = reconstruction_mse(&vae, &heldout)?;
    let probe_n = train.len().min(20_000);
    let probe_r2 = latent_probe_r2(&vae, &train[..probe_n], &heldout, config.ridge_lambda)?;
    Ok((vae, VaeReport { curve, heldout_mse, probe_r2 }))
}

/// Mean squared error per normalized coordinate, decoding from mu.
pub fn reconstruction_mse(vae: &Vae, data: &[[f64; ENV_DIM]]) -> Result<f64> {
    let mut sse = 0.0;
    for e in data {
        let (mu, _) = vae.encode(e)?;
        sse += squared_error(e, &vae.decode(&mu)?)?;
    }
    Ok(sse / (data.len() * ENV_DIM) as f64)
}

/// Ridge regression from the posterior mean to each normalized coordinate;
/// returns held-out R^2 per coordinate.
pub fn latent_probe_r2(vae: &Vae, fit: &[[f64; ENV_DIM]], test: &[[f64; ENV_DIM]], lambda: f64) -> Result<Vec<f64>> {
    let features = |data: &[[f64; ENV_DIM]]| -> Result<Vec<Vec<f64>>> {
        data.iter().map(|e| vae.encode(e).map(|(mu, _)| mu)).collect()
    };
    ridge_r2(&features(fit)?, fit, &features(test)?, test, lambda)
}

/// Fits `y ~ X b + c` by ridge regression (intercept unpenalized) and returns
/// held-out R^2 for each output column.
pub fn ridge_r2(
    x_fit: &[Vec<f64>],
    y_fit: &[[f64; ENV_DIM]],
    x_test: &[Vec<f64>],
    y_test: &[[f64; ENV_DIM]],
    lambda: f64,
) -> Result<Vec<f64>> {
    if x_fit.is_empty() || x_test.is_empty() || x_fit.len() != y_fit.len() || x_test.len() != y_test.len() {
        return invalid("ridge probe needs non-empty, aligned data");
    }
    let d = x_fit[0].len();
    let n = x_fit.len();
    let x_mean: Vec<f64> = (0..d).map(|j| x_fit.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let y_mean: Vec<f64> = (0..ENV_DIM).map(|j| y_fit.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let xm = DMatrix::from_fn(n, d, |i, j| x_fit[i][j] - x_mean[j]);
    let ym = DMatrix::from_fn(n, ENV_DIM, |i, j| y_fit[i][j] - y_mean[j]);
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * (lambda * n as f64);
    let rhs = xm.transpose() * ym;
    let beta = gram
        .cholesky()
        .ok_or_else(|| crate::Error::InvalidArgument("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let mut r2 = Vec::with_capacity(ENV_DIM);
    for j in 0..ENV_DIM {
        let test_mean = y_test.iter().map(|r| r[j]).sum::<f64>() / y_test.len() as f64;
        let (mut sse, mut sst) = (0.0, 0.0);
        for (xr, yr) in x_test.iter().zip(y_test) {
            let xc = DVector::from_iterator(d, xr.iter().zip(&x_mean).map(|(a, m)| a - m));
            let pred = y_mean[j] + xc.dot(&beta.column(j));
            sse += (yr[j] - pred).powi(2);
            sst += (yr[j] - test_mean).powi(2);
        }
        r2.push(if sst > 0.0 { 1.0 - sse / sst } else { 0.0 });
    }
    Ok(r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdomain::mean_env;
    use crate::neural::gradcheck::{max_rel_error, numeric_grad};

    #[test]
    fn loss_identities() {
        let e = [0.2; ENV_DIM];
        let l = vae_loss(&e, &e, &[0.0; 8], &[1.0; 8]).unwrap();
        assert_eq!((l.total, l.rec, l.reg), (0.0, 0.0, 0.0));
        let l = vae_loss(&e, &e, &[1.0; 8], &[1.0; 8]).unwrap();
        assert!((l.reg - 4.0).abs() < 1e-15);
        let mut e_hat = e;
        e_hat[3] += 0.1;
        let l = vae_loss(&e, &e_hat, &[0.0; 8], &[1.0; 8]).unwrap();
        assert!((l.total - 0.01).abs() < 1e-15);
        assert!(vae_loss(&e, &e, &[0.0; 8], &[0.0; 8]).is_err());
        assert!(vae_loss(&e[..15], &e, &[0.0; 8], &[1.0; 8]).is_err());
    }

    #[test]
    fn encoder_outputs_have_latent_shape_and_positive_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vae = Vae::new(DEFAULT_INPUT_GAIN, &mut rng).unwrap();
        for _ in 0..10_000 {
            let (mu, sigma) = vae.encode_env(&sample_env(&mut rng)).unwrap();
            assert_eq!((mu.len(), sigma.len()), (LATENT_DIM, LATENT_DIM));
            assert!(sigma.iter().all(|s| *s > 0.0));
        }
        assert!(vae.encode(&[0.0; 15]).is_err());
    }

    #[test]
    fn fixed_weights_give_fixed_output() {
        // Zero weights: every hidden unit is tanh(bias); mu = bias, sigma = softplus(bias) + 1e-6.
        let mut vae = Vae::new(1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        vae.encoder.mlp.params.values.iter_mut().for_each(|v| *v = 0.0);
        let n = vae.encoder.mlp.param_count();
        vae.encoder.mlp.params.values[n - 16..].copy_from_slice(&[
            0.5, -0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        let (mu, sigma) = vae.encode(&normalize(&mean_env()).unwrap()).unwrap();
        assert_eq!(mu, vec![0.5, -0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let expected = 2f64.ln() + 1e-6;
        assert!(sigma.iter().all(|s| (s - expected).abs() < 1e-15));
    }

    #[test]
    fn sample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vae = Vae::new(2.0, &mut rng).unwrap();
        let e = normalize(&sample_env(&mut rng)).unwrap();
        let eps: Vec<f64> = (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
        vae.accumulate_gradients(&e, &eps, 1.0).unwrap();
        let loss_with = |enc: &[f64], dec: &[f64]| {
            let mut v = vae.clone();
            v.encoder.mlp.params.values = enc.to_vec();
            v.decoder.mlp.params.values = dec.to_vec();
            v.encoder.mlp.params.zero_grad();
            v.accumulate_gradients(&e, &eps, 1.0).unwrap().total
        };
        let enc = vae.encoder.mlp.params.values.clone();
        let dec = vae.decoder.mlp.params.values.clone();
        let n_enc = numeric_grad(&mut |p| loss_with(p, &dec), &enc, 1e-5);
        let n_dec = numeric_grad(&mut |p| loss_with(&enc, p), &dec, 1e-5);
        assert!(max_rel_error(&vae.encoder.mlp.params.gradient, &n_enc) < 1e-4);
        assert!(max_rel_error(&vae.decoder.mlp.params.gradient, &n_dec) < 1e-4);
    }

    #[test]
    fn short_training_is_deterministic_and_decreasing() {
        let config = VaeConfig { samples: 2_000, holdout: 500, epochs: 8, batch_size: 64, ..VaeConfig::default() };
        let (a, ra) = train_vae(&config, 3).unwrap();
        let (b, _) = train_vae(&config, 3).unwrap();
        assert_eq!(a, b);
        assert!(ra.curve.last().unwrap().total < ra.curve[0].total);
        assert!(ra.heldout_mse.is_finite());
        let back = Vae::from_checkpoint(&Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut xs = vec![];
        let mut ys = vec![];
        for _ in 0..400 {
            let x: Vec<f64> = (0..ENV_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = [0.0; ENV_DIM];
            for j in 0..ENV_DIM {
                y[j] = 2.0 * x[j] - 0.5;
            }
            xs.push(x);
            ys.push(y);
        }
        let r2 = ridge_r2(&xs[..300], &ys[..300], &xs[300..], &ys[300..], 1e-9).unwrap();
        assert!(r2.iter().all(|r| *r > 1.0 - 1e-9));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let config = VaeConfig { samples: 0, ..VaeConfig::default() };
        assert!(train_vae(&config, 0).is_err());
    }
}
