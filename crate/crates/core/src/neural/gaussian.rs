use std::f64::consts::PI;

use super::dense::{sigmoid, softplus};
use crate::error::{invalid, Result};

/// Added to softplus outputs so that standard deviations stay strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

pub fn sigma_from_raw_grad(raw: f64) -> f64 {
    sigmoid(raw)
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return invalid("standard deviations must be strictly positive");
    }
    Ok(())
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return invalid(format!("{what}: length {a} vs {b}"));
    }
    Ok(())
}

/// Reparameterized sample `mu + eps * sigma`.
pub fn gaussian_sample(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_len(mu.len(), sigma.len(), "gaussian_sample sigma")?;
    check_len(mu.len(), eps.len(), "gaussian_sample eps")?;
    check_sigma(sigma)?;
    Ok(mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + e * s).collect())
}

/// Sum over dimensions of `log N(x; mu, sigma^2)`.
pub fn gaussian_log_prob(mu: &[f64], sigma: &[f64], x: &[f64]) -> Result<f64> {
    check_len(mu.len(), sigma.len(), "gaussian_log_prob sigma")?;
    check_len(mu.len(), x.len(), "gaussian_log_prob x")?;
    check_sigma(sigma)?;
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(x)
        .map(|((m, s), x)| {
            let u = (x - m) / s;
            -0.5 * u * u - s.ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum())
}

/// Gradients of [`gaussian_log_prob`] with respect to `mu` and `sigma`.
pub fn gaussian_log_prob_grad(mu: &[f64], sigma: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    gaussian_log_prob(mu, sigma, x)?;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dsigma = Vec::with_capacity(mu.len());
    for ((m, s), x) in mu.iter().zip(sigma).zip(x) {
        let d = x - m;
        dmu.push(d / (s * s));
        dsigma.push(d * d / (s * s * s) - 1.0 / s);
    }
    Ok((dmu, dsigma))
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(sigma: &[f64]) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(sigma.iter().map(|s| 0.5 + 0.5 * (2.0 * PI).ln() + s.ln()).sum())
}

/// `0.5 * sum(mu^2 + sigma^2 - ln sigma^2 - 1)`, the KL divergence from
/// `N(mu, sigma^2)` to the standard normal.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_len(mu.len(), sigma.len(), "kl sigma")?;
    check_sigma(sigma)?;
    Ok(0.5 * mu.iter().zip(sigma).map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0).sum::<f64>())
}

pub fn kl_standard_normal_grad(mu: &[f64], sigma: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    kl_standard_normal(mu, sigma)?;
    Ok((mu.to_vec(), sigma.iter().map(|s| s - 1.0 / s).collect()))
}

/// `||a - b||^2`.
pub fn squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "squared_error")?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{max_rel_error, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_noise_returns_mean() {
        let mu = [0.3, -2.0];
        assert_eq!(gaussian_sample(&mu, &[1.0, 5.0], &[0.0, 0.0]).unwrap(), mu.to_vec());
        let z = gaussian_sample(&mu, &[1e-300, 1e-300], &[3.0, -3.0]).unwrap();
        assert!((z[0] - mu[0]).abs() < 1e-12 && (z[1] - mu[1]).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        assert!(gaussian_sample(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(gaussian_log_prob(&[0.0], &[-1.0], &[0.0]).is_err());
        assert!(kl_standard_normal(&[0.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| gaussian_sample(&[0.0], &[1.0], &[rng.sample(StandardNormal)]).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn log_prob_identities() {
        let peak = gaussian_log_prob(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((peak + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((peak + 0.9189).abs() < 1e-4);
        let a = gaussian_log_prob(&[1.0, -1.0], &[0.5, 2.0], &[1.3, -1.7]).unwrap();
        let b = gaussian_log_prob(&[1.0, -1.0], &[0.5, 2.0], &[0.7, -0.3]).unwrap();
        assert!((a - b).abs() < 1e-12);
        let (dmu, _) = gaussian_log_prob_grad(&[0.4, 2.0], &[0.3, 1.1], &[0.4, 2.0]).unwrap();
        assert_eq!(dmu, vec![0.0, 0.0]);
    }

    #[test]
    fn kl_vanishes_at_standard_normal() {
        assert_eq!(kl_standard_normal(&[0.0; 8], &[1.0; 8]).unwrap(), 0.0);
        assert!((kl_standard_normal(&[1.0; 8], &[1.0; 8]).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(1..6);
            let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (dmu, dsig) = gaussian_log_prob_grad(&mu, &sigma, &x).unwrap();
            let nmu = numeric_grad(&mut |m| gaussian_log_prob(m, &sigma, &x).unwrap(), &mu, 1e-5);
            let nsig = numeric_grad(&mut |s| gaussian_log_prob(&mu, s, &x).unwrap(), &sigma, 1e-5);
            assert!(max_rel_error(&dmu, &nmu) < 1e-4);
            assert!(max_rel_error(&dsig, &nsig) < 1e-4);
            let (kmu, ksig) = kl_standard_normal_grad(&mu, &sigma).unwrap();
            let nkmu = numeric_grad(&mut |m| kl_standard_normal(m, &sigma).unwrap(), &mu, 1e-5);
            let nksig = numeric_grad(&mut |s| kl_standard_normal(&mu, s).unwrap(), &sigma, 1e-5);
            assert!(max_rel_error(&kmu, &nkmu) < 1e-4);
            assert!(max_rel_error(&ksig, &nksig) < 1e-4);
            let raw = rng.random_range(-5.0..5.0);
            let n = (sigma_from_raw(raw + 1e-5) - sigma_from_raw(raw - 1e-5)) / 2e-5;
            assert!(max_rel_error(&[sigma_from_raw_grad(raw)], &[n]) < 1e-4);
        }
    }
}
