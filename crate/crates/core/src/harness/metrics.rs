use crate::error::{invalid, Result};

/// Nearest-rank percentile: the sorted sample at 1-based rank `ceil(p/100 * N)`,
/// with rank 0 mapped to the minimum.
pub fn percentile(data: &[f64], p: f64) -> Result<f64> {
    if data.is_empty() {
        return invalid("percentile of empty data");
    }
    if !(0.0..=100.0).contains(&p) {
        return invalid(format!("percentile {p} outside [0, 100]"));
    }
    if data.iter().any(|x| x.is_nan()) {
        return invalid("percentile of data containing NaN");
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub p90: f64,
}

impl ErrorStats {
    pub fn of(data: &[f64]) -> Result<Self> {
        Ok(Self { mean: mean(data), p90: percentile(data, 90.0)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
}

impl NormStats {
    pub fn of(data: &[f64]) -> Result<Self> {
        Ok(Self {
            mean: mean(data),
            max: percentile(data, 100.0)?,
            p50: percentile(data, 50.0)?,
            p90: percentile(data, 90.0)?,
        })
    }
}

/// Aggregate statistics of one evaluated policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub episodes: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub r_error: ErrorStats,
    pub theta_error: ErrorStats,
    /// Distance of the commanded twist from the ideal twist.
    pub velocity_error: ErrorStats,
    pub force: NormStats,
    pub torque: NormStats,
}

impl MetricsReport {
    /// `(name, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("episodes", self.episodes as f64),
            ("success_rate", self.success_rate),
            ("mean_reward", self.mean_reward),
            ("r_error_mean", self.r_error.mean),
            ("r_error_p90", self.r_error.p90),
            ("theta_error_mean", self.theta_error.mean),
            ("theta_error_p90", self.theta_error.p90),
            ("velocity_error_mean", self.velocity_error.mean),
            ("velocity_error_p90", self.velocity_error.p90),
            ("force_mean", self.force.mean),
            ("force_max", self.force.max),
            ("force_p50", self.force.p50),
            ("force_p90", self.force.p90),
            ("torque_mean", self.torque.mean),
            ("torque_max", self.torque.max),
            ("torque_p50", self.torque.p50),
            ("torque_p90", self.torque.p90),
        ]
    }

    pub fn percentiles_monotone(&self) -> bool {
        let n = |s: &NormStats| s.p50 <= s.p90 && s.p90 <= s.max;
        n(&self.force) && n(&self.torque)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&ten, 90.0).unwrap(), 9.0);
        assert_eq!(percentile(&ten, 100.0).unwrap(), 10.0);
        assert_eq!(percentile(&ten, 0.0).unwrap(), 1.0);
        for p in [0.0, 37.0, 100.0] {
            assert_eq!(percentile(&[5.0], p).unwrap(), 5.0);
        }
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn norm_stats_are_monotone() {
        let s = NormStats::of(&[4.0, 0.5, 9.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.p50, s.p90, s.max), (2.0, 9.0, 9.0));
        assert!((s.mean - 3.5).abs() < 1e-15);
    }
}
