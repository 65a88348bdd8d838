//! Deterministic reductions.
//!
//! Every mean in the crate goes through [`pairwise_sum`] over per-path values
//! stored in path order. The reduction tree depends only on the slice length,
//! so results are bit-identical whatever the worker count used to produce the
//! per-path values.

use serde::{Deserialize, Serialize};

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation with a fixed tree shape.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance, two-pass.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = mean(values);
        let std_error = if n > 1 {
            (variance(values) / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, std_error, n }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (
            self.mean - 1.959_963_984_540_054 * self.std_error,
            self.mean + 1.959_963_984_540_054 * self.std_error,
        )
    }

    /// `(mean - reference) / std_error`; zero when both the deviation and the error vanish.
    pub fn t_stat(&self, reference: f64) -> f64 {
        let dev = self.mean - reference;
        if self.std_error > 0.0 {
            dev / self.std_error
        } else if dev == 0.0 {
            0.0
        } else {
            dev.signum() * f64::INFINITY
        }
    }

    /// `|mean - reference| <= k * std_error`.
    pub fn within(&self, reference: f64, k: f64) -> bool {
        (self.mean - reference).abs() <= k * self.std_error
    }
}

/// Empirical frequency of an event with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub count: usize,
    pub n: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
}

impl Frequency {
    pub fn new(count: usize, n: usize) -> Self {
        let p = if n == 0 { 0.0 } else { count as f64 / n as f64 };
        let se = if n == 0 {
            0.0
        } else {
            (p * (1.0 - p) / n as f64).sqrt()
        };
        let half = 1.959_963_984_540_054 * se;
        Frequency {
            count,
            n,
            estimate: p,
            std_error: se,
            ci95: ((p - half).max(0.0), (p + half).min(1.0)),
        }
    }
}

/// Ordinary least squares slope of `y` on `x`, as the weights `w_k` with
/// `slope = Σ w_k y_k`. Linear weights let per-path slopes be averaged.
pub fn ols_slope_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    x.iter().map(|v| (v - xm) / sxx).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn estimate_of_constant_has_zero_error() {
        let e = Estimate::from_samples(&[2.5; 10]);
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.std_error, 0.0);
        assert!(e.within(2.5, 3.0));
        assert_eq!(e.t_stat(2.5), 0.0);
    }

    #[test]
    fn slope_weights_recover_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let w = ols_slope_weights(&x);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let slope: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frequency_interval_is_clamped() {
        let f = Frequency::new(0, 100);
        assert_eq!(f.estimate, 0.0);
        assert_eq!(f.ci95, (0.0, 0.0));
    }
}
