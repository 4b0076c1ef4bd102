//! Sample moments with standard errors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// Mean and standard error of the mean; the reduction runs in slice
    /// order so repeated calls are bit-identical.
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate { mean, stderr: 0.0, n };
        }
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let var = ss / (n - 1) as f64;
        Estimate { mean, stderr: (var / n as f64).sqrt(), n }
    }

    pub fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len();
        if n < 2 {
            return 0.0;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if self.stderr == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d.abs() / self.stderr
        }
    }

    /// True when `|mean - target| <= z * stderr`, with a small absolute
    /// allowance for exact identities computed in floating point.
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.mean - target).abs() <= z * self.stderr + 1e-12 * target.abs().max(1.0)
    }
}

/// Combined standard error of the difference of two independent estimates.
pub fn difference_stderr(a: &Estimate, b: &Estimate) -> f64 {
    (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
}
