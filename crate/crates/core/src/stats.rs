//! Sample statistics used by the Monte Carlo estimators.
//!
//! Sums run sequentially in index order so results do not depend on scheduling.

use serde::Serialize;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    /// `|mean - target| <= k * se`, with a floor for exactly deterministic samples.
    pub fn within(&self, target: f64, k: f64) -> bool {
        let tol = k * self.se + 1e-12 * (1.0 + target.abs());
        (self.mean - target).abs() <= tol
    }

    /// Standardized distance `(mean - target) / se`.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if self.se > 0.0 {
            d / self.se
        } else if d.abs() <= 1e-12 * (1.0 + target.abs()) {
            0.0
        } else {
            d.signum() * f64::INFINITY
        }
    }
}

pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            se: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Estimate { mean, se: 0.0, n };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Estimate {
        mean,
        se: (var / n as f64).sqrt(),
        n,
    }
}

/// Mean and standard error treating consecutive pairs as one draw.
/// Used with antithetic sampling, where partners are dependent.
pub fn mean_se_paired(xs: &[f64], paired: bool) -> Estimate {
    if !paired {
        return mean_se(xs);
    }
    let avg: Vec<f64> = xs.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let mut e = mean_se(&avg);
    e.n = xs.len();
    e
}

/// Linear-interpolation quantile, `q` in `[0, 1]`. NaNs sort last.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    v[lo] * (1.0 - w) + v[hi] * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_and_se() {
        let e = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(e.mean, 2.5);
        assert_abs_diff_eq!(e.se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert!(e.within(2.5, 0.0));
        assert_eq!(mean_se(&[3.0; 5]).se, 0.0);
    }

    #[test]
    fn paired_mean() {
        let e = mean_se_paired(&[1.0, -1.0, 2.0, -2.0], true);
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn quantiles() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&xs, 0.5), 2.5);
    }
}
