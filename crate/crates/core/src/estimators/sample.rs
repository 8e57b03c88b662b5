//! Kernel-weighted outcome samples and their step/smoothed CDFs.

use crate::numeric::{norm_cdf, norm_pdf};

/// Product Epanechnikov kernel; compact support on `[-1, 1]^q`.
pub fn epanechnikov(x: &[f64], center: &[f64], h: &[f64]) -> f64 {
    let mut w = 1.0;
    for ((xi, ci), hi) in x.iter().zip(center).zip(h) {
        let u = (xi - ci) / hi;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        w *= 0.75 * (1.0 - u * u);
    }
    w
}

/// Beyond this many bandwidths the Gaussian smoother is 0 or 1 to double precision.
const SMOOTH_CUTOFF: f64 = 9.0;

/// Outcomes sorted ascending with non-negative weights.
#[derive(Debug, Clone, Default)]
pub struct WeightedSample {
    ys: Vec<f64>,
    ws: Vec<f64>,
    /// `cum[i]` = total weight of the first `i` entries.
    cum: Vec<f64>,
    total: f64,
}

impl WeightedSample {
    pub fn new(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.retain(|&(_, w)| w > 0.0);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = Vec::with_capacity(pairs.len() + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for &(_, w) in &pairs {
            acc += w;
            cum.push(acc);
        }
        let (ys, ws) = pairs.into_iter().unzip();
        Self { ys, ws, cum, total: acc }
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.ys.iter().copied().zip(self.ws.iter().copied()).collect()
    }

    /// Weighted sum of `1(Y_i <= y)`.
    pub fn step_mass(&self, y: f64) -> f64 {
        self.cum[self.ys.partition_point(|&v| v <= y)]
    }

    /// Weighted sum of `Phi((y - Y_i) / b)` and its first two derivatives in `y`.
    pub fn smooth_mass(&self, y: f64, b: f64) -> [f64; 3] {
        let lo = self.ys.partition_point(|&v| v < y - SMOOTH_CUTOFF * b);
        let hi = self.ys.partition_point(|&v| v <= y + SMOOTH_CUTOFF * b);
        let mut out = [self.cum[lo], 0.0, 0.0];
        for i in lo..hi {
            let u = (y - self.ys[i]) / b;
            let w = self.ws[i];
            let phi = norm_pdf(u);
            out[0] += w * norm_cdf(u);
            out[1] += w * phi / b;
            out[2] -= w * u * phi / (b * b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_support() {
        assert_eq!(epanechnikov(&[0.0], &[0.0], &[1.0]), 0.75);
        assert_eq!(epanechnikov(&[1.0], &[0.0], &[1.0]), 0.0);
        assert_eq!(epanechnikov(&[], &[], &[]), 1.0);
        let w = epanechnikov(&[0.5, 0.0], &[0.0, 0.0], &[1.0, 2.0]);
        assert!((w - 0.75 * 0.75 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn step_and_smooth_masses() {
        let s = WeightedSample::new(vec![(2.0, 1.0), (1.0, 1.0), (3.0, 0.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.step_mass(0.5), 0.0);
        assert_eq!(s.step_mass(1.0), 1.0);
        assert_eq!(s.step_mass(1.5), 1.0);
        assert_eq!(s.step_mass(2.0), 2.0);
        let m = s.smooth_mass(1.5, 0.5);
        assert!((m[0] - (norm_cdf(1.0) + norm_cdf(-1.0))).abs() < 1e-15);
        // derivative check against central differences
        let h = 1e-5;
        let fd = (s.smooth_mass(1.3 + h, 0.4)[0] - s.smooth_mass(1.3 - h, 0.4)[0]) / (2.0 * h);
        assert!((fd - s.smooth_mass(1.3, 0.4)[1]).abs() < 1e-8);
        let fd2 = (s.smooth_mass(1.3 + h, 0.4)[1] - s.smooth_mass(1.3 - h, 0.4)[1]) / (2.0 * h);
        assert!((fd2 - s.smooth_mass(1.3, 0.4)[2]).abs() < 1e-6);
    }
}
