//! Small statistical helpers for the experiment suites: one-sided paired
//! location tests used to assert orderings over seeds.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// One-sided Wilcoxon signed-rank test (normal approximation with tie and
/// continuity corrections) for H1: the paired differences `x - y` are
/// stochastically negative. Returns the p-value; zero differences are
/// dropped. Panics when the slices differ in length.
pub fn wilcoxon_signed_rank_less(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples must match in length");
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    // rank |d| ascending with average ranks on ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
    if var <= 0.0 {
        return if w_plus < mean { 0.0 } else { 1.0 };
    }
    let z = (w_plus - mean + 0.5) / var.sqrt();
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

/// One-sided paired t-test for H1: mean of `x - y` is negative. Returns the
/// p-value. A zero-variance difference vector degenerates to 0/0.5/1 by the
/// sign of the mean.
pub fn paired_t_less(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples must match in length");
    let n = x.len();
    assert!(n >= 2, "need at least two pairs");
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return if mean < 0.0 {
            0.0
        } else if mean > 0.0 {
            1.0
        } else {
            0.5
        };
    }
    let t = mean / (var / n as f64).sqrt();
    StudentsT::new(0.0, 1.0, n as f64 - 1.0).unwrap().cdf(t)
}

/// Sample mean and (unbiased) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 1, "empty sample");
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn wilcoxon_all_negative_differences() {
        // n = 10, no ties: W+ = 0, z = (0 - 27.5 + 0.5)/sqrt(96.25) = -2.7524,
        // Phi(z) = 0.002957 (tabulated).
        let x: Vec<f64> = (1..=10).map(|i| -(i as f64)).collect();
        let y = vec![0.0; 10];
        let p = wilcoxon_signed_rank_less(&x, &y);
        assert!((p - 0.002957).abs() < 1e-4, "p = {p}");
    }

    #[test]
    fn wilcoxon_symmetric_null_is_large() {
        let mut rng = RngStream::new(42, 0);
        let x: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let p = wilcoxon_signed_rank_less(&x, &y);
        assert!(p > 0.01, "null rejected: p = {p}");
    }

    #[test]
    fn wilcoxon_detects_shift() {
        let mut rng = RngStream::new(7, 0);
        let y: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let x: Vec<f64> = y.iter().map(|v| v - 1.0).collect();
        assert!(wilcoxon_signed_rank_less(&x, &y) < 1e-6);
        assert!(wilcoxon_signed_rank_less(&y, &x) > 0.99);
    }

    #[test]
    fn wilcoxon_drops_zero_differences() {
        let x = vec![0.0, 0.0, 0.0];
        let y = vec![0.0, 0.0, 0.0];
        assert_eq!(wilcoxon_signed_rank_less(&x, &y), 1.0);
    }

    #[test]
    fn paired_t_known_value() {
        // d = [-1, -2, -3, -4]: mean -2.5, sd 1.2910, t = -3.873, df = 3,
        // one-sided p = 0.01524 (tabulated).
        let x = vec![0.0, 0.0, 0.0, 0.0];
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let p = paired_t_less(&x, &y);
        assert!((p - 0.01524).abs() < 1e-4, "p = {p}");
    }

    #[test]
    fn paired_t_degenerate_constant_shift() {
        let x = vec![1.0, 2.0, 3.0];
        let y = vec![2.0, 3.0, 4.0];
        assert_eq!(paired_t_less(&x, &y), 0.0);
        assert_eq!(paired_t_less(&y, &x), 1.0);
    }

    #[test]
    fn mean_std_oracle() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((m - 5.0).abs() < 1e-12);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }
}
