//! Small numeric helpers shared by the diagnostics and inference code.

use statrs::distribution::{ContinuousCDF, Normal};

/// 0.975 quantile of the standard normal.
pub const Z_975: f64 = 1.959963984540054;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with divisor n − 1 (NaN for fewer than two values).
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Quantile of already sorted data, linear interpolation between order
/// statistics at position (n − 1)p (R's default type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
        assert!((quantile(&[3.0, 1.0, 2.0], 0.025) - 1.05).abs() < 1e-12);
    }

    #[test]
    fn normal_p_values() {
        assert!((two_sided_p(Z_975) - 0.05).abs() < 1e-9);
        assert_eq!(two_sided_p(0.0), 1.0);
        assert!(two_sided_p(40.0) < 1e-300 || two_sided_p(40.0) == 0.0);
    }

    #[test]
    fn variance_divisor() {
        assert_eq!(sample_variance(&[1.0, 2.0, 3.0]), 1.0);
        assert!(sample_variance(&[1.0]).is_nan());
    }
}
