//! Propensity score trimming.
//!
//! Symmetric trimming keeps unit i iff min_j e_j(x_i) ≥ δ, with δ < 1/J.
//! Optimal trimming keeps the lower level set {g ≤ γ*} of
//! g_i = Σ_k 1/e_k(x_i) (binary: 1/{e(1−e)}), where γ* minimizes the
//! sample variance proxy Σ_{g ≤ γ} g / |{g ≤ γ}|² over the observed values
//! of g. This is the empirical solution of γ = 2·E[g | g ≤ γ]; when the
//! proxy keeps decreasing up to the largest g every unit is kept.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::weights::PropensityMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCounts {
    pub label: String,
    pub trimmed: usize,
    pub remained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrimResult {
    #[serde(skip)]
    pub kept: Vec<bool>,
    /// Threshold on min_j e_j that reproduces the kept set; for the
    /// optimal rule this is only exact in the binary case.
    pub delta_used: f64,
    /// γ* of the optimal rule.
    pub gamma: Option<f64>,
    pub counts: Vec<GroupCounts>,
}

impl TrimResult {
    pub fn n_trimmed(&self) -> usize {
        self.counts.iter().map(|c| c.trimmed).sum()
    }

    pub fn n_remained(&self) -> usize {
        self.counts.iter().map(|c| c.remained).sum()
    }

    /// Two-row table of trimmed/remained counts by treatment group.
    pub fn render(&self) -> String {
        let width = |s: &str| s.chars().count();
        let cols: Vec<usize> = self
            .counts
            .iter()
            .map(|c| width(&c.label).max(c.trimmed.to_string().len()).max(c.remained.to_string().len()))
            .collect();
        let mut out = format!(
            "{} cases trimmed, {} cases remained\n\ntrimmed result by trt group:\n",
            self.n_trimmed(),
            self.n_remained()
        );
        out.push_str(&format!("{:<8}", ""));
        for (c, w) in self.counts.iter().zip(&cols) {
            out.push_str(&format!(" {:>w$}", c.label, w = w));
        }
        out.push('\n');
        for (name, pick) in [("trimmed", true), ("remained", false)] {
            out.push_str(&format!("{name:<8}"));
            for (c, w) in self.counts.iter().zip(&cols) {
                let v = if pick { c.trimmed } else { c.remained };
                out.push_str(&format!(" {v:>w$}", w = w));
            }
            out.push('\n');
        }
        out
    }
}

fn counts(kept: &[bool], z: &[usize], labels: &[String]) -> Vec<GroupCounts> {
    let mut out: Vec<GroupCounts> =
        labels.iter().map(|l| GroupCounts { label: l.clone(), trimmed: 0, remained: 0 }).collect();
    for (&k, &g) in kept.iter().zip(z) {
        if k {
            out[g].remained += 1;
        } else {
            out[g].trimmed += 1;
        }
    }
    out
}

fn row_min(e: &PropensityMatrix, i: usize) -> f64 {
    e.values().row(i).min()
}

pub fn symmetric_trim(e: &PropensityMatrix, z: &[usize], delta: f64) -> Result<TrimResult> {
    let j = e.n_groups() as f64;
    if !(delta >= 0.0 && delta < 1.0 / j) {
        return invalid(format!("trimming threshold must satisfy 0 <= delta < 1/J = {:.6}", 1.0 / j));
    }
    let kept: Vec<bool> = (0..e.n_rows()).map(|i| delta == 0.0 || row_min(e, i) >= delta).collect();
    Ok(TrimResult { counts: counts(&kept, z, e.labels()), kept, delta_used: delta, gamma: None })
}

/// g_i = Σ_k 1/e_k(x_i).
pub fn inverse_sum(e: &PropensityMatrix) -> Vec<f64> {
    (0..e.n_rows()).map(|i| e.values().row(i).iter().map(|v| 1.0 / v).sum()).collect()
}

/// Threshold γ* over the values `g`: the minimizer of Σ_{g≤γ} g / n_γ²
/// among the distinct observed values (first minimizer on ties).
pub fn optimal_gamma(g: &[f64]) -> f64 {
    let mut sorted = g.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, f64::NAN);
    let mut sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            sum += sorted[i];
            i += 1;
        }
        let objective = sum / (i as f64 * i as f64);
        if objective < best.0 {
            best = (objective, v);
        }
    }
    best.1
}

pub fn optimal_trim(e: &PropensityMatrix, z: &[usize]) -> Result<TrimResult> {
    if e.n_rows() == 0 {
        return invalid("no units to trim");
    }
    let g = inverse_sum(e);
    let gamma = optimal_gamma(&g);
    let kept: Vec<bool> = g.iter().map(|&v| v <= gamma).collect();
    let delta_used = (0..e.n_rows())
        .filter(|&i| kept[i])
        .map(|i| row_min(e, i))
        .fold(f64::INFINITY, f64::min);
    Ok(TrimResult { counts: counts(&kept, z, e.labels()), kept, delta_used, gamma: Some(gamma) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::PropensitySource;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn labels(j: usize) -> Vec<String> {
        (0..j).map(|k| k.to_string()).collect()
    }

    fn binary(e: &[f64]) -> PropensityMatrix {
        PropensityMatrix::from_binary(e, labels(2), 1, PropensitySource::External).unwrap()
    }

    #[test]
    fn zero_delta_keeps_everything() {
        let pm = binary(&[0.001, 0.5, 0.999]);
        let t = symmetric_trim(&pm, &[0, 1, 1], 0.0).unwrap();
        assert!(t.kept.iter().all(|&k| k));
        assert_eq!(t.n_trimmed(), 0);
    }

    #[test]
    fn binary_symmetric_rule() {
        let pm = binary(&[0.05, 0.5, 0.95]);
        let t = symmetric_trim(&pm, &[0, 1, 1], 0.1).unwrap();
        assert_eq!(t.kept, [false, true, false]);
        assert_eq!(t.counts[0].trimmed, 1);
        assert_eq!(t.counts[1].trimmed, 1);
        assert_eq!(t.counts[1].remained, 1);
    }

    #[test]
    fn three_arm_min_rule_and_bound() {
        let m = DMatrix::from_row_slice(2, 3, &[0.05, 0.50, 0.45, 0.20, 0.40, 0.40]);
        let pm = PropensityMatrix::new(m, labels(3), PropensitySource::External).unwrap();
        let t = symmetric_trim(&pm, &[0, 1], 0.1).unwrap();
        assert_eq!(t.kept, [false, true]);
        assert!(symmetric_trim(&pm, &[0, 1], 0.4).is_err());
        assert!(symmetric_trim(&pm, &[0, 1], -0.1).is_err());
    }

    #[test]
    fn threshold_ties_are_kept() {
        let pm = binary(&[0.25, 0.75, 0.2]);
        let t = symmetric_trim(&pm, &[0, 1, 0], 0.25).unwrap();
        assert_eq!(t.kept, [true, true, false]);
    }

    #[test]
    fn optimal_keeps_all_under_perfect_overlap() {
        let pm = binary(&[0.5; 8]);
        let t = optimal_trim(&pm, &[0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        assert!(t.kept.iter().all(|&k| k));
        assert_eq!(t.gamma, Some(4.0));
    }

    #[test]
    fn optimal_kept_set_is_symmetric_interval() {
        let n = 10_000;
        let e: Vec<f64> = (0..n).map(|i| 0.01 + 0.98 * (i as f64 + 0.5) / n as f64).collect();
        let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let pm = binary(&e);
        let t = optimal_trim(&pm, &z).unwrap();
        assert!(t.n_trimmed() > 0);
        let kept_e: Vec<f64> = e.iter().zip(&t.kept).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
        let lo = kept_e.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = kept_e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (&v, &k) in e.iter().zip(&t.kept) {
            assert_eq!(k, v >= lo && v <= hi);
        }
        assert!((lo - (1.0 - hi)).abs() < 1e-3);
        // Uniform e: the continuous optimum is close to the familiar 0.1 rule.
        assert!(lo > 0.05 && lo < 0.15, "lo = {lo}");
    }

    fn rows(j: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.02f64..1.0, j), 1..40)
    }

    fn matrix(rows: &[Vec<f64>]) -> PropensityMatrix {
        let j = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), j, |i, k| rows[i][k] / rows[i].iter().sum::<f64>());
        PropensityMatrix::new(m, labels(j), PropensitySource::External).unwrap()
    }

    proptest! {
        #[test]
        fn symmetric_trim_is_monotone(r in rows(3), d1 in 0.0f64..0.33, d2 in 0.0f64..0.33) {
            let pm = matrix(&r);
            let z = vec![0; r.len()];
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = symmetric_trim(&pm, &z, lo).unwrap();
            let b = symmetric_trim(&pm, &z, hi).unwrap();
            for (ka, kb) in a.kept.iter().zip(&b.kept) {
                prop_assert!(!kb || *ka);
            }
        }

        #[test]
        fn binary_relabeling_keeps_set(e in proptest::collection::vec(0.001f64..0.999, 1..50), d in 0.0f64..0.5) {
            let a = PropensityMatrix::from_binary(&e, labels(2), 1, PropensitySource::External).unwrap();
            let b = PropensityMatrix::from_binary(&e, labels(2), 0, PropensitySource::External).unwrap();
            let z = vec![0; e.len()];
            prop_assert_eq!(symmetric_trim(&a, &z, d).unwrap().kept, symmetric_trim(&b, &z, d).unwrap().kept);
        }

        #[test]
        fn optimal_kept_set_is_lower_level_set(r in rows(2)) {
            let pm = matrix(&r);
            let t = optimal_trim(&pm, &vec![0; r.len()]).unwrap();
            let g = inverse_sum(&pm);
            let gamma = t.gamma.unwrap();
            for (gi, k) in g.iter().zip(&t.kept) {
                prop_assert_eq!(*k, *gi <= gamma);
            }
            prop_assert!(t.kept.iter().any(|&k| k));
        }
    }
}
