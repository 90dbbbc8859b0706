//! Generalized propensity scores, tilting functions and balancing weights.
//!
//! Every scheme is written through its tilting function h(x); unit i in
//! group j gets w_j(x_i) = h(x_i) / e_j(x_i). Weights are not normalized
//! globally since the Hájek estimators normalize within group.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Lower/upper clamp applied to fitted probabilities before weighting.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensitySource {
    Fitted,
    External,
}

/// Clamps one probability vector onto [1e-6, 1 − 1e-6] and renormalizes it;
/// returns the number of clamped entries.
pub fn clamp_row(p: &mut [f64]) -> usize {
    let mut clamped = 0;
    for v in p.iter_mut() {
        let c = v.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
        if c != *v {
            clamped += 1;
            *v = c;
        }
    }
    let s: f64 = p.iter().sum();
    if s != 1.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
    clamped
}

/// N×J matrix of e_j(x_i), columns in lexicographic label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
    pub source: PropensitySource,
    /// Number of entries moved onto the clamp bounds.
    pub clamped: usize,
}

impl PropensityMatrix {
    /// Validates and clamps `values`; rows are renormalized after clamping.
    pub fn new(values: DMatrix<f64>, labels: Vec<String>, source: PropensitySource) -> Result<Self> {
        if values.ncols() != labels.len() || labels.len() < 2 {
            return invalid("propensity matrix needs one column per treatment level (at least 2)");
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("treatment labels must be sorted and distinct");
        }
        let mut values = values;
        let mut clamped = 0;
        for i in 0..values.nrows() {
            let s: f64 = values.row(i).sum();
            if values.row(i).iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidData(format!(
                    "propensity row {} is not a probability vector",
                    i + 1
                )));
            }
            let mut row: Vec<f64> = values.row(i).iter().copied().collect();
            clamped += clamp_row(&mut row);
            for (k, v) in row.into_iter().enumerate() {
                values[(i, k)] = v;
            }
        }
        Ok(Self { values, labels, source, clamped })
    }

    /// Binary case from P(Z = labels[treated]).
    pub fn from_binary(p: &[f64], labels: Vec<String>, treated: usize, source: PropensitySource) -> Result<Self> {
        if labels.len() != 2 || treated > 1 {
            return invalid("binary propensity needs exactly two labels");
        }
        let m = DMatrix::from_fn(p.len(), 2, |i, j| if j == treated { p[i] } else { 1.0 - p[i] });
        Self::new(m, labels, source)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(rows),
            labels: self.labels.clone(),
            source: self.source,
            clamped: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum WeightScheme {
    Ipw,
    /// Target is one treatment group; `None` means the last label.
    Treated { group: Option<String> },
    Overlap,
    Matching,
    Entropy,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ipw" => Ok(WeightScheme::Ipw),
            "treated" => Ok(WeightScheme::Treated { group: None }),
            "overlap" => Ok(WeightScheme::Overlap),
            "matching" => Ok(WeightScheme::Matching),
            "entropy" => Ok(WeightScheme::Entropy),
            other => invalid(format!(
                "unknown weight scheme `{other}` (ipw | treated | overlap | matching | entropy)"
            )),
        }
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Ipw => "ipw",
            WeightScheme::Treated { .. } => "treated",
            WeightScheme::Overlap => "overlap",
            WeightScheme::Matching => "matching",
            WeightScheme::Entropy => "entropy",
        }
    }

    /// Column index of the target group for the treated scheme.
    pub fn treated_index(&self, labels: &[String]) -> Result<Option<usize>> {
        match self {
            WeightScheme::Treated { group: None } => Ok(Some(labels.len() - 1)),
            WeightScheme::Treated { group: Some(g) } => labels
                .iter()
                .position(|l| l == g)
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument(format!("treated group `{g}` is not a treatment level"))),
            _ => Ok(None),
        }
    }

    /// Tilting function at one probability vector.
    pub fn tilt(&self, e: &[f64], treated: Option<usize>) -> f64 {
        match self {
            WeightScheme::Ipw => 1.0,
            WeightScheme::Treated { .. } => e[treated.expect("treated index resolved")],
            WeightScheme::Overlap => 1.0 / e.iter().map(|v| 1.0 / v).sum::<f64>(),
            WeightScheme::Matching => e.iter().copied().fold(f64::INFINITY, f64::min),
            WeightScheme::Entropy => -e.iter().map(|v| v * v.ln()).sum::<f64>(),
        }
    }

    /// Partial derivatives ∂h/∂e_k, treating the components as free.
    /// `None` for the matching scheme, whose tilting function has kinks.
    pub fn tilt_gradient(&self, e: &[f64], treated: Option<usize>) -> Option<Vec<f64>> {
        match self {
            WeightScheme::Ipw => Some(vec![0.0; e.len()]),
            WeightScheme::Treated { .. } => {
                let t = treated.expect("treated index resolved");
                Some((0..e.len()).map(|k| f64::from(u8::from(k == t))).collect())
            }
            WeightScheme::Overlap => {
                let h = self.tilt(e, treated);
                Some(e.iter().map(|v| h * h / (v * v)).collect())
            }
            WeightScheme::Matching => None,
            WeightScheme::Entropy => Some(e.iter().map(|v| -(v.ln() + 1.0)).collect()),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, WeightScheme::Matching)
    }
}

/// Tilting values h(x_i) for every unit.
pub fn tilting(scheme: &WeightScheme, e: &PropensityMatrix) -> Result<Vec<f64>> {
    let t = scheme.treated_index(e.labels())?;
    Ok((0..e.n_rows()).map(|i| scheme.tilt(&e.row(i), t)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltedWeights {
    pub h: Vec<f64>,
    /// Unit i's weight for its own group, h(x_i)/e_{Z_i}(x_i).
    pub w: Vec<f64>,
    pub scheme: WeightScheme,
    /// Clamp count inherited from the propensity matrix.
    pub clamped: usize,
}

/// `z` holds each unit's column index into `e`.
pub fn unit_weights(scheme: &WeightScheme, e: &PropensityMatrix, z: &[usize]) -> Result<TiltedWeights> {
    if z.len() != e.n_rows() {
        return invalid("treatment vector length differs from propensity rows");
    }
    if let Some(&bad) = z.iter().find(|&&k| k >= e.n_groups()) {
        return invalid(format!("treatment index {bad} outside the label set"));
    }
    let h = tilting(scheme, e)?;
    let w = z.iter().enumerate().map(|(i, &k)| h[i] / e.values()[(i, k)]).collect();
    Ok(TiltedWeights { h, w, scheme: scheme.clone(), clamped: e.clamped })
}

/// Kish effective sample size per group, (Σw)²/Σw².
pub fn effective_sample_size(w: &[f64], z: &[usize], n_groups: usize) -> Result<Vec<f64>> {
    let mut s1 = vec![0.0; n_groups];
    let mut s2 = vec![0.0; n_groups];
    let mut n = vec![0usize; n_groups];
    for (&wi, &k) in w.iter().zip(z) {
        s1[k] += wi;
        s2[k] += wi * wi;
        n[k] += 1;
    }
    (0..n_groups)
        .map(|k| {
            if n[k] == 0 {
                Err(Error::EmptyGroup(k.to_string()))
            } else if s2[k] == 0.0 {
                Err(Error::ZeroWeight(k.to_string()))
            } else {
                Ok(s1[k] * s1[k] / s2[k])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(j: usize) -> Vec<String> {
        (0..j).map(|k| k.to_string()).collect()
    }

    fn binary(e: &[f64]) -> PropensityMatrix {
        PropensityMatrix::from_binary(e, labels(2), 1, PropensitySource::External).unwrap()
    }

    fn pair(scheme: WeightScheme, e: f64) -> (f64, f64) {
        let pm = binary(&[e, e]);
        let w = unit_weights(&scheme, &pm, &[1, 0]).unwrap();
        (w.w[0], w.w[1])
    }

    #[test]
    fn binary_tilting_values() {
        let h = tilting(&WeightScheme::Overlap, &binary(&[0.8])).unwrap();
        assert!((h[0] - 0.16).abs() < 1e-15);
        let h = tilting(&WeightScheme::Entropy, &binary(&[0.5])).unwrap();
        assert!((h[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let h = tilting(&WeightScheme::Matching, &binary(&[0.8])).unwrap();
        assert!((h[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn three_arm_overlap_tilting() {
        let m = DMatrix::from_element(1, 3, 1.0 / 3.0);
        let pm = PropensityMatrix::new(m, labels(3), PropensitySource::External).unwrap();
        let h = tilting(&WeightScheme::Overlap, &pm).unwrap();
        assert!((h[0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn binary_weight_pairs() {
        let (w1, w0) = pair(WeightScheme::Ipw, 0.8);
        assert!((w1 - 1.25).abs() < 1e-14 && (w0 - 5.0).abs() < 1e-12);
        let (w1, w0) = pair(WeightScheme::Overlap, 0.8);
        assert!((w1 - 0.2).abs() < 1e-14 && (w0 - 0.8).abs() < 1e-14);
        let (w1, w0) = pair(WeightScheme::Matching, 0.8);
        assert!((w1 - 0.25).abs() < 1e-14 && (w0 - 1.0).abs() < 1e-14);
        let (w1, w0) = pair(WeightScheme::Treated { group: None }, 0.8);
        assert!((w1 - 1.0).abs() < 1e-15 && (w0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ess_examples() {
        let ess = effective_sample_size(&[3.0; 10], &[0; 10], 1).unwrap();
        assert!((ess[0] - 10.0).abs() < 1e-12);
        let ess = effective_sample_size(&[1.0, 1.0, 2.0], &[0, 0, 0], 1).unwrap();
        assert!((ess[0] - 16.0 / 6.0).abs() < 1e-12);
        let ess = effective_sample_size(&[0.7], &[0], 1).unwrap();
        assert!((ess[0] - 1.0).abs() < 1e-12);
        assert!(matches!(effective_sample_size(&[1.0], &[0], 2), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn clamping_is_counted() {
        let pm = binary(&[0.0, 0.5, 1.0]);
        assert_eq!(pm.clamped, 4);
        assert!(pm.values().iter().all(|&v| (PROBABILITY_CLAMP..=1.0 - PROBABILITY_CLAMP).contains(&v)));
        let bad = DMatrix::from_row_slice(1, 2, &[0.7, 0.7]);
        assert!(PropensityMatrix::new(bad, labels(2), PropensitySource::External).is_err());
    }

    #[test]
    fn unknown_treated_group_is_an_error() {
        let s = WeightScheme::Treated { group: Some("x".into()) };
        assert!(tilting(&s, &binary(&[0.3])).is_err());
    }

    fn all_schemes() -> Vec<WeightScheme> {
        vec![
            WeightScheme::Ipw,
            WeightScheme::Treated { group: None },
            WeightScheme::Overlap,
            WeightScheme::Matching,
            WeightScheme::Entropy,
        ]
    }

    /// Closed forms for the binary table, written out independently.
    fn binary_table(s: &WeightScheme, e: f64) -> (f64, f64, f64) {
        let xi1 = e.min(1.0 - e);
        let xi2 = -(e * e.ln() + (1.0 - e) * (1.0 - e).ln());
        match s {
            WeightScheme::Ipw => (1.0, 1.0 / e, 1.0 / (1.0 - e)),
            WeightScheme::Treated { .. } => (e, 1.0, e / (1.0 - e)),
            WeightScheme::Overlap => (e * (1.0 - e), 1.0 - e, e),
            WeightScheme::Matching => (xi1, xi1 / e, xi1 / (1.0 - e)),
            WeightScheme::Entropy => (xi2, xi2 / e, xi2 / (1.0 - e)),
        }
    }

    proptest! {
        #[test]
        fn general_formulas_reduce_to_binary_table(e in 0.01f64..0.99) {
            let pm = binary(&[e, e]);
            for s in all_schemes() {
                let w = unit_weights(&s, &pm, &[1, 0]).unwrap();
                let (h, w1, w0) = binary_table(&s, e);
                prop_assert!((w.h[0] - h).abs() <= 1e-12 * h.max(1.0));
                prop_assert!((w.w[0] - w1).abs() <= 1e-12 * w1.max(1.0));
                prop_assert!((w.w[1] - w0).abs() <= 1e-12 * w0.max(1.0));
            }
        }

        #[test]
        fn weights_are_finite_and_positive(raw in proptest::collection::vec(0.05f64..1.0, 3..=3)) {
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let pm = PropensityMatrix::new(DMatrix::from_row_slice(1, 3, &row), labels(3), PropensitySource::External).unwrap();
            for scheme in all_schemes() {
                for z in 0..3 {
                    let w = unit_weights(&scheme, &pm, &[z]).unwrap();
                    prop_assert!(w.w[0].is_finite() && w.w[0] > 0.0);
                    prop_assert!(w.h[0] > 0.0);
                }
            }
        }

        #[test]
        fn ess_bounded_by_group_size(w in proptest::collection::vec(0.01f64..10.0, 1..30)) {
            let z = vec![0; w.len()];
            let ess = effective_sample_size(&w, &z, 1).unwrap()[0];
            prop_assert!(ess <= w.len() as f64 * (1.0 + 1e-12));
            prop_assert!(ess >= 1.0 - 1e-12);
        }
    }
}
