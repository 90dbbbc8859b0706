//! Weighting estimators of average potential outcomes and their contrasts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// μ̂_j = Σ_i w_i D_ij Y_i / Σ_i w_i D_ij, where `w` holds each unit's
/// weight for its own group and `z` its group index.
pub fn hajek_means(y: &[f64], w: &[f64], z: &[usize], n_groups: usize) -> Result<Vec<f64>> {
    if y.len() != w.len() || y.len() != z.len() {
        return invalid("outcome, weight and treatment lengths differ");
    }
    let mut num = vec![0.0; n_groups];
    let mut den = vec![0.0; n_groups];
    for i in 0..y.len() {
        num[z[i]] += w[i] * y[i];
        den[z[i]] += w[i];
    }
    (0..n_groups)
        .map(|j| {
            if den[j] > 0.0 {
                Ok(num[j] / den[j])
            } else {
                Err(Error::ZeroWeight(format!("group {j} has zero total weight")))
            }
        })
        .collect()
}

/// Augmented estimator: the Hájek mean of the residuals Y − m_j plus the
/// h-weighted average of m_j over the whole sample. `m` is N×J.
pub fn augmented_means(y: &[f64], w: &[f64], z: &[usize], h: &[f64], m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let j = m.ncols();
    if m.nrows() != y.len() || h.len() != y.len() {
        return invalid("outcome predictions must cover every unit");
    }
    let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - m[(i, z[i])]).collect();
    let nu = hajek_means(&resid, w, z, j)?;
    let sh: f64 = h.iter().sum();
    if sh <= 0.0 {
        return Err(Error::ZeroWeight("tilting function sums to zero".into()));
    }
    Ok((0..j)
        .map(|k| nu[k] + h.iter().enumerate().map(|(i, hi)| hi * m[(i, k)]).sum::<f64>() / sh)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scale {
    Dif,
    Rr,
    Or,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DIF" => Ok(Scale::Dif),
            "RR" => Ok(Scale::Rr),
            "OR" => Ok(Scale::Or),
            other => invalid(format!("unknown contrast scale `{other}` (DIF | RR | OR)")),
        }
    }
}

impl Scale {
    /// g(μ) and g'(μ) for the scale's transformation of a single mean.
    pub fn transform(self, mu: f64) -> Result<(f64, f64)> {
        match self {
            Scale::Dif => Ok((mu, 1.0)),
            Scale::Rr if mu > 0.0 => Ok((mu.ln(), 1.0 / mu)),
            Scale::Rr => Err(Error::Domain(format!("RR scale needs positive means, got {mu}"))),
            Scale::Or if mu > 0.0 && mu < 1.0 => Ok(((mu / (1.0 - mu)).ln(), 1.0 / (mu * (1.0 - mu)))),
            Scale::Or => Err(Error::Domain(format!("OR scale needs means in (0, 1), got {mu}"))),
        }
    }
}

/// K×J contrast coefficients with a label per row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastSpec {
    #[serde(serialize_with = "serialize_rows")]
    pub matrix: DMatrix<f64>,
    pub labels: Vec<String>,
}

fn serialize_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    rows.serialize(s)
}

impl ContrastSpec {
    /// All pairwise differences, ordered by label pair; row "b - a" puts +1
    /// on the later label b and −1 on the earlier label a.
    pub fn pairwise(groups: &[String]) -> Self {
        let j = groups.len();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for a in 0..j {
            for b in a + 1..j {
                let mut r = vec![0.0; j];
                r[a] = -1.0;
                r[b] = 1.0;
                rows.push(r);
                labels.push(format!("{} - {}", groups[b], groups[a]));
            }
        }
        Self::from_rows(rows, labels)
    }

    fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Self {
        let k = rows.len();
        let j = rows.first().map_or(0, Vec::len);
        Self { matrix: DMatrix::from_fn(k, j, |r, c| rows[r][c]), labels }
    }

    /// Parses semicolon-separated rows of comma-separated coefficients.
    pub fn parse(text: &str, n_groups: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for (r, part) in text.split(';').enumerate() {
            let row = part
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::InvalidArgument(format!("bad contrast coefficient `{}`", c.trim())))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != n_groups {
                return invalid(format!(
                    "contrast row {} has {} coefficients for {n_groups} groups",
                    r + 1,
                    row.len()
                ));
            }
            rows.push(row);
        }
        let labels = (1..=rows.len()).map(|k| format!("Contrast {k}")).collect();
        Ok(Self::from_rows(rows, labels))
    }

    pub fn n_contrasts(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Contrast point estimates Σ_j a_j g(μ̂_j) on the chosen scale.
pub fn apply_contrast(mu: &[f64], c: &ContrastSpec, scale: Scale) -> Result<Vec<f64>> {
    if c.matrix.ncols() != mu.len() {
        return invalid("contrast width differs from the number of groups");
    }
    let g = mu.iter().map(|&m| scale.transform(m).map(|t| t.0)).collect::<Result<Vec<f64>>>()?;
    Ok((0..c.n_contrasts())
        .map(|k| c.matrix.row(k).iter().zip(&g).map(|(a, v)| a * v).sum())
        .collect())
}
