//! Covariate balance and overlap diagnostics.
//!
//! ASD for a pair of groups is |m_j − m_j'| / sqrt((s_j² + s_j'²)/2); with
//! three or more groups the largest pairwise value is reported. PSD compares
//! each group's weighted mean to the target mean Σhx/Σh, scaled by
//! sqrt(Σ_j s_j²/J), and reports the largest group. Metrics with a zero
//! denominator are undefined and come back as `None`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::formula::DesignMatrix;
use crate::stats::quantile_sorted;
use crate::trim::TrimResult;
use crate::weights::{effective_sample_size, unit_weights, PropensityMatrix, WeightScheme};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DENSITY_GRID: usize = 512;
pub const HISTOGRAM_BINS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Asd,
    Psd,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ASD" => Ok(Metric::Asd),
            "PSD" => Ok(Metric::Psd),
            other => invalid(format!("unknown balance metric `{other}` (ASD | PSD)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub weighted_var: bool,
    pub metric: Metric,
    pub threshold: f64,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self { weighted_var: true, metric: Metric::Asd, threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    /// NaN when the group is too small for a variance.
    pub variance: f64,
}

/// Weighted mean and variance of `x` over the units in `mask`.
///
/// With `w = None` the variance uses divisor n − 1. Otherwise it is
/// Σw(x − x̄)² · Σw / ((Σw)² − Σw²).
pub fn weighted_moments(x: &[f64], w: Option<&[f64]>, mask: &[bool]) -> Result<Moments> {
    let mut sw = 0.0;
    let mut sw2 = 0.0;
    let mut swx = 0.0;
    let mut n = 0usize;
    for i in (0..x.len()).filter(|&i| mask[i]) {
        let wi = w.map_or(1.0, |w| w[i]);
        sw += wi;
        sw2 += wi * wi;
        swx += wi * x[i];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyGroup("balance group".into()));
    }
    if sw <= 0.0 {
        return Err(Error::ZeroWeight("balance group".into()));
    }
    let mean = swx / sw;
    let ss: f64 = (0..x.len())
        .filter(|&i| mask[i])
        .map(|i| w.map_or(1.0, |w| w[i]) * (x[i] - mean) * (x[i] - mean))
        .sum();
    let variance = match w {
        None if n > 1 => ss / (n - 1) as f64,
        Some(_) if sw * sw - sw2 > 0.0 => ss * sw / (sw * sw - sw2),
        _ => f64::NAN,
    };
    // Exact zeros for constant columns keep undefined metrics detectable.
    let variance = if ss == 0.0 && variance.is_finite() { 0.0 } else { variance };
    Ok(Moments { mean, variance })
}

fn group_masks(z: &[usize], j: usize) -> Vec<Vec<bool>> {
    (0..j).map(|k| z.iter().map(|&g| g == k).collect()).collect()
}

/// Per-group means and the variances used in the metric denominators.
/// The mean always uses `w`; the variance uses `w` only if `weighted_var`.
fn group_moments(x: &[f64], w: Option<&[f64]>, z: &[usize], j: usize, weighted_var: bool) -> Result<Vec<Moments>> {
    group_masks(z, j)
        .iter()
        .map(|m| {
            let mean = weighted_moments(x, w, m)?.mean;
            let variance = weighted_moments(x, if weighted_var { w } else { None }, m)?.variance;
            Ok(Moments { mean, variance })
        })
        .collect()
}

fn ratio(num: f64, den2: f64) -> Option<f64> {
    if den2.is_finite() && den2 > 0.0 {
        Some(num.abs() / den2.sqrt())
    } else {
        None
    }
}

fn asd_from(m: &[Moments]) -> Option<f64> {
    let mut best: Option<f64> = Some(0.0);
    for a in 0..m.len() {
        for b in a + 1..m.len() {
            let v = ratio(m[a].mean - m[b].mean, (m[a].variance + m[b].variance) / 2.0);
            best = match (best, v) {
                (Some(x), Some(y)) => Some(x.max(y)),
                _ => None,
            };
        }
    }
    best
}

fn psd_from(m: &[Moments], target: f64) -> Option<f64> {
    let pooled = m.iter().map(|g| g.variance).sum::<f64>() / m.len() as f64;
    m.iter()
        .map(|g| ratio(g.mean - target, pooled))
        .try_fold(0.0_f64, |acc, v| v.map(|v| acc.max(v)))
}

/// ASD between groups `a` and `b`; `w = None` is the unweighted version.
pub fn asd(x: &[f64], w: Option<&[f64]>, z: &[usize], pair: (usize, usize), weighted_var: bool) -> Result<Option<f64>> {
    let n_groups = pair.0.max(pair.1) + 1;
    let m = group_moments(x, w, z, n_groups, weighted_var)?;
    Ok(asd_from(&[m[pair.0], m[pair.1]]))
}

/// PSD, maximized over groups. `h = None` targets the full sample.
pub fn psd(
    x: &[f64],
    w: Option<&[f64]>,
    h: Option<&[f64]>,
    z: &[usize],
    n_groups: usize,
    weighted_var: bool,
) -> Result<Option<f64>> {
    let m = group_moments(x, w, z, n_groups, weighted_var)?;
    Ok(psd_from(&m, target_mean(x, h)?))
}

fn target_mean(x: &[f64], h: Option<&[f64]>) -> Result<f64> {
    let (mut sh, mut shx) = (0.0, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let hi = h.map_or(1.0, |h| h[i]);
        sh += hi;
        shx += hi * xi;
    }
    if sh <= 0.0 {
        return Err(Error::ZeroWeight("tilting function sums to zero".into()));
    }
    Ok(shx / sh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateBalance {
    pub covariate: String,
    /// Weighted mean per group.
    pub means: Vec<f64>,
    /// Standard deviation per group (weighted if so configured).
    pub sds: Vec<Option<f64>>,
    pub asd: Option<f64>,
    pub psd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeBalance {
    /// `unweighted` or the scheme name.
    pub scheme: String,
    pub covariates: Vec<CovariateBalance>,
    pub effective_sample_size: Vec<f64>,
    /// Covariates whose selected metric exceeds the threshold or is undefined.
    pub flagged: Vec<String>,
}

impl SchemeBalance {
    pub fn metric(&self, metric: Metric) -> Vec<Option<f64>> {
        self.covariates
            .iter()
            .map(|c| match metric {
                Metric::Asd => c.asd,
                Metric::Psd => c.psd,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub groups: Vec<String>,
    pub group_sizes: Vec<usize>,
    pub options: BalanceOptions,
    pub clamped_probabilities: usize,
    /// First entry is the unweighted baseline.
    pub balance: Vec<SchemeBalance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimResult>,
}

fn scheme_balance(
    name: &str,
    x: &DesignMatrix,
    w: Option<&[f64]>,
    h: Option<&[f64]>,
    z: &[usize],
    j: usize,
    options: &BalanceOptions,
) -> Result<SchemeBalance> {
    let mut covariates = Vec::new();
    let mut flagged = Vec::new();
    for (name, col) in x.covariates() {
        let m = group_moments(&col, w, z, j, options.weighted_var)?;
        let entry = CovariateBalance {
            covariate: name.to_string(),
            means: m.iter().map(|g| g.mean).collect(),
            sds: m.iter().map(|g| g.variance.is_finite().then(|| g.variance.sqrt())).collect(),
            asd: asd_from(&m),
            psd: psd_from(&m, target_mean(&col, h)?),
        };
        let value = match options.metric {
            Metric::Asd => entry.asd,
            Metric::Psd => entry.psd,
        };
        if value.is_none_or(|v| v > options.threshold) {
            flagged.push(name.to_string());
        }
        covariates.push(entry);
    }
    let effective_sample_size = match w {
        Some(w) => effective_sample_size(w, z, j)?,
        None => (0..j).map(|k| z.iter().filter(|&&g| g == k).count() as f64).collect(),
    };
    Ok(SchemeBalance { scheme: name.to_string(), covariates, effective_sample_size, flagged })
}

/// Balance of every design covariate, unweighted and under each scheme.
pub fn summarize_balance(
    x: &DesignMatrix,
    e: &PropensityMatrix,
    z: &[usize],
    schemes: &[WeightScheme],
    options: BalanceOptions,
) -> Result<BalanceReport> {
    if schemes.is_empty() {
        return invalid("at least one weighting scheme is required");
    }
    if x.n_rows() != e.n_rows() || z.len() != e.n_rows() {
        return invalid("design, propensity and treatment lengths differ");
    }
    let j = e.n_groups();
    let group_sizes: Vec<usize> = (0..j).map(|k| z.iter().filter(|&&g| g == k).count()).collect();
    if let Some(k) = group_sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyGroup(e.labels()[k].clone()));
    }
    let mut balance = vec![scheme_balance("unweighted", x, None, None, z, j, &options)?];
    for s in schemes {
        let tw = unit_weights(s, e, z)?;
        balance.push(scheme_balance(s.name(), x, Some(&tw.w), Some(&tw.h), z, j, &options)?);
    }
    Ok(BalanceReport {
        groups: e.labels().to_vec(),
        group_sizes,
        options,
        clamped_probabilities: e.clamped,
        balance,
        trim: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

impl BalanceReport {
    /// Text rendering: group sizes, ESS, then per-scheme means and metrics.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.trim {
            out.push_str(&t.render());
            out.push('\n');
        }
        out.push_str("Original sample size:\n");
        out.push_str(&row_line("", &self.groups));
        out.push_str(&row_line("n", &self.group_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>()));
        out.push_str("\nWeighted effective sample size:\n");
        out.push_str(&row_line("", &self.groups));
        for s in &self.balance[1..] {
            let v: Vec<String> = s.effective_sample_size.iter().map(|v| format!("{v:.3}")).collect();
            out.push_str(&row_line(&s.scheme, &v));
        }
        let metric = match self.options.metric {
            Metric::Asd => "ASD",
            Metric::Psd => "PSD",
        };
        for s in &self.balance {
            out.push_str(&format!("\nbalance by covariate ({}):\n", s.scheme));
            let mut head: Vec<String> = self.groups.iter().map(|g| format!("mean {g}")).collect();
            head.push(metric.to_string());
            out.push_str(&row_line("", &head));
            for (c, m) in s.covariates.iter().zip(s.metric(self.options.metric)) {
                let mut cells: Vec<String> = c.means.iter().map(|v| format!("{v:.3}")).collect();
                cells.push(fmt_opt(m));
                out.push_str(&row_line(&c.covariate, &cells));
            }
        }
        out
    }
}

fn row_line(name: &str, cells: &[String]) -> String {
    let mut s = format!("{name:<16}");
    for c in cells {
        s.push_str(&format!(" {c:>10}"));
    }
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoveSeries {
    pub metric: Metric,
    pub covariates: Vec<String>,
    /// One series per scheme (including unweighted); undefined values are NaN.
    pub schemes: Vec<NamedSeries>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensitySeries {
    /// Propensity column whose distribution is shown.
    pub column: String,
    pub grid: Vec<f64>,
    /// Density per treatment group, integrating to one on the grid.
    pub groups: Vec<NamedSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramSeries {
    pub column: String,
    pub edges: Vec<f64>,
    pub groups: Vec<NamedSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlotSeries {
    Love(LoveSeries),
    Density(Vec<DensitySeries>),
    Histogram(HistogramSeries),
}

pub fn love_series(report: &BalanceReport) -> LoveSeries {
    let metric = report.options.metric;
    LoveSeries {
        metric,
        covariates: report.balance[0].covariates.iter().map(|c| c.covariate.clone()).collect(),
        schemes: report
            .balance
            .iter()
            .map(|s| NamedSeries {
                name: s.scheme.clone(),
                values: s.metric(metric).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            })
            .collect(),
        threshold: report.options.threshold,
    }
}

/// Gaussian kernel density on an evenly spaced grid over [0, 1].
///
/// Silverman's bandwidth 0.9·min(sd, IQR/1.34)·n^(−1/5), never narrower than
/// the grid step; the curve is rescaled so its trapezoid integral is one.
pub fn kernel_density(values: &[f64], grid_size: usize) -> Vec<f64> {
    let step = 1.0 / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|k| k as f64 * step).collect();
    let n = values.len();
    if n == 0 {
        return vec![0.0; grid_size];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = crate::stats::sample_variance(&sorted).sqrt();
    let iqr = (quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)) / 1.34;
    let spread = match (sd.is_finite() && sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    let bw = (0.9 * spread * (n as f64).powf(-0.2)).max(step);
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|g| sorted.iter().map(|v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>())
        .collect();
    let area: f64 = dens.windows(2).map(|p| (p[0] + p[1]) * step / 2.0).sum();
    if area > 0.0 {
        dens.iter_mut().for_each(|d| *d /= area);
    }
    dens
}

fn grouped(values: &[f64], z: &[usize], k: usize) -> Vec<f64> {
    values.iter().zip(z).filter(|(_, &g)| g == k).map(|(&v, _)| v).collect()
}

/// Densities of each e_j by treatment group. Binary data show only the
/// column of the last label.
pub fn density_series(e: &PropensityMatrix, z: &[usize]) -> Vec<DensitySeries> {
    let j = e.n_groups();
    let grid: Vec<f64> = (0..DENSITY_GRID).map(|k| k as f64 / (DENSITY_GRID - 1) as f64).collect();
    let columns: Vec<usize> = if j == 2 { vec![1] } else { (0..j).collect() };
    columns
        .into_iter()
        .map(|c| {
            let col: Vec<f64> = e.values().column(c).iter().copied().collect();
            DensitySeries {
                column: e.labels()[c].clone(),
                grid: grid.clone(),
                groups: (0..j)
                    .map(|k| NamedSeries {
                        name: e.labels()[k].clone(),
                        values: kernel_density(&grouped(&col, z, k), DENSITY_GRID),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Counts of e (probability of the last label) in equal bins on [0, 1].
pub fn histogram_series(e: &PropensityMatrix, z: &[usize]) -> Result<HistogramSeries> {
    if e.n_groups() != 2 {
        return invalid("histograms are only available for binary treatments");
    }
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|k| k as f64 / HISTOGRAM_BINS as f64).collect();
    let groups = (0..2)
        .map(|k| {
            let mut counts = vec![0.0; HISTOGRAM_BINS];
            for v in grouped(&e.values().column(1).iter().copied().collect::<Vec<_>>(), z, k) {
                let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1.0;
            }
            NamedSeries { name: e.labels()[k].clone(), values: counts }
        })
        .collect();
    Ok(HistogramSeries { column: e.labels()[1].clone(), edges, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::fit_binary_logistic_matrix;
    use crate::weights::PropensitySource;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn moment_examples() {
        let m = weighted_moments(&[1.0, 2.0, 3.0], None, &all(3)).unwrap();
        assert_eq!((m.mean, m.variance), (2.0, 1.0));
        let m = weighted_moments(&[5.0, 1.0, 1.0], Some(&[2.0, 0.0, 0.0]), &all(3)).unwrap();
        assert_eq!(m.mean, 5.0);
        let m = weighted_moments(&[4.0; 5], Some(&[0.3, 1.0, 2.0, 0.1, 7.0]), &all(5)).unwrap();
        assert_eq!(m.variance, 0.0);
        assert!(weighted_moments(&[1.0], None, &[false]).is_err());
        assert!(weighted_moments(&[1.0, 2.0], Some(&[0.0, 0.0]), &all(2)).is_err());
    }

    #[test]
    fn equal_weights_match_unweighted_variance() {
        let x = [0.3, 1.7, 2.2, -0.4];
        let a = weighted_moments(&x, None, &all(4)).unwrap();
        let b = weighted_moments(&x, Some(&[2.5; 4]), &all(4)).unwrap();
        assert!((a.variance - b.variance).abs() < 1e-14);
    }

    #[test]
    fn asd_examples() {
        // means 1 and 0, both sample variances 1
        let x = [0.0, 1.0, 2.0, -1.0, 0.0, 1.0];
        let z = [0, 0, 0, 1, 1, 1];
        let v = asd(&x, None, &z, (0, 1), true).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let same = asd(&[1.0, 2.0, 1.0, 2.0], None, &[0, 0, 1, 1], (0, 1), true).unwrap();
        assert_eq!(same, Some(0.0));
        let constant = asd(&[3.0; 4], None, &[0, 0, 1, 1], (0, 1), true).unwrap();
        assert_eq!(constant, None);
    }

    #[test]
    fn psd_example() {
        // group means 0 and 2, target mean 1, variances 1
        let x = [-1.0, 0.0, 1.0, 1.0, 2.0, 3.0];
        let z = [0, 0, 0, 1, 1, 1];
        let v = psd(&x, None, None, &z, 2, true).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let same = psd(&[1.0, 2.0, 1.0, 2.0], None, None, &[0, 0, 1, 1], 2, true).unwrap();
        assert_eq!(same, Some(0.0));
    }

    fn design(cols: &[(&str, Vec<f64>)]) -> DesignMatrix {
        let n = cols[0].1.len();
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(cols.iter().map(|c| c.0.to_string()));
        DesignMatrix {
            values: DMatrix::from_fn(n, cols.len() + 1, |i, c| if c == 0 { 1.0 } else { cols[c - 1].1[i] }),
            column_names: names,
            has_intercept: true,
        }
    }

    fn simulated(n: usize, seed: u64) -> (DesignMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<usize> = (0..n)
            .map(|i| usize::from(rng.random::<f64>() < crate::glm::sigmoid(0.5 * x1[i] - x2[i])))
            .collect();
        (design(&[("x1", x1), ("x2", x2)]), z)
    }

    #[test]
    fn overlap_weights_balance_exactly() {
        let (x, z) = simulated(500, 3);
        let zf: Vec<f64> = z.iter().map(|&k| k as f64).collect();
        let fit = fit_binary_logistic_matrix(&x.values, &zf).unwrap();
        let p: Vec<f64> = fit.fitted_values.iter().copied().collect();
        let e = PropensityMatrix::from_binary(&p, vec!["0".into(), "1".into()], 1, PropensitySource::Fitted).unwrap();
        let r = summarize_balance(&x, &e, &z, &[WeightScheme::Ipw, WeightScheme::Overlap], BalanceOptions::default())
            .unwrap();
        assert_eq!(r.balance.len(), 3);
        assert_eq!(r.balance[2].scheme, "overlap");
        for c in &r.balance[2].covariates {
            assert!(c.asd.unwrap() < 1e-6, "{} {:?}", c.covariate, c.asd);
        }
        assert!(r.balance[2].flagged.is_empty());
        assert!(r.balance[0].covariates.iter().any(|c| c.asd.unwrap() > 0.1));
    }

    #[test]
    fn three_groups_take_pairwise_max() {
        let x = [0.0, 1.0, 1.0, 2.0, 4.0, 5.0];
        let z = [0, 0, 1, 1, 2, 2];
        let m = group_moments(&x, None, &z, 3, true).unwrap();
        let mut expect: f64 = 0.0;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            expect = expect.max(asd(&x, None, &z, (a, b), true).unwrap().unwrap());
        }
        assert_eq!(asd_from(&m), Some(expect));
    }

    #[test]
    fn density_integrates_to_one() {
        let step = 1.0 / (DENSITY_GRID - 1) as f64;
        let d = kernel_density(&[0.5; 40], DENSITY_GRID);
        let area: f64 = d.windows(2).map(|p| (p[0] + p[1]) * step / 2.0).sum();
        assert!((area - 1.0).abs() < 1e-3);
        let peak = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(((peak as f64 * step) - 0.5).abs() <= step);
        let spread: Vec<f64> = (0..100).map(|i| 0.2 + 0.006 * i as f64).collect();
        let d = kernel_density(&spread, DENSITY_GRID);
        let area: f64 = d.windows(2).map(|p| (p[0] + p[1]) * step / 2.0).sum();
        assert!((area - 1.0).abs() < 1e-3);
    }

    #[test]
    fn histogram_counts_and_arity() {
        let e = PropensityMatrix::from_binary(&[0.1, 0.5, 0.99, 0.0], vec!["a".into(), "b".into()], 1, PropensitySource::External)
            .unwrap();
        let h = histogram_series(&e, &[0, 1, 1, 0]).unwrap();
        assert_eq!(h.groups[0].values.iter().sum::<f64>(), 2.0);
        assert_eq!(h.groups[1].values.iter().sum::<f64>(), 2.0);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        let m = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]);
        let e3 = PropensityMatrix::new(m, vec!["a".into(), "b".into(), "c".into()], PropensitySource::External).unwrap();
        assert!(histogram_series(&e3, &[0]).is_err());
    }

    #[test]
    fn love_series_has_threshold() {
        let (x, z) = simulated(200, 5);
        let e = PropensityMatrix::from_binary(&vec![0.5; 200], vec!["0".into(), "1".into()], 1, PropensitySource::External)
            .unwrap();
        let r = summarize_balance(&x, &e, &z, &[WeightScheme::Overlap], BalanceOptions::default()).unwrap();
        let l = love_series(&r);
        assert_eq!(l.threshold, 0.1);
        assert_eq!(l.schemes.len(), 2);
        assert_eq!(l.covariates, ["x1", "x2"]);
    }

    proptest! {
        #[test]
        fn asd_symmetric_and_affine_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 8..30),
            w in proptest::collection::vec(0.1f64..3.0, 30),
            a in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0],
            b in -3.0f64..3.0,
        ) {
            let n = x.len();
            let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let w = &w[..n];
            let v = asd(&x, Some(w), &z, (0, 1), true).unwrap();
            let r = asd(&x, Some(w), &z, (1, 0), true).unwrap();
            prop_assert_eq!(v, r);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let t = asd(&y, Some(w), &z, (0, 1), true).unwrap();
            if let (Some(v), Some(t)) = (v, t) {
                prop_assert!((v - t).abs() <= 1e-8 * (1.0 + v));
            }
        }

        #[test]
        fn constant_within_group_weights_match_unweighted(
            x in proptest::collection::vec(-5.0f64..5.0, 6..30),
            c0 in 0.1f64..5.0,
            c1 in 0.1f64..5.0,
        ) {
            let n = x.len();
            let z: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let w: Vec<f64> = z.iter().map(|&g| if g == 0 { c0 } else { c1 }).collect();
            let a = asd(&x, None, &z, (0, 1), true).unwrap();
            let b = asd(&x, Some(&w), &z, (0, 1), true).unwrap();
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
            }
        }

        #[test]
        fn psd_nonnegative(x in proptest::collection::vec(-5.0f64..5.0, 6..30), h in proptest::collection::vec(0.01f64..1.0, 30)) {
            let n = x.len();
            let z: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let hs = &h[..n];
            if let Some(v) = psd(&x, Some(hs), Some(hs), &z, 3, true).unwrap() {
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn three_metric_columns_and_flags() {
        let x = design(&[("x1", vec![0.0, 1.0, 2.0, 3.0, 0.5, 5.0, 1.0, 2.0])]);
        let z = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let e = PropensityMatrix::from_binary(&[0.3, 0.4, 0.5, 0.6, 0.3, 0.7, 0.5, 0.4], vec!["0".into(), "1".into()], 1, PropensitySource::External)
            .unwrap();
        let r = summarize_balance(&x, &e, &z, &[WeightScheme::Ipw, WeightScheme::Overlap], BalanceOptions::default()).unwrap();
        let names: Vec<&str> = r.balance.iter().map(|s| s.scheme.as_str()).collect();
        assert_eq!(names, ["unweighted", "ipw", "overlap"]);
        for s in &r.balance {
            let flagged = s.covariates[0].asd.is_none_or(|v| v > 0.1);
            assert_eq!(flagged, !s.flagged.is_empty());
        }
        assert!(r.render().contains("balance by covariate (overlap)"));
    }
}
