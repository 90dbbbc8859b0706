//! Variance estimation for the weighting estimators.
//!
//! The sandwich estimator stacks, for every unit,
//!
//! ```text
//! ν_j : w_j(x) D_j (Y − m_j(x) − ν_j)
//! η_j : h(x) (m_j(x) − η_j)              (augmented only)
//! β   : propensity score
//! α_j : outcome score of group j          (augmented, fitted outcome only)
//! ```
//!
//! with μ_j = ν_j + η_j, and uses V = A⁻¹ B A⁻ᵀ with A = Σ ∂Ψ_i/∂θ and
//! B = Σ Ψ_i Ψ_iᵀ. The propensity is parameterized by baseline-category
//! logits for every J, the binary logit being the J = 2 case. Score blocks
//! for external estimates are dropped, and both are dropped for matching
//! weights because min_k e_k has kinks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::estimate::{ContrastSpec, Scale};
use crate::glm::{softmax_with_reference, FamilyKind};
use crate::stats::{quantile_sorted, two_sided_p, Z_975};
use crate::weights::{clamp_row, WeightScheme};

pub const DEFAULT_REPLICATES: usize = 50;
pub const DEFAULT_SEED: u64 = 12345;
const MAX_REDRAWS: usize = 5;
const SINGULAR_RCOND: f64 = 1e-14;

/// Propensity scores as a fitted baseline-category logit, or fixed values.
#[derive(Debug, Clone)]
pub enum PropensityInput {
    /// Design (N×q) and coefficients (q×(J−1)).
    Model { design: DMatrix<f64>, coefficients: DMatrix<f64> },
    /// N×J matrix of probabilities, treated as known.
    Fixed(DMatrix<f64>),
}

/// Group-specific outcome regressions on a common design.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub design: DMatrix<f64>,
    pub kind: FamilyKind,
    pub offset: Option<Vec<f64>>,
    /// Response on the scale the model was fitted to (counts for poisson).
    pub response: Vec<f64>,
    /// One coefficient vector per group.
    pub coefficients: Vec<DVector<f64>>,
}

impl OutcomeModel {
    /// m_j(x_i) without the offset, and its derivative in the linear predictor.
    fn mean(&self, alpha: &[f64], i: usize) -> (f64, f64) {
        let eta: f64 = self.design.row(i).iter().zip(alpha).map(|(x, a)| x * a).sum();
        (self.kind.inverse_link(eta), self.kind.mean_derivative(eta))
    }

    fn offset_at(&self, i: usize) -> f64 {
        self.offset.as_ref().map_or(0.0, |o| o[i])
    }
}

#[derive(Debug, Clone)]
pub enum OutcomeInput {
    None,
    Model(OutcomeModel),
    /// N×J predictions treated as known.
    Fixed(DMatrix<f64>),
}

/// Stacked estimating equations for one estimate.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    y: Vec<f64>,
    z: Vec<usize>,
    n_groups: usize,
    scheme: WeightScheme,
    treated: Option<usize>,
    ps: PropensityInput,
    outcome: OutcomeInput,
    theta_hat: DVector<f64>,
    pub adjustments: Vec<String>,
}

struct Layout {
    j: usize,
    eta: Option<usize>,
    beta: Option<(usize, usize)>,
    alpha: Option<(usize, usize)>,
    dim: usize,
}

/// Per-unit quantities at θ.
struct UnitEval {
    /// Clamped probabilities used in the weights.
    e: Vec<f64>,
    /// Unclamped model probabilities used in the score.
    p: Vec<f64>,
    h: f64,
    m: Vec<f64>,
    dm: Vec<f64>,
}

impl StackedSystem {
    /// `y` is on the estimation scale (rates when an offset is present).
    /// Score blocks that cannot be differentiated are converted to fixed
    /// inputs and the change is recorded in `adjustments`.
    pub fn new(
        y: Vec<f64>,
        z: Vec<usize>,
        n_groups: usize,
        scheme: WeightScheme,
        treated: Option<usize>,
        ps: PropensityInput,
        outcome: OutcomeInput,
    ) -> Result<Self> {
        let n = y.len();
        if z.len() != n || z.iter().any(|&k| k >= n_groups) {
            return invalid("treatment indices do not match the outcome vector");
        }
        let mut adjustments = Vec::new();
        let mut sys = Self {
            y,
            z,
            n_groups,
            scheme: scheme.clone(),
            treated,
            ps,
            outcome,
            theta_hat: DVector::zeros(0),
            adjustments: Vec::new(),
        };
        let matching = !scheme.is_differentiable();
        match &sys.ps {
            PropensityInput::Model { design, coefficients } => {
                if design.nrows() != n || coefficients.ncols() + 1 != n_groups {
                    return invalid("propensity model does not match the data");
                }
                if matching {
                    let e = sys.fixed_propensity();
                    sys.ps = PropensityInput::Fixed(e);
                    adjustments.push("propensity score block dropped (matching weights)".to_string());
                } else {
                    adjustments.push("propensity score block included".to_string());
                }
            }
            PropensityInput::Fixed(e) => {
                if e.nrows() != n || e.ncols() != n_groups {
                    return invalid("propensity matrix does not match the data");
                }
                adjustments.push("propensity score block dropped (external propensity scores)".to_string());
            }
        }
        match &sys.outcome {
            OutcomeInput::Model(m) => {
                if m.design.nrows() != n || m.coefficients.len() != n_groups || m.response.len() != n {
                    return invalid("outcome model does not match the data");
                }
                if matching {
                    let fixed = sys.fixed_outcome();
                    sys.outcome = OutcomeInput::Fixed(fixed);
                    adjustments.push("outcome model block dropped (matching weights)".to_string());
                } else {
                    adjustments.push("outcome model block included".to_string());
                }
            }
            OutcomeInput::Fixed(m) => {
                if m.nrows() != n || m.ncols() != n_groups {
                    return invalid("outcome predictions do not match the data");
                }
                adjustments.push("outcome model block dropped (external outcome predictions)".to_string());
            }
            OutcomeInput::None => {}
        }
        sys.adjustments = adjustments;
        sys.theta_hat = sys.solve_theta()?;
        Ok(sys)
    }

    fn fixed_propensity(&self) -> DMatrix<f64> {
        let n = self.y.len();
        let mut e = DMatrix::zeros(n, self.n_groups);
        let beta = self.beta_vector();
        for i in 0..n {
            let (row, _) = self.probabilities(beta.as_deref(), i);
            for (k, v) in row.into_iter().enumerate() {
                e[(i, k)] = v;
            }
        }
        e
    }

    fn fixed_outcome(&self) -> DMatrix<f64> {
        let n = self.y.len();
        let OutcomeInput::Model(model) = &self.outcome else { unreachable!() };
        DMatrix::from_fn(n, self.n_groups, |i, k| model.mean(model.coefficients[k].as_slice(), i).0)
    }

    fn beta_vector(&self) -> Option<Vec<f64>> {
        match &self.ps {
            PropensityInput::Model { coefficients, .. } => Some(coefficients.as_slice().to_vec()),
            PropensityInput::Fixed(_) => None,
        }
    }

    fn layout(&self) -> Layout {
        let j = self.n_groups;
        let augmented = !matches!(self.outcome, OutcomeInput::None);
        let mut dim = j;
        let eta = augmented.then(|| {
            dim += j;
            j
        });
        let beta = match &self.ps {
            PropensityInput::Model { coefficients, .. } => {
                let start = dim;
                dim += coefficients.len();
                Some((start, coefficients.nrows()))
            }
            PropensityInput::Fixed(_) => None,
        };
        let alpha = match &self.outcome {
            OutcomeInput::Model(m) => {
                let start = dim;
                let q = m.design.ncols();
                dim += q * j;
                Some((start, q))
            }
            _ => None,
        };
        Layout { j, eta, beta, alpha, dim }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    /// μ̂ = ν̂ + η̂ at the stored solution.
    pub fn mu_hat(&self) -> Vec<f64> {
        let l = self.layout();
        (0..l.j).map(|k| self.theta_hat[k] + l.eta.map_or(0.0, |s| self.theta_hat[s + k])).collect()
    }

    /// (clamped, unclamped) probabilities of unit i.
    fn probabilities(&self, beta: Option<&[f64]>, i: usize) -> (Vec<f64>, Vec<f64>) {
        match (&self.ps, beta) {
            (PropensityInput::Model { design, coefficients }, Some(beta)) => {
                let q = coefficients.nrows();
                let x = design.row(i);
                let eta: Vec<f64> = (0..self.n_groups - 1)
                    .map(|l| (0..q).map(|c| x[c] * beta[l * q + c]).sum())
                    .collect();
                let p = softmax_with_reference(&eta);
                let mut e = p.clone();
                clamp_row(&mut e);
                (e, p)
            }
            (PropensityInput::Fixed(e), _) => {
                let row: Vec<f64> = e.row(i).iter().copied().collect();
                (row.clone(), row)
            }
            _ => unreachable!("propensity coefficients missing"),
        }
    }

    fn eval(&self, theta: &DVector<f64>, l: &Layout, i: usize) -> UnitEval {
        let beta = l.beta.map(|(s, q)| &theta.as_slice()[s..s + q * (l.j - 1)]);
        let (e, p) = self.probabilities(beta, i);
        let h = self.scheme.tilt(&e, self.treated);
        let (m, dm) = match &self.outcome {
            OutcomeInput::None => (vec![0.0; l.j], vec![0.0; l.j]),
            OutcomeInput::Fixed(m) => (m.row(i).iter().copied().collect(), vec![0.0; l.j]),
            OutcomeInput::Model(model) => {
                let (s, q) = l.alpha.expect("alpha block");
                (0..l.j).map(|k| model.mean(&theta.as_slice()[s + k * q..s + (k + 1) * q], i)).unzip()
            }
        };
        UnitEval { e, p, h, m, dm }
    }

    /// Closed-form ν̂ and η̂ given the nuisance estimates.
    fn solve_theta(&self) -> Result<DVector<f64>> {
        let l = self.layout();
        let mut theta = DVector::zeros(l.dim);
        if let (Some((s, _)), PropensityInput::Model { coefficients, .. }) = (l.beta, &self.ps) {
            theta.rows_mut(s, coefficients.len()).copy_from_slice(coefficients.as_slice());
        }
        if let (Some((s, q)), OutcomeInput::Model(m)) = (l.alpha, &self.outcome) {
            for (k, a) in m.coefficients.iter().enumerate() {
                theta.rows_mut(s + k * q, q).copy_from(a);
            }
        }
        let mut num = vec![0.0; l.j];
        let mut den = vec![0.0; l.j];
        let mut hm = vec![0.0; l.j];
        let mut sh = 0.0;
        for i in 0..self.y.len() {
            let u = self.eval(&theta, &l, i);
            let k = self.z[i];
            let w = u.h / u.e[k];
            num[k] += w * (self.y[i] - u.m[k]);
            den[k] += w;
            sh += u.h;
            for (acc, m) in hm.iter_mut().zip(&u.m) {
                *acc += u.h * m;
            }
        }
        for k in 0..l.j {
            if den[k] <= 0.0 {
                return Err(Error::ZeroWeight(format!("group {k} has zero total weight")));
            }
            theta[k] = num[k] / den[k];
            if let Some(s) = l.eta {
                theta[s + k] = hm[k] / sh;
            }
        }
        Ok(theta)
    }

    /// Ψ_i(θ) for every unit, N×dim.
    pub fn psi_matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let l = self.layout();
        let n = self.y.len();
        let mut out = DMatrix::zeros(n, l.dim);
        for i in 0..n {
            let u = self.eval(theta, &l, i);
            let zi = self.z[i];
            out[(i, zi)] = u.h / u.e[zi] * (self.y[i] - u.m[zi] - theta[zi]);
            if let Some(s) = l.eta {
                for k in 0..l.j {
                    out[(i, s + k)] = u.h * (u.m[k] - theta[s + k]);
                }
            }
            if let (Some((s, q)), PropensityInput::Model { design, .. }) = (l.beta, &self.ps) {
                for k in 1..l.j {
                    let r = f64::from(u8::from(zi == k)) - u.p[k];
                    for c in 0..q {
                        out[(i, s + (k - 1) * q + c)] = design[(i, c)] * r;
                    }
                }
            }
            if let (Some((s, q)), OutcomeInput::Model(m)) = (l.alpha, &self.outcome) {
                let a = &theta.as_slice()[s + zi * q..s + (zi + 1) * q];
                let eta: f64 = m.design.row(i).iter().zip(a).map(|(x, a)| x * a).sum::<f64>() + m.offset_at(i);
                let r = m.response[i] - m.kind.inverse_link(eta);
                for c in 0..q {
                    out[(i, s + zi * q + c)] = m.design[(i, c)] * r;
                }
            }
        }
        out
    }

    /// Σ_i Ψ_i(θ).
    pub fn psi_sum(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.psi_matrix(theta).row_sum().transpose()
    }

    /// Analytic A = Σ_i ∂Ψ_i/∂θᵀ.
    pub fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let l = self.layout();
        let j = l.j;
        let mut a = DMatrix::zeros(l.dim, l.dim);
        for i in 0..self.y.len() {
            let u = self.eval(theta, &l, i);
            let zi = self.z[i];
            // ∂h/∂η_l and ∂w_zi/∂η_l for l = 1..J−1
            let (dh, dw) = match l.beta {
                Some(_) => {
                    let gh = self.scheme.tilt_gradient(&u.e, self.treated).expect("differentiable scheme");
                    let de = |k: usize, lv: usize| u.e[k] * (f64::from(u8::from(k == lv)) - u.e[lv]);
                    let ez = u.e[zi];
                    let dh: Vec<f64> = (1..j).map(|lv| (0..j).map(|k| gh[k] * de(k, lv)).sum()).collect();
                    let dw: Vec<f64> = (1..j)
                        .map(|lv| {
                            (0..j)
                                .map(|k| {
                                    let dwk = (gh[k] * ez - u.h * f64::from(u8::from(k == zi))) / (ez * ez);
                                    dwk * de(k, lv)
                                })
                                .sum()
                        })
                        .collect();
                    (dh, dw)
                }
                None => (Vec::new(), Vec::new()),
            };
            let w = u.h / u.e[zi];
            let r = self.y[i] - u.m[zi] - theta[zi];
            a[(zi, zi)] -= w;
            if let (Some((s, q)), PropensityInput::Model { design, .. }) = (l.beta, &self.ps) {
                for lv in 1..j {
                    for c in 0..q {
                        let x = design[(i, c)];
                        a[(zi, s + (lv - 1) * q + c)] += r * dw[lv - 1] * x;
                        if let Some(se) = l.eta {
                            for k in 0..j {
                                a[(se + k, s + (lv - 1) * q + c)] += (u.m[k] - theta[se + k]) * dh[lv - 1] * x;
                            }
                        }
                    }
                }
                let xr = design.row(i);
                for k in 1..j {
                    for lv in 1..j {
                        let v = u.p[k] * (f64::from(u8::from(k == lv)) - u.p[lv]);
                        for c1 in 0..q {
                            let xv = xr[c1] * v;
                            for c2 in 0..q {
                                a[(s + (k - 1) * q + c1, s + (lv - 1) * q + c2)] -= xv * xr[c2];
                            }
                        }
                    }
                }
            }
            if let Some(se) = l.eta {
                for k in 0..j {
                    a[(se + k, se + k)] -= u.h;
                }
            }
            if let (Some((s, q)), OutcomeInput::Model(m)) = (l.alpha, &self.outcome) {
                let xo = m.design.row(i);
                for c in 0..q {
                    a[(zi, s + zi * q + c)] -= w * u.dm[zi] * xo[c];
                }
                if let Some(se) = l.eta {
                    for k in 0..j {
                        for c in 0..q {
                            a[(se + k, s + k * q + c)] += u.h * u.dm[k] * xo[c];
                        }
                    }
                }
                let at = &theta.as_slice()[s + zi * q..s + (zi + 1) * q];
                let eta: f64 = xo.iter().zip(at).map(|(x, a)| x * a).sum::<f64>() + m.offset_at(i);
                let v = m.kind.mean_derivative(eta);
                for c1 in 0..q {
                    for c2 in 0..q {
                        a[(s + zi * q + c1, s + zi * q + c2)] -= v * xo[c1] * xo[c2];
                    }
                }
            }
        }
        a
    }

    /// Central finite-difference Jacobian of Σ Ψ_i, for checking.
    pub fn numeric_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = theta.len();
        let mut out = DMatrix::zeros(d, d);
        for c in 0..d {
            let step = 1e-6 * (1.0 + theta[c].abs());
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[c] += step;
            dn[c] -= step;
            let col = (self.psi_sum(&up) - self.psi_sum(&dn)) / (2.0 * step);
            out.set_column(c, &col);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Sandwich,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceResult {
    pub method: VarianceMethod,
    #[serde(serialize_with = "serialize_matrix")]
    pub vcov_mu: DMatrix<f64>,
    pub adjustments: Vec<String>,
    /// Replicate estimates of μ, one row per successful replicate.
    #[serde(serialize_with = "serialize_opt_matrix", skip_serializing_if = "Option::is_none")]
    pub bootstrap_draws: Option<DMatrix<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_replicates: Option<usize>,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

fn serialize_opt_matrix<S: serde::Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(matrix_rows).serialize(s)
}

/// Empirical sandwich covariance of μ̂.
pub fn sandwich_variance(sys: &StackedSystem) -> Result<VarianceResult> {
    let theta = sys.theta_hat();
    let psi = sys.psi_matrix(theta);
    let b = psi.tr_mul(&psi);
    let a = sys.jacobian(theta);
    let sv = a.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if rcond.is_nan() || rcond <= SINGULAR_RCOND {
        return Err(Error::SingularJacobian { rcond });
    }
    let a_inv = a.try_inverse().ok_or(Error::SingularJacobian { rcond })?;
    let l = sys.layout();
    // rows of A⁻¹ for μ_j = ν_j + η_j
    let mut lr = DMatrix::zeros(l.j, l.dim);
    for k in 0..l.j {
        let mut row = a_inv.row(k).clone_owned();
        if let Some(s) = l.eta {
            row += a_inv.row(s + k);
        }
        lr.set_row(k, &row);
    }
    let v = &lr * b * lr.transpose();
    let vcov_mu = (&v + v.transpose()) * 0.5;
    Ok(VarianceResult {
        method: VarianceMethod::Sandwich,
        vcov_mu,
        adjustments: sys.adjustments.clone(),
        bootstrap_draws: None,
        failed_replicates: None,
    })
}

/// Resampled row indices for replicate `r`, attempt `attempt`. Each pair
/// gets its own ChaCha stream so replicates are order independent.
pub fn resample_indices(n: usize, seed: u64, r: usize, attempt: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((r * 8 + attempt) as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Nonparametric bootstrap of μ̂: `estimate` reruns the whole analysis on
/// the given row indices. A failing replicate is redrawn up to five times;
/// more than 10% failures aborts.
pub fn bootstrap_variance<F>(n: usize, replicates: usize, seed: u64, estimate: F) -> Result<VarianceResult>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if replicates < 2 {
        return invalid("the bootstrap needs at least 2 replicates");
    }
    let results: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| (0..=MAX_REDRAWS).find_map(|attempt| estimate(&resample_indices(n, seed, r, attempt)).ok()))
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed * 10 > replicates {
        return Err(Error::Bootstrap { failed, total: replicates });
    }
    let ok: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let j = ok[0].len();
    let draws = DMatrix::from_fn(ok.len(), j, |r, k| ok[r][k]);
    Ok(VarianceResult {
        method: VarianceMethod::Bootstrap,
        vcov_mu: sample_covariance(&draws),
        adjustments: Vec::new(),
        bootstrap_draws: Some(draws),
        failed_replicates: Some(failed),
    })
}

/// Column covariance with divisor R − 1.
pub fn sample_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let r = draws.nrows();
    let mean = draws.row_mean();
    let mut c = draws.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.tr_mul(&c) / (r as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastRow {
    pub label: String,
    pub coefficients: Vec<f64>,
    pub estimate: f64,
    pub std_error: f64,
    pub lwr: f64,
    pub upr: f64,
    pub z_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub scale: Scale,
    pub method: VarianceMethod,
    /// True when estimate and limits were exponentiated (RR/OR only).
    pub exponentiated: bool,
    pub rows: Vec<ContrastRow>,
}

fn z_and_p(est: f64, se: f64) -> (f64, f64) {
    if se > 0.0 {
        let z = est / se;
        (z, two_sided_p(z))
    } else if est == 0.0 {
        (0.0, 1.0)
    } else {
        (est.signum() * f64::INFINITY, 0.0)
    }
}

/// Contrast estimates, standard errors, 95% intervals and p-values.
///
/// With a sandwich covariance the delta method gives the standard error and
/// a symmetric normal interval. With bootstrap draws the standard error is
/// the spread of the transformed replicate contrasts and the interval their
/// 2.5% and 97.5% quantiles.
pub fn delta_transform(v: &VarianceResult, mu: &[f64], c: &ContrastSpec, scale: Scale) -> Result<SummaryTable> {
    let j = mu.len();
    if c.matrix.ncols() != j || v.vcov_mu.nrows() != j {
        return invalid("contrast, means and covariance dimensions differ");
    }
    let g = mu.iter().map(|&m| scale.transform(m)).collect::<Result<Vec<(f64, f64)>>>()?;
    let draws_g = match &v.bootstrap_draws {
        Some(d) => Some(
            (0..d.nrows())
                .map(|r| (0..j).map(|k| scale.transform(d[(r, k)]).map(|t| t.0)).collect::<Result<Vec<f64>>>())
                .collect::<Result<Vec<Vec<f64>>>>()?,
        ),
        None => None,
    };
    let mut rows = Vec::new();
    for k in 0..c.n_contrasts() {
        let a: Vec<f64> = c.matrix.row(k).iter().copied().collect();
        let est: f64 = a.iter().zip(&g).map(|(a, t)| a * t.0).sum();
        let (se, lwr, upr) = match &draws_g {
            None => {
                let grad = DVector::from_iterator(j, a.iter().zip(&g).map(|(a, t)| a * t.1));
                let var = (grad.transpose() * &v.vcov_mu * &grad)[0].max(0.0);
                let se = var.sqrt();
                (se, est - Z_975 * se, est + Z_975 * se)
            }
            Some(dg) => {
                let mut cd: Vec<f64> = dg.iter().map(|row| a.iter().zip(row).map(|(a, t)| a * t).sum()).collect();
                let se = crate::stats::sample_variance(&cd).max(0.0).sqrt();
                cd.sort_by(f64::total_cmp);
                (se, quantile_sorted(&cd, 0.025), quantile_sorted(&cd, 0.975))
            }
        };
        let (z_value, p_value) = z_and_p(est, se);
        rows.push(ContrastRow {
            label: c.labels[k].clone(),
            coefficients: a,
            estimate: est,
            std_error: se,
            lwr,
            upr,
            z_value,
            p_value,
        });
    }
    Ok(SummaryTable { scale, method: v.method, exponentiated: false, rows })
}

impl SummaryTable {
    /// Maps estimate and limits of log-RR/log-OR contrasts back to ratios.
    pub fn exponentiate(&mut self) -> Result<()> {
        if self.scale == Scale::Dif {
            return invalid("only RR and OR contrasts can be exponentiated");
        }
        if !self.exponentiated {
            for r in &mut self.rows {
                r.estimate = r.estimate.exp();
                r.lwr = r.lwr.exp();
                r.upr = r.upr.exp();
            }
            self.exponentiated = true;
        }
        Ok(())
    }

    /// Aligned text table. `ci = false` shows z statistics instead of limits.
    pub fn render(&self, groups: &[String], ci: bool) -> String {
        let mut out = format!("Original group value:  {}\n\n", groups.join(", "));
        let scale = match (self.scale, self.exponentiated) {
            (Scale::Dif, _) => "Treatment effect estimates (difference)",
            (Scale::Rr, false) => "Treatment effect estimates (log risk ratio)",
            (Scale::Rr, true) => "Treatment effect estimates (risk ratio)",
            (Scale::Or, false) => "Treatment effect estimates (log odds ratio)",
            (Scale::Or, true) => "Treatment effect estimates (odds ratio)",
        };
        let lw = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(8);
        out.push_str("Contrast:\n");
        out.push_str(&format!("{:lw$}", ""));
        for g in groups {
            out.push_str(&format!(" {g:>5}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:lw$}", r.label));
            for a in &r.coefficients {
                out.push_str(&format!(" {:>5}", format_coef(*a)));
            }
            out.push('\n');
        }
        out.push_str(&format!("\n{scale}:\n"));
        let head: [&str; 5] =
            if ci { ["Estimate", "Std.Error", "lwr", "upr", "Pr(>|z|)"] } else { ["Estimate", "Std.Error", "z value", "Pr(>|z|)", ""] };
        out.push_str(&format!("{:lw$}", ""));
        for h in head.iter().filter(|h| !h.is_empty()) {
            out.push_str(&format!(" {h:>10}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:lw$}", r.label));
            let cells = if ci {
                vec![r.estimate, r.std_error, r.lwr, r.upr]
            } else {
                vec![r.estimate, r.std_error, r.z_value]
            };
            for v in cells {
                out.push_str(&format!(" {v:>10.6}"));
            }
            out.push_str(&format!(" {:>10} {}\n", format_p(r.p_value), stars(r.p_value)));
        }
        out.push_str("---\nSignif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1\n");
        out
    }
}

fn format_coef(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{a:.0}")
    } else {
        format!("{a}")
    }
}

fn format_p(p: f64) -> String {
    if p < 2.2e-16 {
        "< 2.2e-16".to_string()
    } else if p < 1e-4 {
        format!("{p:.3e}")
    } else {
        format!("{p:.6}")
    }
}

fn stars(p: f64) -> &'static str {
    match p {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        p if p < 0.1 => ".",
        _ => "",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{augmented_means, hajek_means};
    use crate::glm::{fit_binary_logistic_matrix, fit_multinomial_indices, fit_outcome_matrix, GlmFamily};
    use crate::weights::{unit_weights, PropensityMatrix, PropensitySource};
    use rand_distr::{Distribution, StandardNormal};

    fn labels(j: usize) -> Vec<String> {
        (0..j).map(|k| k.to_string()).collect()
    }

    #[test]
    fn single_mean_sandwich() {
        let y = vec![1.0, 4.0, 2.0, 7.0, 3.0];
        let n = y.len() as f64;
        let sys = StackedSystem::new(
            y.clone(),
            vec![0; 5],
            1,
            WeightScheme::Ipw,
            None,
            PropensityInput::Fixed(DMatrix::from_element(5, 1, 1.0)),
            OutcomeInput::None,
        )
        .unwrap();
        let v = sandwich_variance(&sys).unwrap();
        let ybar = y.iter().sum::<f64>() / n;
        let oracle = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / (n * n);
        assert!((v.vcov_mu[(0, 0)] - oracle).abs() < 1e-14);
        assert!((sys.mu_hat()[0] - ybar).abs() < 1e-14);
    }

    struct Instance {
        x: DMatrix<f64>,
        z: Vec<usize>,
        y: Vec<f64>,
        ycount: Vec<f64>,
        offset: Vec<f64>,
    }

    fn instance(n: usize, j: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let z: Vec<usize> = (0..n)
            .map(|i| {
                let eta: Vec<f64> = (1..j).map(|k| 0.3 * k as f64 * x[(i, 1)] - 0.4 * x[(i, 2)]).collect();
                let p = softmax_with_reference(&eta);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                p.iter().position(|pk| {
                    acc += pk;
                    u < acc
                })
                .unwrap_or(j - 1)
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 1)] + 0.5 * z[i] as f64 + Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let offset: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let ycount: Vec<f64> = (0..n)
            .map(|i| {
                let mu = (0.2 * x[(i, 1)] + offset[i] + 0.3).exp();
                rand_distr::Poisson::new(mu).unwrap().sample(&mut rng)
            })
            .collect();
        Instance { x, z, y, ycount, offset }
    }

    fn ps_fit(inst: &Instance, j: usize) -> (DMatrix<f64>, PropensityMatrix) {
        if j == 2 {
            let zf: Vec<f64> = inst.z.iter().map(|&k| k as f64).collect();
            let f = fit_binary_logistic_matrix(&inst.x, &zf).unwrap();
            let p: Vec<f64> = f.fitted_values.iter().copied().collect();
            (f.coefficients, PropensityMatrix::from_binary(&p, labels(2), 1, PropensitySource::Fitted).unwrap())
        } else {
            let f = fit_multinomial_indices(&inst.x, &inst.z, j).unwrap();
            let e = PropensityMatrix::new(f.fitted_values.clone(), labels(j), PropensitySource::Fitted).unwrap();
            (f.coefficients, e)
        }
    }

    fn outcome(inst: &Instance, j: usize, family: &GlmFamily, y: &[f64]) -> OutcomeModel {
        let coefficients = (0..j)
            .map(|k| {
                let mask: Vec<bool> = inst.z.iter().map(|&g| g == k).collect();
                let f = fit_outcome_matrix(&inst.x, y, family, &mask).unwrap();
                DVector::from_column_slice(f.coefficients.as_slice())
            })
            .collect();
        OutcomeModel {
            design: inst.x.clone(),
            kind: family.kind,
            offset: family.offset.clone(),
            response: y.to_vec(),
            coefficients,
        }
    }

    fn schemes() -> Vec<WeightScheme> {
        vec![
            WeightScheme::Ipw,
            WeightScheme::Treated { group: None },
            WeightScheme::Overlap,
            WeightScheme::Entropy,
            WeightScheme::Matching,
        ]
    }

    fn check(sys: &StackedSystem) {
        let theta = sys.theta_hat();
        let s = sys.psi_sum(theta);
        assert!(s.amax() < 1e-6, "score identity {}", s.amax());
        let a = sys.jacobian(theta);
        let num = sys.numeric_jacobian(theta);
        let scale = a.amax();
        for (x, y) in a.iter().zip(num.iter()) {
            assert!((x - y).abs() <= 1e-5 * scale.max(1.0), "analytic {x} vs numeric {y}");
        }
        let v = sandwich_variance(sys).unwrap();
        assert!((&v.vcov_mu - v.vcov_mu.transpose()).amax() < 1e-12);
        assert!(v.vcov_mu.clone().symmetric_eigen().eigenvalues.min() > -1e-10);
    }

    #[test]
    fn hajek_system_identities() {
        for (seed, j) in [(1, 2), (2, 3)] {
            let inst = instance(60, j, seed);
            let (beta, e) = ps_fit(&inst, j);
            for s in schemes() {
                let t = s.treated_index(&labels(j)).unwrap();
                let sys = StackedSystem::new(
                    inst.y.clone(),
                    inst.z.clone(),
                    j,
                    s.clone(),
                    t,
                    PropensityInput::Model { design: inst.x.clone(), coefficients: beta.clone() },
                    OutcomeInput::None,
                )
                .unwrap();
                let tw = unit_weights(&s, &e, &inst.z).unwrap();
                let mu = hajek_means(&inst.y, &tw.w, &inst.z, j).unwrap();
                for (a, b) in sys.mu_hat().iter().zip(&mu) {
                    assert!((a - b).abs() < 1e-10);
                }
                check(&sys);
            }
        }
    }

    #[test]
    fn augmented_system_identities() {
        for (seed, j) in [(3, 2), (4, 3)] {
            let inst = instance(80, j, seed);
            let (beta, e) = ps_fit(&inst, j);
            let gauss = outcome(&inst, j, &GlmFamily::gaussian(), &inst.y);
            let pois_family = GlmFamily::poisson(Some(inst.offset.clone()));
            let pois = outcome(&inst, j, &pois_family, &inst.ycount);
            let rates: Vec<f64> = inst.ycount.iter().zip(&inst.offset).map(|(y, o)| y / o.exp()).collect();
            for s in schemes() {
                let t = s.treated_index(&labels(j)).unwrap();
                for (model, y) in [(&gauss, &inst.y), (&pois, &rates)] {
                    let sys = StackedSystem::new(
                        y.clone(),
                        inst.z.clone(),
                        j,
                        s.clone(),
                        t,
                        PropensityInput::Model { design: inst.x.clone(), coefficients: beta.clone() },
                        OutcomeInput::Model(model.clone()),
                    )
                    .unwrap();
                    let tw = unit_weights(&s, &e, &inst.z).unwrap();
                    let m = DMatrix::from_fn(inst.y.len(), j, |i, k| {
                        model.mean(model.coefficients[k].as_slice(), i).0
                    });
                    let mu = augmented_means(y, &tw.w, &inst.z, &tw.h, &m).unwrap();
                    for (a, b) in sys.mu_hat().iter().zip(&mu) {
                        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                    }
                    check(&sys);
                }
            }
        }
    }

    #[test]
    fn matching_drops_score_blocks() {
        let inst = instance(50, 2, 9);
        let (beta, _) = ps_fit(&inst, 2);
        let sys = StackedSystem::new(
            inst.y.clone(),
            inst.z.clone(),
            2,
            WeightScheme::Matching,
            None,
            PropensityInput::Model { design: inst.x.clone(), coefficients: beta },
            OutcomeInput::Model(outcome(&inst, 2, &GlmFamily::gaussian(), &inst.y)),
        )
        .unwrap();
        assert!(sys.adjustments.iter().any(|a| a == "propensity score block dropped (matching weights)"));
        assert!(sys.adjustments.iter().any(|a| a == "outcome model block dropped (matching weights)"));
        assert_eq!(sys.dim(), 4);
        check(&sys);
    }

    #[test]
    fn contrast_variance_is_quadratic_form() {
        let v = VarianceResult {
            method: VarianceMethod::Sandwich,
            vcov_mu: DMatrix::from_row_slice(3, 3, &[0.04, 0.01, 0.0, 0.01, 0.09, 0.02, 0.0, 0.02, 0.16]),
            adjustments: vec![],
            bootstrap_draws: None,
            failed_replicates: None,
        };
        let c = ContrastSpec::parse("1,-1,0;1,1,-2", 3).unwrap();
        let t = delta_transform(&v, &[0.2, 0.4, 0.8], &c, Scale::Dif).unwrap();
        for (k, r) in t.rows.iter().enumerate() {
            let a = DVector::from_iterator(3, c.matrix.row(k).iter().copied());
            let q = (a.transpose() * &v.vcov_mu * &a)[0];
            assert!((r.std_error.powi(2) - q).abs() < 1e-15);
            assert!(r.lwr <= r.estimate && r.estimate <= r.upr);
            assert_eq!(r.p_value < 0.05, r.lwr > 0.0 || r.upr < 0.0);
        }
        // single-parameter log transform
        let c1 = ContrastSpec::parse("1,0,0", 3).unwrap();
        let t = delta_transform(&v, &[0.2, 0.4, 0.8], &c1, Scale::Rr).unwrap();
        assert!((t.rows[0].std_error.powi(2) - 0.04 / 0.04).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_gives_point_interval() {
        let v = VarianceResult {
            method: VarianceMethod::Sandwich,
            vcov_mu: DMatrix::zeros(2, 2),
            adjustments: vec![],
            bootstrap_draws: None,
            failed_replicates: None,
        };
        let c = ContrastSpec::pairwise(&labels(2));
        let t = delta_transform(&v, &[3.0, 3.0], &c, Scale::Dif).unwrap();
        let r = &t.rows[0];
        assert_eq!((r.std_error, r.lwr, r.upr, r.p_value), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn exponentiation() {
        let mut t = SummaryTable {
            scale: Scale::Rr,
            method: VarianceMethod::Sandwich,
            exponentiated: false,
            rows: vec![ContrastRow {
                label: "Contrast 1".into(),
                coefficients: vec![1.0, -1.0],
                estimate: 0.607027,
                std_error: 0.115766,
                lwr: 0.380120,
                upr: 0.833930,
                z_value: 0.0,
                p_value: 0.0,
            }],
        };
        t.exponentiate().unwrap();
        let r = &t.rows[0];
        // agreement to 6 significant digits, scaled to a common exponent
        let agree = |a: f64, b: f64| {
            let scale = 10f64.powf(b.abs().log10().floor());
            ((a - b) / scale).abs() < 1e-5
        };
        assert!(agree(r.estimate, 1.834968));
        assert!(agree(r.lwr, 1.462460));
        assert!(agree(r.upr, 2.302358));
        t.scale = Scale::Dif;
        t.exponentiated = false;
        assert!(t.exponentiate().is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_counts_failures() {
        let y: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let f = |idx: &[usize]| Ok(vec![idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64]);
        let a = bootstrap_variance(40, 30, 7, f).unwrap();
        let b = bootstrap_variance(40, 30, 7, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failed_replicates, Some(0));
        let c = bootstrap_variance(40, 30, 8, f).unwrap();
        assert_ne!(a.bootstrap_draws, c.bootstrap_draws);
        let constant = bootstrap_variance(40, 20, 1, |_| Ok(vec![2.0, 2.0])).unwrap();
        assert_eq!(constant.vcov_mu, DMatrix::zeros(2, 2));
        let always = bootstrap_variance(40, 20, 1, |_| Err(Error::ZeroWeight("x".into())));
        assert!(matches!(always, Err(Error::Bootstrap { failed: 20, total: 20 })));
        assert!(bootstrap_variance(40, 1, 1, f).is_err());
    }

    #[test]
    fn bootstrap_percentile_interval() {
        let draws = DMatrix::from_fn(41, 2, |r, k| if k == 0 { 0.0 } else { r as f64 });
        let v = VarianceResult {
            method: VarianceMethod::Bootstrap,
            vcov_mu: sample_covariance(&draws),
            adjustments: vec![],
            bootstrap_draws: Some(draws),
            failed_replicates: Some(0),
        };
        let t = delta_transform(&v, &[0.0, 20.0], &ContrastSpec::pairwise(&labels(2)), Scale::Dif).unwrap();
        assert!((t.rows[0].lwr - 1.0).abs() < 1e-12);
        assert!((t.rows[0].upr - 39.0).abs() < 1e-12);
        assert!((t.rows[0].std_error.powi(2) - v.vcov_mu[(1, 1)]).abs() < 1e-9);
    }

    #[test]
    fn render_table() {
        let v = VarianceResult {
            method: VarianceMethod::Sandwich,
            vcov_mu: DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 0.02]),
            adjustments: vec![],
            bootstrap_draws: None,
            failed_replicates: None,
        };
        let t = delta_transform(&v, &[0.3, 0.6], &ContrastSpec::pairwise(&labels(2)), Scale::Dif).unwrap();
        let s = t.render(&labels(2), true);
        assert!(s.contains("Estimate") && s.contains("lwr") && s.contains("1 - 0"));
        let s = t.render(&labels(2), false);
        assert!(s.contains("z value") && !s.contains("lwr"));
    }
}
