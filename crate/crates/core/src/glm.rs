//! Maximum-likelihood GLM fitting with canonical links.
//!
//! Binary logistic, Gaussian and Poisson models are fitted by iteratively
//! reweighted least squares; the baseline-category multinomial logit by
//! Newton's method. Both halve the step (at most 10 times) when the deviance
//! increases and stop when the relative deviance change drops below 1e-8
//! and the score is numerically zero, or fail after 100 iterations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const DEVIANCE_TOLERANCE: f64 = 1e-8;
pub const SCORE_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    BinomialLogit,
    MultinomialLogit,
    GaussianIdentity,
    PoissonLog,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(FamilyKind::GaussianIdentity),
            "binomial" => Ok(FamilyKind::BinomialLogit),
            "poisson" => Ok(FamilyKind::PoissonLog),
            other => invalid(format!("unknown family `{other}` (gaussian | binomial | poisson)")),
        }
    }
}

/// Outcome family and optional per-unit log-exposure offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    pub offset: Option<Vec<f64>>,
}

impl GlmFamily {
    pub fn new(kind: FamilyKind, offset: Option<Vec<f64>>) -> Result<Self> {
        if offset.is_some() && kind != FamilyKind::PoissonLog {
            return invalid("an offset is only valid for the poisson family");
        }
        if kind == FamilyKind::MultinomialLogit {
            return invalid("use fit_multinomial_logistic for multinomial responses");
        }
        Ok(Self { kind, offset })
    }

    pub fn gaussian() -> Self {
        Self { kind: FamilyKind::GaussianIdentity, offset: None }
    }

    pub fn binomial() -> Self {
        Self { kind: FamilyKind::BinomialLogit, offset: None }
    }

    pub fn poisson(offset: Option<Vec<f64>>) -> Self {
        Self { kind: FamilyKind::PoissonLog, offset }
    }
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl FamilyKind {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => sigmoid(eta),
            FamilyKind::GaussianIdentity => eta,
            FamilyKind::PoissonLog => eta.exp(),
            FamilyKind::MultinomialLogit => unreachable!("multinomial has a vector link"),
        }
    }

    /// dμ/dη, which for a canonical link equals the variance function.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => sigmoid(eta) * sigmoid(-eta),
            FamilyKind::GaussianIdentity => 1.0,
            FamilyKind::PoissonLog => eta.exp(),
            FamilyKind::MultinomialLogit => unreachable!(),
        }
    }

    /// y - μ, computed from η so that it stays accurate for extreme logits.
    fn residual(self, y: f64, eta: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => y * sigmoid(-eta) - (1.0 - y) * sigmoid(eta),
            _ => y - self.inverse_link(eta),
        }
    }

    /// Log-likelihood of one observation up to terms free of η.
    fn log_likelihood(self, y: f64, eta: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => y * eta - softplus(eta),
            FamilyKind::GaussianIdentity => -0.5 * (y - eta).powi(2),
            FamilyKind::PoissonLog => y * eta - eta.exp(),
            FamilyKind::MultinomialLogit => unreachable!(),
        }
    }

    fn unit_deviance(self, y: f64, eta: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => 2.0 * (softplus(eta) - y * eta),
            FamilyKind::GaussianIdentity => (y - eta).powi(2),
            FamilyKind::PoissonLog => {
                let mu = eta.exp();
                let ylog = if y > 0.0 { y * (y.ln() - eta) } else { 0.0 };
                2.0 * (ylog - (y - mu))
            }
            FamilyKind::MultinomialLogit => unreachable!(),
        }
    }

    fn start_mean(self, y: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => (y + 0.5) / 2.0,
            FamilyKind::GaussianIdentity => y,
            FamilyKind::PoissonLog => y + 0.1,
            FamilyKind::MultinomialLogit => unreachable!(),
        }
    }

    fn link(self, mu: f64) -> f64 {
        match self {
            FamilyKind::BinomialLogit => (mu / (1.0 - mu)).ln(),
            FamilyKind::GaussianIdentity => mu,
            FamilyKind::PoissonLog => mu.ln(),
            FamilyKind::MultinomialLogit => unreachable!(),
        }
    }
}

/// A fitted GLM. Coefficients are a q×K matrix (K = 1, or J−1 for the
/// multinomial logit, column k holding the logit of level k+1 against the
/// first level). Fitted values cover every row of the design, including
/// rows outside the fitting subset.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub kind: FamilyKind,
    pub coefficients: DMatrix<f64>,
    /// N×1 means, or N×J level probabilities for the multinomial logit.
    pub fitted_values: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    design: DMatrix<f64>,
    /// Response per row (level index for multinomial).
    response: Vec<f64>,
    subset: Vec<bool>,
    offset: Option<Vec<f64>>,
    n_levels: usize,
}

impl GlmFit {
    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn subset(&self) -> &[bool] {
        &self.subset
    }

    pub fn offset(&self) -> Option<&[f64]> {
        self.offset.as_deref()
    }

    /// Coefficients flattened level-major: `[β_1; β_2; …]`.
    pub fn coefficient_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.coefficients.as_slice())
    }

    pub fn coefficients_from_vector(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.coefficients.nrows(), self.coefficients.ncols(), v.as_slice())
    }

    fn linear_predictor(&self, coef: &DMatrix<f64>, i: usize) -> DVector<f64> {
        let row = self.design.row(i);
        let mut eta = (row * coef).transpose();
        if let Some(o) = &self.offset {
            eta.add_scalar_mut(o[i]);
        }
        eta
    }

    /// Mean (or probability) of unit `i` under `coef`, and dμ/dη.
    pub fn mean_at(&self, coef: &DMatrix<f64>, i: usize) -> (f64, f64) {
        let eta = self.linear_predictor(coef, i)[0];
        (self.kind.inverse_link(eta), self.kind.mean_derivative(eta))
    }

    /// Log-likelihood contribution of unit `i` (zero outside the subset).
    pub fn unit_log_likelihood(&self, coef: &DMatrix<f64>, i: usize) -> f64 {
        if !self.subset[i] {
            return 0.0;
        }
        let eta = self.linear_predictor(coef, i);
        match self.kind {
            FamilyKind::MultinomialLogit => {
                let probs = softmax_with_reference(eta.as_slice());
                probs[self.response[i] as usize].ln()
            }
            k => k.log_likelihood(self.response[i], eta[0]),
        }
    }

    /// Score contribution of unit `i` at `coef` (level-major, length qK).
    pub fn unit_score_at(&self, coef: &DMatrix<f64>, i: usize) -> DVector<f64> {
        let q = self.design.ncols();
        let mut s = DVector::zeros(coef.len());
        if !self.subset[i] {
            return s;
        }
        let eta = self.linear_predictor(coef, i);
        let x = self.design.row(i);
        match self.kind {
            FamilyKind::MultinomialLogit => {
                let p = softmax_with_reference(eta.as_slice());
                let zi = self.response[i] as usize;
                for k in 1..self.n_levels {
                    let r = f64::from(u8::from(zi == k)) - p[k];
                    for c in 0..q {
                        s[(k - 1) * q + c] = x[c] * r;
                    }
                }
            }
            kind => {
                let r = kind.residual(self.response[i], eta[0]);
                for c in 0..q {
                    s[c] = x[c] * r;
                }
            }
        }
        s
    }

    /// Fisher information contribution of unit `i` (minus the Hessian of the
    /// unit log-likelihood; exact for canonical links).
    pub fn unit_information_at(&self, coef: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
        let q = self.design.ncols();
        let d = coef.len();
        let mut info = DMatrix::zeros(d, d);
        if !self.subset[i] {
            return info;
        }
        let eta = self.linear_predictor(coef, i);
        let x = self.design.row(i).transpose();
        let xx = &x * x.transpose();
        match self.kind {
            FamilyKind::MultinomialLogit => {
                let p = softmax_with_reference(eta.as_slice());
                for k in 1..self.n_levels {
                    for l in 1..self.n_levels {
                        let w = p[k] * (f64::from(u8::from(k == l)) - p[l]);
                        info.view_mut(((k - 1) * q, (l - 1) * q), (q, q)).copy_from(&(&xx * w));
                    }
                }
            }
            kind => {
                info.copy_from(&(xx * kind.mean_derivative(eta[0])));
            }
        }
        info
    }

    /// Per-unit score contributions at the fitted coefficients, N×qK.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        let n = self.design.nrows();
        let mut out = DMatrix::zeros(n, self.n_params());
        for i in 0..n {
            out.row_mut(i).copy_from(&self.unit_score_at(&self.coefficients, i).transpose());
        }
        out
    }

    /// Summed score at the fitted coefficients.
    pub fn total_score(&self) -> DVector<f64> {
        self.score_matrix().row_sum().transpose()
    }

    /// Summed Fisher information at the fitted coefficients.
    pub fn information(&self) -> DMatrix<f64> {
        let q = self.design.ncols();
        match self.kind {
            FamilyKind::MultinomialLogit => {
                let rows = masked_rows(&self.subset);
                let x = self.design.select_rows(&rows);
                let p = self.fitted_values.select_rows(&rows);
                multinomial_information(&x, &p, q, self.n_levels)
            }
            kind => {
                let mut xw = self.design.clone();
                for i in 0..xw.nrows() {
                    let w = if self.subset[i] {
                        let eta = self.linear_predictor(&self.coefficients, i)[0];
                        kind.mean_derivative(eta)
                    } else {
                        0.0
                    };
                    xw.row_mut(i).scale_mut(w);
                }
                self.design.tr_mul(&xw)
            }
        }
    }

    pub fn unit_log_likelihood_fitted(&self, i: usize) -> f64 {
        self.unit_log_likelihood(&self.coefficients, i)
    }
}

fn masked_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Level probabilities from J−1 logits against a reference level.
pub fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut p = Vec::with_capacity(eta.len() + 1);
    p.push((-max).exp());
    p.extend(eta.iter().map(|e| (e - max).exp()));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let (n, q) = x.shape();
    if n <= q {
        return Err(Error::InvalidData(format!("need more observations ({n}) than parameters ({q})")));
    }
    let xtx = x.tr_mul(x);
    let scale: Vec<f64> = (0..q).map(|j| xtx[(j, j)].sqrt()).collect();
    if scale.contains(&0.0) {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let corr = DMatrix::from_fn(q, q, |a, b| xtx[(a, b)] / (scale[a] * scale[b]));
    let eig = SymmetricEigen::new(corr).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    let ratio = min / max;
    if ratio.is_nan() || ratio <= RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(())
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.cholesky()?;
    let sol = chol.solve(b);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

fn converged(dev_old: f64, dev_new: f64, score_max: f64, step_max: f64, coef_max: f64, n: usize) -> bool {
    let change = (dev_new - dev_old).abs();
    let dev_ok = change <= DEVIANCE_TOLERANCE * dev_new.abs() || change <= 1e-20 * n as f64;
    dev_ok && (score_max < SCORE_TOLERANCE || step_max <= 1e-12 * (1.0 + coef_max))
}

struct IrlsOutcome {
    beta: DVector<f64>,
    iterations: usize,
    deviance: f64,
}

fn irls(kind: FamilyKind, x: &DMatrix<f64>, y: &[f64], offset: &[f64]) -> Result<IrlsOutcome> {
    check_rank(x)?;
    let n = x.nrows();
    let deviance_of = |eta: &DVector<f64>| -> f64 {
        y.iter().zip(eta.iter()).map(|(&yi, &e)| kind.unit_deviance(yi, e)).sum()
    };
    let mut eta = DVector::from_iterator(n, y.iter().map(|&yi| kind.link(kind.start_mean(yi))));
    let mut dev = deviance_of(&eta);
    let mut beta: Option<DVector<f64>> = None;
    for iter in 1..=MAX_ITERATIONS {
        let mut xw = x.clone();
        let mut rhs_w = DVector::zeros(n);
        for i in 0..n {
            let w = kind.mean_derivative(eta[i]);
            let z = eta[i] - offset[i] + kind.residual(y[i], eta[i]) / w;
            xw.row_mut(i).scale_mut(w);
            rhs_w[i] = z;
        }
        let xtwx = x.tr_mul(&xw);
        let xtwz = xw.tr_mul(&rhs_w);
        let Some(mut next) = solve_spd(xtwx, &xtwz) else {
            return Err(if beta.is_none() {
                Error::RankDeficient { ratio: 0.0 }
            } else {
                Error::NotConverged { iterations: iter }
            });
        };
        let mut eta_next = x * &next + DVector::from_column_slice(offset);
        let mut dev_next = deviance_of(&eta_next);
        if let Some(prev) = &beta {
            let mut halvings = 0;
            while dev_next.is_nan() || dev_next > dev + 1e-12 * dev.abs() {
                if halvings == MAX_HALVINGS {
                    return Err(Error::NotConverged { iterations: iter });
                }
                next = (&next + prev) * 0.5;
                eta_next = x * &next + DVector::from_column_slice(offset);
                dev_next = deviance_of(&eta_next);
                halvings += 1;
            }
        }
        let score = x.tr_mul(&DVector::from_iterator(
            n,
            (0..n).map(|i| kind.residual(y[i], eta_next[i])),
        ));
        let step = beta.as_ref().map_or(f64::INFINITY, |b| (&next - b).amax());
        let done = beta.is_some() && converged(dev, dev_next, score.amax(), step, next.amax(), n);
        beta = Some(next);
        eta = eta_next;
        dev = dev_next;
        if done {
            if kind == FamilyKind::BinomialLogit && dev < 1e-10 * n as f64 {
                return Err(Error::NotConverged { iterations: iter });
            }
            return Ok(IrlsOutcome { beta: beta.unwrap(), iterations: iter, deviance: dev });
        }
    }
    Err(Error::NotConverged { iterations: MAX_ITERATIONS })
}

fn multinomial_information(x: &DMatrix<f64>, p: &DMatrix<f64>, q: usize, j: usize) -> DMatrix<f64> {
    let d = q * (j - 1);
    let mut info = DMatrix::zeros(d, d);
    for k in 1..j {
        for l in k..j {
            let mut xw = x.clone();
            for i in 0..x.nrows() {
                let w = p[(i, k)] * (f64::from(u8::from(k == l)) - p[(i, l)]);
                xw.row_mut(i).scale_mut(w);
            }
            let block = x.tr_mul(&xw);
            info.view_mut(((k - 1) * q, (l - 1) * q), (q, q)).copy_from(&block);
            if k != l {
                info.view_mut(((l - 1) * q, (k - 1) * q), (q, q)).copy_from(&block.transpose());
            }
        }
    }
    info
}

/// Level probabilities for every row under baseline-category logits.
pub fn multinomial_probs(x: &DMatrix<f64>, coef: &DMatrix<f64>) -> DMatrix<f64> {
    let eta = x * coef;
    let j = coef.ncols() + 1;
    let mut p = DMatrix::zeros(x.nrows(), j);
    for i in 0..x.nrows() {
        let row: Vec<f64> = eta.row(i).iter().copied().collect();
        for (k, v) in softmax_with_reference(&row).into_iter().enumerate() {
            p[(i, k)] = v;
        }
    }
    p
}

fn multinomial_deviance(p: &DMatrix<f64>, z: &[usize]) -> f64 {
    -2.0 * z.iter().enumerate().map(|(i, &k)| p[(i, k)].ln()).sum::<f64>()
}

fn newton_multinomial(x: &DMatrix<f64>, z: &[usize], j: usize) -> Result<(DMatrix<f64>, usize, f64)> {
    check_rank(x)?;
    let (n, q) = x.shape();
    if n <= q * (j - 1) {
        return Err(Error::InvalidData(format!(
            "need more observations ({n}) than parameters ({})",
            q * (j - 1)
        )));
    }
    let mut coef = DMatrix::zeros(q, j - 1);
    let mut p = multinomial_probs(x, &coef);
    let mut dev = multinomial_deviance(&p, z);
    for iter in 1..=MAX_ITERATIONS {
        let mut resid = DMatrix::zeros(n, j - 1);
        for i in 0..n {
            for k in 1..j {
                resid[(i, k - 1)] = f64::from(u8::from(z[i] == k)) - p[(i, k)];
            }
        }
        let grad_mat = x.tr_mul(&resid);
        let grad = DVector::from_column_slice(grad_mat.as_slice());
        let info = multinomial_information(x, &p, q, j);
        let Some(step) = solve_spd(info, &grad) else {
            return Err(Error::NotConverged { iterations: iter });
        };
        let step = DMatrix::from_column_slice(q, j - 1, step.as_slice());
        let mut next = &coef + &step;
        let mut p_next = multinomial_probs(x, &next);
        let mut dev_next = multinomial_deviance(&p_next, z);
        let mut halvings = 0;
        while dev_next.is_nan() || dev_next > dev + 1e-12 * dev.abs() {
            if halvings == MAX_HALVINGS {
                return Err(Error::NotConverged { iterations: iter });
            }
            next = (&next + &coef) * 0.5;
            p_next = multinomial_probs(x, &next);
            dev_next = multinomial_deviance(&p_next, z);
            halvings += 1;
        }
        let mut resid = DMatrix::zeros(n, j - 1);
        for i in 0..n {
            for k in 1..j {
                resid[(i, k - 1)] = f64::from(u8::from(z[i] == k)) - p_next[(i, k)];
            }
        }
        let score_max = x.tr_mul(&resid).amax();
        let step_max = (&next - &coef).amax();
        let done = converged(dev, dev_next, score_max, step_max, next.amax(), n);
        coef = next;
        p = p_next;
        dev = dev_next;
        if done {
            if dev < 1e-10 * n as f64 {
                return Err(Error::NotConverged { iterations: iter });
            }
            return Ok((coef, iter, dev));
        }
    }
    Err(Error::NotConverged { iterations: MAX_ITERATIONS })
}

/// Logistic regression of a 0/1 response.
pub fn fit_binary_logistic(x: &crate::formula::DesignMatrix, z: &[f64]) -> Result<GlmFit> {
    fit_binary_logistic_matrix(&x.values, z)
}

pub fn fit_binary_logistic_matrix(x: &DMatrix<f64>, z: &[f64]) -> Result<GlmFit> {
    if z.len() != x.nrows() {
        return invalid("response length differs from design rows");
    }
    if z.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidData("binary response must be coded 0/1".into()));
    }
    let ones = z.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == z.len() {
        return Err(Error::InvalidData("both classes must be present".into()));
    }
    let n = z.len();
    let offset = vec![0.0; n];
    let out = irls(FamilyKind::BinomialLogit, x, z, &offset)?;
    let coefficients = DMatrix::from_column_slice(x.ncols(), 1, out.beta.as_slice());
    let eta = x * &out.beta;
    let fitted_values = DMatrix::from_iterator(n, 1, eta.iter().map(|&e| sigmoid(e)));
    Ok(GlmFit {
        kind: FamilyKind::BinomialLogit,
        coefficients,
        fitted_values,
        converged: true,
        iterations: out.iterations,
        deviance: out.deviance,
        design: x.clone(),
        response: z.to_vec(),
        subset: vec![true; n],
        offset: None,
        n_levels: 2,
    })
}

/// Sorted distinct labels and each row's level index.
pub fn encode_levels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut levels: Vec<String> = labels.to_vec();
    levels.sort();
    levels.dedup();
    let idx = labels.iter().map(|l| levels.binary_search(l).expect("level present")).collect();
    (levels, idx)
}

/// Baseline-category multinomial logit against the lexicographically first level.
pub fn fit_multinomial_logistic(
    x: &crate::formula::DesignMatrix,
    labels: &[String],
) -> Result<(GlmFit, Vec<String>)> {
    let (levels, z) = encode_levels(labels);
    if levels.len() < 3 {
        return invalid(format!(
            "multinomial logit needs at least 3 levels, found {}; use the binary logistic fit",
            levels.len()
        ));
    }
    let fit = fit_multinomial_indices(&x.values, &z, levels.len())?;
    Ok((fit, levels))
}

pub fn fit_multinomial_indices(x: &DMatrix<f64>, z: &[usize], j: usize) -> Result<GlmFit> {
    if z.len() != x.nrows() {
        return invalid("response length differs from design rows");
    }
    if j < 3 {
        return invalid("multinomial logit needs at least 3 levels; use the binary logistic fit");
    }
    for k in 0..j {
        if !z.contains(&k) {
            return Err(Error::EmptyGroup(format!("level {k}")));
        }
    }
    let (coef, iterations, deviance) = newton_multinomial(x, z, j)?;
    let fitted_values = multinomial_probs(x, &coef);
    Ok(GlmFit {
        kind: FamilyKind::MultinomialLogit,
        coefficients: coef,
        fitted_values,
        converged: true,
        iterations,
        deviance,
        design: x.clone(),
        response: z.iter().map(|&k| k as f64).collect(),
        subset: vec![true; z.len()],
        offset: None,
        n_levels: j,
    })
}

/// Fits the outcome model on the rows in `subset` and predicts for all rows.
pub fn fit_outcome_glm(
    x: &crate::formula::DesignMatrix,
    y: &[f64],
    family: &GlmFamily,
    subset: &[bool],
) -> Result<GlmFit> {
    fit_outcome_matrix(&x.values, y, family, subset)
}

pub fn fit_outcome_matrix(x: &DMatrix<f64>, y: &[f64], family: &GlmFamily, subset: &[bool]) -> Result<GlmFit> {
    let n = x.nrows();
    if y.len() != n || subset.len() != n {
        return invalid("outcome, subset and design lengths differ");
    }
    if let Some(o) = &family.offset {
        if o.len() != n {
            return invalid("offset length differs from design rows");
        }
    }
    let rows = masked_rows(subset);
    if rows.is_empty() {
        return Err(Error::EmptyGroup("outcome subset".into()));
    }
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    match family.kind {
        FamilyKind::BinomialLogit => {
            if ys.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidData("binomial outcome must be coded 0/1".into()));
            }
        }
        FamilyKind::PoissonLog => {
            if ys.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(Error::InvalidData("poisson outcome must be a non-negative integer count".into()));
            }
        }
        FamilyKind::GaussianIdentity => {}
        FamilyKind::MultinomialLogit => return invalid("multinomial outcome models are not supported"),
    }
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite outcome".into()));
    }
    let xs = x.select_rows(&rows);
    let offs: Vec<f64> = match &family.offset {
        Some(o) => rows.iter().map(|&i| o[i]).collect(),
        None => vec![0.0; rows.len()],
    };
    let out = irls(family.kind, &xs, &ys, &offs)?;
    let mut eta = x * &out.beta;
    if let Some(o) = &family.offset {
        eta += DVector::from_column_slice(o);
    }
    let fitted_values = DMatrix::from_iterator(n, 1, eta.iter().map(|&e| family.kind.inverse_link(e)));
    Ok(GlmFit {
        kind: family.kind,
        coefficients: DMatrix::from_column_slice(x.ncols(), 1, out.beta.as_slice()),
        fitted_values,
        converged: true,
        iterations: out.iterations,
        deviance: out.deviance,
        design: x.clone(),
        response: y.to_vec(),
        subset: subset.to_vec(),
        offset: family.offset.clone(),
        n_levels: 1,
    })
}
