//! End-to-end analysis: propensity → (trim → refit) → weights → outcome
//! models → means → variance → contrasts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{summarize_balance, BalanceOptions, BalanceReport};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::estimate::{augmented_means, hajek_means, ContrastSpec, Scale};
use crate::formula::{build_design_matrix, parse_formula, DesignMatrix, Formula};
use crate::glm::{encode_levels, fit_binary_logistic_matrix, fit_multinomial_indices, fit_outcome_matrix, FamilyKind, GlmFamily};
use crate::inference::{
    bootstrap_variance, delta_transform, sandwich_variance, OutcomeInput, OutcomeModel, PropensityInput, StackedSystem,
    SummaryTable, VarianceResult,
};
use crate::trim::{optimal_trim, symmetric_trim, TrimResult};
use crate::weights::{effective_sample_size, unit_weights, PropensityMatrix, PropensitySource, TiltedWeights, WeightScheme};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum TrimRule {
    None,
    Symmetric { delta: f64 },
    Optimal,
}

#[derive(Debug, Clone)]
pub enum PropensitySpec {
    /// Fit a logistic (J = 2) or multinomial logistic model on this design.
    Model(DesignMatrix),
    /// N×J probabilities, columns in label order.
    External(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub enum OutcomeSpec {
    Model { design: DesignMatrix, family: FamilyKind, offset: Option<Vec<f64>> },
    /// N×J predictions of the group means, columns in label order.
    External(DMatrix<f64>),
}

/// Everything the estimators need, already numeric so that bootstrap
/// replicates only select rows.
#[derive(Debug, Clone)]
pub struct AnalysisData {
    pub groups: Vec<String>,
    pub z: Vec<usize>,
    /// Observed outcome (counts for a poisson model with offset).
    pub y: Option<Vec<f64>>,
    pub propensity: PropensitySpec,
    pub outcome: Option<OutcomeSpec>,
    /// Covariates checked by the balance diagnostics.
    pub covariates: Option<DesignMatrix>,
}

impl AnalysisData {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            groups: self.groups.clone(),
            z: rows.iter().map(|&i| self.z[i]).collect(),
            y: self.y.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect()),
            propensity: match &self.propensity {
                PropensitySpec::Model(x) => PropensitySpec::Model(x.select_rows(rows)),
                PropensitySpec::External(e) => PropensitySpec::External(e.select_rows(rows)),
            },
            outcome: self.outcome.as_ref().map(|o| match o {
                OutcomeSpec::Model { design, family, offset } => OutcomeSpec::Model {
                    design: design.select_rows(rows),
                    family: *family,
                    offset: offset.as_ref().map(|o| rows.iter().map(|&i| o[i]).collect()),
                },
                OutcomeSpec::External(m) => OutcomeSpec::External(m.select_rows(rows)),
            }),
            covariates: self.covariates.as_ref().map(|c| c.select_rows(rows)),
        }
    }

    fn mask(&self, keep: &[bool]) -> Self {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| keep[i]).collect();
        self.select(&rows)
    }
}

/// Column names and formulas identifying the analysis in a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Treatment column; taken from the propensity formula when absent.
    pub treatment: Option<String>,
    /// Outcome column; taken from the outcome formula when absent.
    pub outcome: Option<String>,
    pub ps_formula: Option<String>,
    pub ps_cols: Option<Vec<String>>,
    /// Group whose probability a single external propensity column holds.
    pub treated_group: Option<String>,
    /// Right-hand side listing covariates for balance checks when the
    /// propensity scores are external.
    pub covariates: Option<String>,
    pub augmentation: bool,
    pub out_formula: Option<String>,
    pub out_cols: Option<Vec<String>>,
    pub family: Option<FamilyKind>,
    pub offset: Option<String>,
}

fn config<T>(msg: impl Into<String>) -> Result<T> {
    invalid(msg)
}

impl ModelSpec {
    /// Checks the combination of options without looking at data.
    pub fn validate(&self, need_outcome: bool) -> Result<()> {
        match (&self.ps_formula, &self.ps_cols) {
            (Some(_), Some(_)) => return config("--ps-formula and --ps-cols are mutually exclusive"),
            (None, None) => return config("one of --ps-formula or --ps-cols is required"),
            _ => {}
        }
        if self.ps_cols.is_some() && self.treatment.is_none() {
            return config("--zname is required with --ps-cols");
        }
        if self.augmentation {
            match (&self.out_formula, &self.out_cols) {
                (Some(_), Some(_)) => return config("--out-formula and --out-cols are mutually exclusive"),
                (None, None) => return config("--augmentation needs --out-formula or --out-cols"),
                (Some(_), None) if self.family.is_none() => return config("--family is required with --out-formula"),
                _ => {}
            }
        } else if self.out_formula.is_some() || self.out_cols.is_some() {
            return config("outcome models are only used with --augmentation");
        }
        if self.offset.is_some() && (self.family != Some(FamilyKind::PoissonLog) || self.out_formula.is_none()) {
            return config("--offset is only valid with --family poisson and --out-formula");
        }
        if need_outcome && self.outcome.is_none() && self.out_formula.is_none() {
            return config("--yname is required");
        }
        Ok(())
    }

    fn formula(text: &str) -> Result<Formula> {
        parse_formula(text)
    }

    pub fn treatment_column(&self) -> Result<String> {
        let from_formula = self.ps_formula.as_deref().map(Self::formula).transpose()?.map(|f| f.response);
        match (&self.treatment, from_formula) {
            (Some(t), Some(f)) if *t != f => config(format!("--zname `{t}` differs from the propensity formula response `{f}`")),
            (Some(t), _) => Ok(t.clone()),
            (None, Some(f)) => Ok(f),
            (None, None) => config("no treatment column given"),
        }
    }

    pub fn outcome_column(&self) -> Result<Option<String>> {
        let from_formula = self.out_formula.as_deref().map(Self::formula).transpose()?.map(|f| f.response);
        match (&self.outcome, from_formula) {
            (Some(y), Some(f)) if *y != f => config(format!("--yname `{y}` differs from the outcome formula response `{f}`")),
            (Some(y), _) => Ok(Some(y.clone())),
            (None, f) => Ok(f),
        }
    }

    /// Builds numeric inputs from a dataset.
    pub fn prepare(&self, d: &Dataset, need_outcome: bool) -> Result<AnalysisData> {
        self.validate(need_outcome)?;
        let zname = self.treatment_column()?;
        let (groups, z) = encode_levels(&d.labels(&zname)?);
        let j = groups.len();
        if j < 2 {
            return Err(Error::InvalidData(format!("treatment `{zname}` has a single level")));
        }
        let y = match self.outcome_column()? {
            Some(name) if need_outcome => Some(d.numeric(&name)?),
            _ => None,
        };
        let mut covariates = None;
        let propensity = match (&self.ps_formula, &self.ps_cols) {
            (Some(f), _) => {
                let x = build_design_matrix(&Self::formula(f)?, d)?;
                covariates = Some(x.clone());
                PropensitySpec::Model(x)
            }
            (None, Some(cols)) => PropensitySpec::External(external_propensity(d, cols, &groups, self.treated_group.as_deref())?),
            (None, None) => unreachable!("validated"),
        };
        if let Some(rhs) = &self.covariates {
            let f = parse_formula(&format!("{zname} ~ {rhs}"))?;
            covariates = Some(build_design_matrix(&f, d)?);
        }
        let outcome = if self.augmentation {
            Some(match (&self.out_formula, &self.out_cols) {
                (Some(f), _) => OutcomeSpec::Model {
                    design: build_design_matrix(&Self::formula(f)?, d)?,
                    family: self.family.expect("validated"),
                    offset: self.offset.as_deref().map(|o| d.numeric(o)).transpose()?,
                },
                (None, Some(cols)) => {
                    if cols.len() != j {
                        return config(format!("--out-cols needs {j} columns, one per treatment level"));
                    }
                    let vals = cols.iter().map(|c| d.numeric(c)).collect::<Result<Vec<_>>>()?;
                    OutcomeSpec::External(DMatrix::from_fn(d.n_rows(), j, |i, k| vals[k][i]))
                }
                (None, None) => unreachable!("validated"),
            })
        } else {
            None
        };
        Ok(AnalysisData { groups, z, y, propensity, outcome, covariates })
    }
}

fn external_propensity(d: &Dataset, cols: &[String], groups: &[String], treated: Option<&str>) -> Result<DMatrix<f64>> {
    let j = groups.len();
    let vals = cols.iter().map(|c| d.numeric(c)).collect::<Result<Vec<_>>>()?;
    let n = d.n_rows();
    if j == 2 && cols.len() == 1 {
        let t = match treated {
            Some(g) => groups
                .iter()
                .position(|l| l == g)
                .ok_or_else(|| Error::InvalidArgument(format!("treated group `{g}` is not a treatment level")))?,
            None => 1,
        };
        return Ok(DMatrix::from_fn(n, 2, |i, k| if k == t { vals[0][i] } else { 1.0 - vals[0][i] }));
    }
    if cols.len() != j {
        return config(format!("--ps-cols needs {j} columns, one per treatment level (or one column for binary)"));
    }
    Ok(DMatrix::from_fn(n, j, |i, k| vals[k][i]))
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub e: PropensityMatrix,
    /// q×(J−1) logit coefficients when the model was fitted here.
    pub coefficients: Option<DMatrix<f64>>,
}

pub fn fit_propensity(data: &AnalysisData) -> Result<PropensityFit> {
    let j = data.n_groups();
    match &data.propensity {
        PropensitySpec::Model(x) if j == 2 => {
            let zf: Vec<f64> = data.z.iter().map(|&k| k as f64).collect();
            let fit = fit_binary_logistic_matrix(&x.values, &zf)?;
            let p: Vec<f64> = fit.fitted_values.iter().copied().collect();
            let e = PropensityMatrix::from_binary(&p, data.groups.clone(), 1, PropensitySource::Fitted)?;
            Ok(PropensityFit { e, coefficients: Some(fit.coefficients) })
        }
        PropensitySpec::Model(x) => {
            let fit = fit_multinomial_indices(&x.values, &data.z, j)?;
            let e = PropensityMatrix::new(fit.fitted_values.clone(), data.groups.clone(), PropensitySource::Fitted)?;
            Ok(PropensityFit { e, coefficients: Some(fit.coefficients) })
        }
        PropensitySpec::External(e) => Ok(PropensityFit {
            e: PropensityMatrix::new(e.clone(), data.groups.clone(), PropensitySource::External)?,
            coefficients: None,
        }),
    }
}

fn check_groups(data: &AnalysisData) -> Result<()> {
    for (k, g) in data.groups.iter().enumerate() {
        if !data.z.contains(&k) {
            return Err(Error::EmptyGroup(g.clone()));
        }
    }
    Ok(())
}

/// Fits the propensity model and applies the trimming rule. After trimming
/// a fitted model is refit on the kept units.
pub fn trim_and_refit(data: &AnalysisData, rule: TrimRule) -> Result<(AnalysisData, PropensityFit, Option<TrimResult>)> {
    check_groups(data)?;
    let first = fit_propensity(data)?;
    let result = match rule {
        TrimRule::None => return Ok((data.clone(), first, None)),
        TrimRule::Symmetric { delta } => symmetric_trim(&first.e, &data.z, delta)?,
        TrimRule::Optimal => optimal_trim(&first.e, &data.z)?,
    };
    let kept = data.mask(&result.kept);
    check_groups(&kept)?;
    let refit = match (&kept.propensity, result.n_trimmed()) {
        (_, 0) => PropensityFit {
            e: first.e.select_rows(&(0..data.n()).collect::<Vec<_>>()),
            coefficients: first.coefficients,
        },
        _ => fit_propensity(&kept)?,
    };
    Ok((kept, refit, Some(result)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalysisConfig {
    pub scheme: WeightScheme,
    pub trim: TrimRule,
}

#[derive(Debug, Clone)]
pub struct OutcomeFit {
    /// N×J predictions on the estimation scale (rates under an offset).
    pub m: DMatrix<f64>,
    pub model: Option<OutcomeModel>,
}

/// One point estimate with everything needed for its variance.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub data: AnalysisData,
    pub trim: Option<TrimResult>,
    pub propensity: PropensityFit,
    pub weights: TiltedWeights,
    pub treated: Option<usize>,
    /// Outcome on the estimation scale.
    pub y: Vec<f64>,
    pub outcome: Option<OutcomeFit>,
    pub mu: Vec<f64>,
}

fn fit_outcomes(data: &AnalysisData, y: &[f64]) -> Result<Option<(OutcomeFit, Vec<f64>)>> {
    let Some(spec) = &data.outcome else { return Ok(None) };
    let j = data.n_groups();
    match spec {
        OutcomeSpec::External(m) => Ok(Some((OutcomeFit { m: m.clone(), model: None }, y.to_vec()))),
        OutcomeSpec::Model { design, family, offset } => {
            let fam = GlmFamily::new(*family, offset.clone())?;
            let mut coefficients = Vec::with_capacity(j);
            for k in 0..j {
                let mask: Vec<bool> = data.z.iter().map(|&g| g == k).collect();
                let fit = fit_outcome_matrix(&design.values, y, &fam, &mask)?;
                coefficients.push(DVector::from_column_slice(fit.coefficients.as_slice()));
            }
            let x = &design.values;
            let m = DMatrix::from_fn(data.n(), j, |i, k| {
                let eta = x.row(i).iter().zip(coefficients[k].iter()).map(|(a, b)| a * b).sum::<f64>();
                family.inverse_link(eta)
            });
            let y_est: Vec<f64> = match offset {
                Some(o) => y.iter().zip(o).map(|(v, o)| v / o.exp()).collect(),
                None => y.to_vec(),
            };
            let model = OutcomeModel {
                design: x.clone(),
                kind: *family,
                offset: offset.clone(),
                response: y.to_vec(),
                coefficients,
            };
            Ok(Some((OutcomeFit { m, model: Some(model) }, y_est)))
        }
    }
}

/// Point estimates of the average potential outcomes.
pub fn analyze(data: &AnalysisData, cfg: &AnalysisConfig) -> Result<Analysis> {
    let Some(y_raw) = data.y.clone() else { return invalid("an outcome column is required") };
    let (data, propensity, trim) = trim_and_refit(data, cfg.trim)?;
    let y_raw: Vec<f64> = match &trim {
        Some(t) => y_raw.iter().zip(&t.kept).filter(|(_, &k)| k).map(|(v, _)| *v).collect(),
        None => y_raw,
    };
    let treated = cfg.scheme.treated_index(&data.groups)?;
    let weights = unit_weights(&cfg.scheme, &propensity.e, &data.z)?;
    let (outcome, y) = match fit_outcomes(&data, &y_raw)? {
        Some((o, y)) => (Some(o), y),
        None => (None, y_raw),
    };
    let mu = match &outcome {
        Some(o) => augmented_means(&y, &weights.w, &data.z, &weights.h, &o.m)?,
        None => hajek_means(&y, &weights.w, &data.z, data.n_groups())?,
    };
    Ok(Analysis { data, trim, propensity, weights, treated, y, outcome, mu })
}

impl Analysis {
    pub fn stacked_system(&self) -> Result<StackedSystem> {
        let ps = match (&self.propensity.coefficients, &self.data.propensity) {
            (Some(beta), PropensitySpec::Model(x)) => {
                PropensityInput::Model { design: x.values.clone(), coefficients: beta.clone() }
            }
            _ => PropensityInput::Fixed(self.propensity.e.values().clone()),
        };
        let outcome = match &self.outcome {
            None => OutcomeInput::None,
            Some(OutcomeFit { model: Some(m), .. }) => OutcomeInput::Model(m.clone()),
            Some(OutcomeFit { m, model: None }) => OutcomeInput::Fixed(m.clone()),
        };
        StackedSystem::new(
            self.y.clone(),
            self.data.z.clone(),
            self.data.n_groups(),
            self.weights.scheme.clone(),
            self.treated,
            ps,
            outcome,
        )
    }

    pub fn sandwich(&self) -> Result<VarianceResult> {
        sandwich_variance(&self.stacked_system()?)
    }

    pub fn effective_sample_size(&self) -> Result<Vec<f64>> {
        effective_sample_size(&self.weights.w, &self.data.z, self.data.n_groups())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum InferenceMethod {
    Sandwich,
    Bootstrap { replicates: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastOptions {
    /// Semicolon-separated rows; all pairwise differences when absent.
    pub contrast: Option<String>,
    pub scale: Scale,
    pub exponentiate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalEstimate {
    pub groups: Vec<String>,
    pub scheme: WeightScheme,
    pub augmented: bool,
    pub n_analyzed: usize,
    pub mu: Vec<f64>,
    pub variance: VarianceResult,
    pub contrast: ContrastSpec,
    pub summary: SummaryTable,
    pub effective_sample_size: Vec<f64>,
    pub clamped_probabilities: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimResult>,
}

/// Full estimate with variance and contrast table.
pub fn estimate(
    data: &AnalysisData,
    cfg: &AnalysisConfig,
    method: InferenceMethod,
    contrasts: &ContrastOptions,
) -> Result<CausalEstimate> {
    let j = data.n_groups();
    let spec = match &contrasts.contrast {
        Some(text) => ContrastSpec::parse(text, j)?,
        None => ContrastSpec::pairwise(&data.groups),
    };
    let a = analyze(data, cfg)?;
    let variance = match method {
        InferenceMethod::Sandwich => a.sandwich()?,
        InferenceMethod::Bootstrap { replicates, seed } => {
            bootstrap_variance(data.n(), replicates, seed, |rows| analyze(&data.select(rows), cfg).map(|r| r.mu))?
        }
    };
    let mut summary = delta_transform(&variance, &a.mu, &spec, contrasts.scale)?;
    if contrasts.exponentiate {
        summary.exponentiate()?;
    }
    Ok(CausalEstimate {
        groups: data.groups.clone(),
        scheme: cfg.scheme.clone(),
        augmented: a.outcome.is_some(),
        n_analyzed: a.data.n(),
        effective_sample_size: a.effective_sample_size()?,
        clamped_probabilities: a.propensity.e.clamped,
        mu: a.mu,
        variance,
        contrast: spec,
        summary,
        trim: a.trim,
    })
}

/// Balance report after optional trimming (with refit).
pub fn design(
    data: &AnalysisData,
    schemes: &[WeightScheme],
    rule: TrimRule,
    options: BalanceOptions,
) -> Result<(BalanceReport, AnalysisData, PropensityMatrix)> {
    let (kept, fit, trim) = trim_and_refit(data, rule)?;
    let Some(x) = &kept.covariates else {
        return invalid("balance diagnostics need covariates: give --ps-formula or --covariates");
    };
    let mut report = summarize_balance(x, &fit.e, &kept.z, schemes, options)?;
    report.trim = trim;
    Ok((report, kept, fit.e))
}
