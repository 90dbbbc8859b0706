//! `psw`: propensity score weighting from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit
//! failure. Errors are reported as a single stderr line
//! `psw: error kind=<kind> exit=<code> message="<text>"`.

mod svg;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use psw_core::balance::{density_series, histogram_series, love_series, BalanceOptions, Metric, DEFAULT_THRESHOLD};
use psw_core::estimate::Scale;
use psw_core::glm::FamilyKind;
use psw_core::inference::{DEFAULT_REPLICATES, DEFAULT_SEED};
use psw_core::pipeline::{self, AnalysisConfig, ContrastOptions, InferenceMethod, ModelSpec, TrimRule};
use psw_core::simulate::{generate, true_wate, Scenario, TrueValue};
use psw_core::weights::WeightScheme;
use psw_core::{Dataset, Error, ErrorKind};

const SCHEMA: &str = "psw/1";
const DEFAULT_TRUTH_DRAWS: usize = 1_000_000;

#[derive(Parser)]
#[command(name = "psw", version, about = "Propensity score weighting for binary and multi-arm treatments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit propensity scores and report covariate balance.
    Design(DesignArgs),
    /// Drop units with extreme propensity scores and write the kept rows.
    Trim(TrimArgs),
    /// Estimate weighted average treatment effects.
    Estimate(EstimateArgs),
    /// Generate a dataset from a built-in scenario.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Propensity model, e.g. "z ~ x1 + x2".
    #[arg(long)]
    ps_formula: Option<String>,
    /// Externally estimated propensity columns, one per level in sorted
    /// label order (a single column for binary treatments).
    #[arg(long, value_delimiter = ',')]
    ps_cols: Option<Vec<String>>,
    /// Treatment column (needed with --ps-cols).
    #[arg(long)]
    zname: Option<String>,
    /// Level targeted by the treated scheme and described by a single
    /// external propensity column; defaults to the last level.
    #[arg(long)]
    treated_group: Option<String>,
    /// Covariates for balance checks, e.g. "x1 + x2" (defaults to the
    /// propensity formula terms).
    #[arg(long)]
    covariates: Option<String>,
    /// Symmetric trimming threshold.
    #[arg(long)]
    delta: Option<f64>,
    /// Data-driven trimming threshold.
    #[arg(long)]
    optimal: bool,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Comma-separated schemes: ipw, treated, overlap, matching, entropy.
    #[arg(long, value_delimiter = ',', default_value = "overlap")]
    weights: Vec<String>,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    weighted_var: bool,
    /// ASD or PSD.
    #[arg(long, default_value = "ASD")]
    metric: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// JSON report path.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    plot_love: Option<PathBuf>,
    #[arg(long)]
    plot_density: Option<PathBuf>,
    #[arg(long)]
    plot_hist: Option<PathBuf>,
}

#[derive(Args)]
struct TrimArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Kept rows as CSV.
    #[arg(long, short)]
    output: PathBuf,
    /// JSON summary path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// ipw, treated, overlap, matching or entropy.
    #[arg(long, alias = "weights", default_value = "overlap")]
    weight: String,
    /// Outcome column.
    #[arg(long)]
    yname: Option<String>,
    #[arg(long)]
    augmentation: bool,
    /// Outcome model fitted within each group, e.g. "y ~ x1 + x2".
    #[arg(long)]
    out_formula: Option<String>,
    /// Externally predicted outcome columns, one per level.
    #[arg(long, value_delimiter = ',')]
    out_cols: Option<Vec<String>>,
    /// gaussian, binomial or poisson.
    #[arg(long)]
    family: Option<String>,
    /// Log-exposure column for a poisson outcome model.
    #[arg(long)]
    offset: Option<String>,
    /// Contrast scale: DIF, RR or OR.
    #[arg(long = "type", default_value = "DIF")]
    scale: String,
    /// Semicolon-separated contrast rows, e.g. "1,-1,0;0,1,-1".
    #[arg(long, allow_hyphen_values = true)]
    contrast: Option<String>,
    /// Report exp() of ratio-scale contrasts.
    #[arg(long)]
    exponentiate: bool,
    /// Print z values instead of confidence limits.
    #[arg(long)]
    no_ci: bool,
    #[arg(long)]
    bootstrap: bool,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// JSON result path.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// A, B, C, D, E or H.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of covariates (defaults to the scenario's own).
    #[arg(long)]
    p: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// CSV path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Scheme whose true pairwise effects are written to a sidecar JSON.
    #[arg(long)]
    emit_truth: Option<String>,
    /// Sidecar path (defaults to the CSV path with a .truth.json suffix).
    #[arg(long)]
    truth_output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRUTH_DRAWS)]
    truth_draws: usize,
}

/// Resolved settings echoed into every JSON output.
#[derive(Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a ModelSpec>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    schemes: Vec<WeightScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trim: Option<TrimRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    balance: Option<BalanceOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inference: Option<InferenceMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrast: Option<&'a ContrastOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    simulation: Option<SimulationConfig<'a>>,
    outputs: Vec<&'a Path>,
}

#[derive(Serialize)]
struct SimulationConfig<'a> {
    scenario: &'a str,
    n: usize,
    p: usize,
    seed: u64,
    truth_scheme: Option<WeightScheme>,
    truth_draws: usize,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    config: RunConfig<'a>,
    result: T,
}

fn write_json<T: Serialize>(path: &Path, config: RunConfig<'_>, result: T) -> psw_core::Result<()> {
    let env = Envelope { schema: SCHEMA, config, result };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| Error::InvalidData(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn trim_rule(input: &InputArgs) -> psw_core::Result<TrimRule> {
    match (input.delta, input.optimal) {
        (Some(_), true) => Err(Error::InvalidArgument("--delta and --optimal are mutually exclusive".into())),
        (Some(delta), false) => Ok(TrimRule::Symmetric { delta }),
        (None, true) => Ok(TrimRule::Optimal),
        (None, false) => Ok(TrimRule::None),
    }
}

fn scheme(name: &str, treated: &Option<String>) -> psw_core::Result<WeightScheme> {
    match name.parse()? {
        WeightScheme::Treated { .. } => Ok(WeightScheme::Treated { group: treated.clone() }),
        s => Ok(s),
    }
}

fn base_spec(input: &InputArgs) -> ModelSpec {
    ModelSpec {
        treatment: input.zname.clone(),
        ps_formula: input.ps_formula.clone(),
        ps_cols: input.ps_cols.clone(),
        treated_group: input.treated_group.clone(),
        covariates: input.covariates.clone(),
        ..Default::default()
    }
}

fn out(text: &str) -> psw_core::Result<()> {
    let mut stdout = io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn cmd_design(a: &DesignArgs) -> psw_core::Result<()> {
    let spec = base_spec(&a.input);
    spec.validate(false)?;
    let rule = trim_rule(&a.input)?;
    let schemes = a.weights.iter().map(|w| scheme(w, &a.input.treated_group)).collect::<psw_core::Result<Vec<_>>>()?;
    let options = BalanceOptions { weighted_var: a.weighted_var, metric: a.metric.parse::<Metric>()?, threshold: a.threshold };
    if options.threshold.is_nan() || options.threshold <= 0.0 {
        return Err(Error::InvalidArgument("--threshold must be positive".into()));
    }
    let d = Dataset::from_path(&a.input.data)?;
    let data = spec.prepare(&d, false)?;
    let (report, kept, e) = pipeline::design(&data, &schemes, rule, options)?;

    if let Some(p) = &a.plot_love {
        std::fs::write(p, svg::love_plot(&love_series(&report)))?;
    }
    if let Some(p) = &a.plot_density {
        std::fs::write(p, svg::density_plot(&density_series(&e, &kept.z)))?;
    }
    if let Some(p) = &a.plot_hist {
        std::fs::write(p, svg::histogram_plot(&histogram_series(&e, &kept.z)?))?;
    }
    if let Some(p) = &a.output {
        let outputs = [&a.output, &a.plot_love, &a.plot_density, &a.plot_hist].into_iter().flatten().map(|p| p.as_path()).collect();
        let config = RunConfig {
            command: "design",
            data: Some(&a.input.data),
            model: Some(&spec),
            schemes: schemes.clone(),
            trim: Some(rule),
            balance: Some(options),
            inference: None,
            contrast: None,
            simulation: None,
            outputs,
        };
        write_json(p, config, &report)?;
    }
    out(&report.render())
}

fn cmd_trim(a: &TrimArgs) -> psw_core::Result<()> {
    let spec = base_spec(&a.input);
    spec.validate(false)?;
    let rule = trim_rule(&a.input)?;
    if rule == TrimRule::None {
        return Err(Error::InvalidArgument("trim needs --delta or --optimal".into()));
    }
    let d = Dataset::from_path(&a.input.data)?;
    let data = spec.prepare(&d, false)?;
    let (_, _, result) = pipeline::trim_and_refit(&data, rule)?;
    let result = result.expect("a trimming rule was given");
    let mut w = BufWriter::new(File::create(&a.output)?);
    d.write_csv(&mut w, Some(&result.kept))?;
    w.flush()?;
    if let Some(p) = &a.report {
        let config = RunConfig {
            command: "trim",
            data: Some(&a.input.data),
            model: Some(&spec),
            schemes: vec![],
            trim: Some(rule),
            balance: None,
            inference: None,
            contrast: None,
            simulation: None,
            outputs: vec![&a.output, p],
        };
        write_json(p, config, &result)?;
    }
    out(&result.render())
}

fn cmd_estimate(a: &EstimateArgs) -> psw_core::Result<()> {
    let mut spec = base_spec(&a.input);
    spec.outcome = a.yname.clone();
    spec.augmentation = a.augmentation;
    spec.out_formula = a.out_formula.clone();
    spec.out_cols = a.out_cols.clone();
    spec.family = a.family.as_deref().map(str::parse::<FamilyKind>).transpose()?;
    spec.offset = a.offset.clone();
    spec.validate(true)?;
    let cfg = AnalysisConfig { scheme: scheme(&a.weight, &a.input.treated_group)?, trim: trim_rule(&a.input)? };
    let contrast = ContrastOptions { contrast: a.contrast.clone(), scale: a.scale.parse()?, exponentiate: a.exponentiate };
    if contrast.exponentiate && contrast.scale == Scale::Dif {
        return Err(Error::InvalidArgument("--exponentiate applies to RR or OR contrasts only".into()));
    }
    let method = if a.bootstrap {
        if a.replicates < 2 {
            return Err(Error::InvalidArgument("--replicates must be at least 2".into()));
        }
        InferenceMethod::Bootstrap { replicates: a.replicates, seed: a.seed }
    } else {
        InferenceMethod::Sandwich
    };
    let d = Dataset::from_path(&a.input.data)?;
    let data = spec.prepare(&d, true)?;
    let est = pipeline::estimate(&data, &cfg, method, &contrast)?;

    if let Some(p) = &a.output {
        let config = RunConfig {
            command: "estimate",
            data: Some(&a.input.data),
            model: Some(&spec),
            schemes: vec![cfg.scheme.clone()],
            trim: Some(cfg.trim),
            balance: None,
            inference: Some(method),
            contrast: Some(&contrast),
            simulation: None,
            outputs: vec![p],
        };
        write_json(p, config, &est)?;
    }
    let mut text = String::new();
    if let Some(t) = &est.trim {
        text.push_str(&t.render());
        text.push('\n');
    }
    text.push_str(&est.summary.render(&est.groups, !a.no_ci));
    out(&text)
}

#[derive(Serialize)]
struct PairTruth {
    label: String,
    #[serde(flatten)]
    value: TrueValue,
}

fn cmd_simulate(a: &SimulateArgs) -> psw_core::Result<()> {
    let s = Scenario::builtin(&a.scenario, a.p)?;
    if a.n < 2 {
        return Err(Error::InvalidArgument("--n must be at least 2".into()));
    }
    let truth_scheme = a.emit_truth.as_deref().map(|t| scheme(t, &None)).transpose()?;
    let d = generate(&s, a.n, a.seed)?;
    match &a.output {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            d.write_csv(&mut w, None)?;
            w.flush()?;
        }
        None => d.write_csv(io::stdout().lock(), None)?,
    }
    let Some(ts) = truth_scheme else { return Ok(()) };
    let path = match (&a.truth_output, &a.output) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => {
            let mut os = p.clone().into_os_string();
            os.push(".truth.json");
            PathBuf::from(os)
        }
        (None, None) => return Err(Error::InvalidArgument("--emit-truth needs --output or --truth-output".into())),
    };
    let labels = s.labels();
    let mut values = Vec::new();
    for a_idx in 0..s.n_groups {
        for b_idx in a_idx + 1..s.n_groups {
            let value = true_wate(&s, &ts, (a_idx, b_idx), a.truth_draws, a.seed)?;
            values.push(PairTruth { label: format!("{} - {}", labels[b_idx], labels[a_idx]), value });
        }
    }
    let outputs = a.output.iter().map(|p| p.as_path()).chain([path.as_path()]).collect();
    let config = RunConfig {
        command: "simulate",
        data: None,
        model: None,
        schemes: vec![],
        trim: None,
        balance: None,
        inference: None,
        contrast: None,
        simulation: Some(SimulationConfig {
            scenario: &s.name,
            n: a.n,
            p: s.p,
            seed: a.seed,
            truth_scheme: Some(ts),
            truth_draws: a.truth_draws,
        }),
        outputs,
    };
    write_json(&path, config, &values)
}

fn report(kind: &str, code: u8, message: &str) -> ExitCode {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'");
    eprintln!("psw: error kind={kind} exit={code} message=\"{flat}\"");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report("config", 2, first);
        }
    };
    let result = match &cli.command {
        Command::Design(a) => cmd_design(a),
        Command::Trim(a) => cmd_trim(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.kind() {
            ErrorKind::Config => report("config", 2, &e.to_string()),
            ErrorKind::Data => report("data", 3, &e.to_string()),
            ErrorKind::Fit => report("fit", 4, &e.to_string()),
        },
    }
}
