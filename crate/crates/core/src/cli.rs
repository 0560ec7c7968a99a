//! The `aesurv` command-line front end.
//!
//! Exit status is 0 on success, 1 when the data fail validation or an
//! analysis step fails, and 2 for usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::compare::{cox_cause_specific, fine_gray, rate_ratio, CensoringWeights, CompareError, CoxFit};
use crate::data::{self, DataError, Dataset, Group};
use crate::estimand::{apply_strategy, AnalysisPlan, EstimandError, EstimandStrategy};
use crate::estimators::{
    aalen_johansen, crude_rate, incidence_proportion, incidence_rate, kaplan_meier, nelson_aalen_for, CurveEstimate,
    EstimateError, HazardPair,
};
use crate::fmt::g17;
use crate::meta::{self, MetaError, MetaResult, StudyEffect};
use crate::plot::{curves_svg, forest_svg, PlotError, Series};
use crate::simulate::{
    bias_experiment, linear_grid, simulate, theoretical_cif, Censoring, Scenario, SimulateError, RNG_ALGORITHM,
};

#[derive(Debug, Parser)]
#[command(name = "aesurv", version, about = "Time-to-first-AE analysis with competing events")]
pub struct Cli {
    /// Seed for simulation and bias experiments.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Directory for result files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Format of result files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a subject-level CSV file and summarise it.
    Validate(ValidateArgs),
    /// One-sample estimates per group.
    Estimate(EstimateArgs),
    /// Two-group comparisons: rate ratio, cause-specific Cox, Fine-Gray.
    Compare(CompareArgs),
    /// Draw a constant-hazard competing-risks dataset.
    Simulate(SimulateArgs),
    /// Monte-Carlo bias of AE probability estimators.
    Bias(BiasArgs),
    /// Meta-analysis of log effects.
    Meta(MetaArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// policy, on-treatment, composite or hypothetical.
    #[arg(long)]
    pub estimand: EstimandStrategy,
    /// AEs were still collected after treatment discontinuation.
    #[arg(long)]
    pub ae_after_discontinuation: bool,
    /// Unit of the time column, used in labels.
    #[arg(long, default_value = "days")]
    pub time_unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorKind {
    Km,
    NelsonAalen,
    AalenJohansen,
    IncidenceProportion,
    Crude,
    IncidenceRate,
    ParametricCif,
}

impl EstimatorKind {
    fn name(self) -> &'static str {
        match self {
            EstimatorKind::Km => "km",
            EstimatorKind::NelsonAalen => "nelson_aalen",
            EstimatorKind::AalenJohansen => "aalen_johansen",
            EstimatorKind::IncidenceProportion => "incidence_proportion",
            EstimatorKind::Crude => "crude",
            EstimatorKind::IncidenceRate => "incidence_rate",
            EstimatorKind::ParametricCif => "parametric_cif",
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub estimator: EstimatorKind,
    /// Evaluation time for the incidence proportion.
    #[arg(long)]
    pub at: Option<f64>,
    /// Count person-time up to the exposure time rather than the event time.
    #[arg(long)]
    pub exposure_adjusted: bool,
    /// End of the grid for the parametric CIF (default: largest observed time).
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Also write an SVG overlay of both groups.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    Pooled,
    ByGroup,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Censoring distribution behind the Fine-Gray weights.
    #[arg(long, value_enum, default_value_t = WeightsArg::Pooled)]
    pub censoring_weights: WeightsArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CensorMode {
    Fixed,
    Uniform,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// AE hazard in group 0.
    #[arg(long)]
    pub alpha_ae0: f64,
    /// Competing-event hazard in group 0.
    #[arg(long)]
    pub alpha_ce0: f64,
    /// AE hazard ratio, group 1 versus group 0.
    #[arg(long, default_value_t = 1.0)]
    pub hr_ae: f64,
    /// Competing-event hazard ratio, group 1 versus group 0.
    #[arg(long, default_value_t = 1.0)]
    pub hr_ce: f64,
    /// Subjects per group.
    #[arg(long)]
    pub n: usize,
    /// Administrative censoring time (none if omitted).
    #[arg(long)]
    pub censor: Option<f64>,
    /// Censor everyone at `--censor`, or each subject uniformly on (0, censor].
    #[arg(long, value_enum, default_value_t = CensorMode::Fixed)]
    pub censor_mode: CensorMode,
}

impl ScenarioArgs {
    fn scenario(&self, seed: u64) -> Result<Scenario, SimulateError> {
        let censoring = match (self.censor, self.censor_mode) {
            (None, _) => Censoring::None,
            (Some(c), CensorMode::Fixed) => Censoring::Fixed(c),
            (Some(c), CensorMode::Uniform) => Censoring::Uniform(c),
        };
        Scenario::from_hazard_ratios(
            self.alpha_ae0,
            self.alpha_ce0,
            self.hr_ae,
            self.hr_ce,
            self.n,
            censoring,
            seed,
        )
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output CSV (default: simulated.csv in the output directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also plot the theoretical AE incidence curves.
    #[arg(long)]
    pub plot: bool,
    /// End of the plotted time axis.
    #[arg(long, default_value_t = 300.0)]
    pub horizon: f64,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub t_eval: f64,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetaMethodArg {
    Fixed,
    Mkh,
    Bayes,
    All,
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// CSV with columns label,log_effect,se.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MetaMethodArg::All)]
    pub method: MetaMethodArg,
    /// Half-normal prior scale for tau; may be repeated.
    #[arg(long = "prior-scale", default_values_t = meta::DEFAULT_PRIOR_SCALES)]
    pub prior_scales: Vec<f64>,
    /// Also write a forest plot.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("estimand: {0}")]
    Estimand(#[from] EstimandError),
    #[error("estimators: {0}")]
    Estimate(#[from] EstimateError),
    #[error("compare: {0}")]
    Compare(#[from] CompareError),
    #[error("simulate: {0}")]
    Simulate(#[from] SimulateError),
    #[error("meta: {0}")]
    Meta(#[from] MetaError),
    #[error("plot: {0}")]
    Plot(#[from] PlotError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("validation failed with {0} problem(s)")]
    Invalid(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

struct Ctx {
    out_dir: PathBuf,
    format: Format,
    seed: u64,
    warnings: Vec<String>,
}

impl Ctx {
    fn warn(&mut self, w: impl Into<String>) {
        let w = w.into();
        eprintln!("warning: {w}");
        self.warnings.push(w);
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        let io = |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, bytes).map_err(io)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_out(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write(&self.path(name), bytes)
    }

    /// CSV comment lines carrying the current warnings.
    fn csv_preamble(&self) -> String {
        self.warnings.iter().map(|w| format!("# warning: {w}\n")).collect()
    }

    fn report(&self, command: &str, result: Value) -> Vec<u8> {
        let report = json!({
            "command": command,
            "status": "ok",
            "warnings": self.warnings,
            "result": result,
        });
        let mut s = serde_json::to_vec_pretty(&report).expect("serialisable report");
        s.push(b'\n');
        s
    }
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serialisable value")
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut ctx = Ctx {
        out_dir: cli.out_dir.clone(),
        format: cli.format,
        seed: cli.seed,
        warnings: Vec::new(),
    };
    let (name, outcome) = match &cli.command {
        Command::Validate(a) => ("validate", cmd_validate(&mut ctx, a)),
        Command::Estimate(a) => ("estimate", cmd_estimate(&mut ctx, a)),
        Command::Compare(a) => ("compare", cmd_compare(&mut ctx, a)),
        Command::Simulate(a) => ("simulate", cmd_simulate(&mut ctx, a)),
        Command::Bias(a) => ("bias", cmd_bias(&mut ctx, a)),
        Command::Meta(a) => ("meta", cmd_meta(&mut ctx, a)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            if ctx.format == Format::Json && !matches!(e, CliError::Io { .. }) {
                let report = json!({
                    "command": name,
                    "status": "error",
                    "warnings": ctx.warnings,
                    "error": e.to_string(),
                });
                let mut bytes = serde_json::to_vec_pretty(&report).expect("serialisable report");
                bytes.push(b'\n');
                let _ = ctx.write_out(&format!("{name}.json"), &bytes);
            }
            e.exit_code()
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_validate(ctx: &mut Ctx, a: &ValidateArgs) -> Result<(), CliError> {
    let bytes = read_file(&a.input)?;
    let read = data::read_csv_lenient(&bytes[..])?;
    let ds = Dataset::new(read.records);
    let mut report = data::validate(&ds);
    report.violations.extend(read.malformed.iter().map(|e| data::Violation {
        row: match e {
            DataError::MalformedRow { row, .. } => Some(*row),
            _ => None,
        },
        message: e.to_string(),
    }));
    report.violations.sort_by_key(|v| v.row);
    for v in &report.violations {
        match v.row {
            Some(r) => eprintln!("row {r}: {}", v.message),
            None => eprintln!("{}", v.message),
        }
    }
    match ctx.format {
        Format::Json => ctx.write_out("validation.json", &ctx.report("validate", to_value(&report)))?,
        Format::Csv => {
            let mut counts = String::from("group,event,count\n");
            for (g, m) in &report.group_counts {
                for (e, n) in m {
                    counts.push_str(&format!("{g},{e},{n}\n"));
                }
            }
            ctx.write_out("validation_counts.csv", counts.as_bytes())?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["row", "message"]).expect("in-memory write");
            for v in &report.violations {
                let row = v.row.map(|r| r.to_string()).unwrap_or_default();
                w.write_record([row.as_str(), v.message.as_str()]).expect("in-memory write");
            }
            ctx.write_out("violations.csv", &w.into_inner().expect("in-memory write"))?;
        }
    }
    if report.is_valid() {
        println!("valid: {} records", ds.len());
        Ok(())
    } else {
        Err(CliError::Invalid(report.violations.len()))
    }
}

fn load(ctx: &mut Ctx, a: &DataArgs) -> Result<(Dataset, AnalysisPlan), CliError> {
    let bytes = read_file(&a.input)?;
    let mut ds = data::parse_csv(&bytes[..])?;
    ds.meta.label = a.input.display().to_string();
    ds.meta.time_unit = a.time_unit.clone();
    ds.meta.ae_collection_after_discontinuation = a.ae_after_discontinuation;
    let (ads, plan) = apply_strategy(&ds, a.estimand)?;
    for w in &plan.warnings {
        ctx.warn(w.clone());
    }
    Ok((ads, plan))
}

enum GroupOutput {
    Curve(CurveEstimate),
    Scalar(Value),
}

fn parametric_hazards(ds: &Dataset, g: Group, plan: &AnalysisPlan) -> Result<HazardPair, EstimateError> {
    let ae = incidence_rate(ds, g, plan.target, false)?.rate;
    let ce = if plan.competing.is_empty() {
        0.0
    } else {
        incidence_rate(ds, g, plan.competing, false)?.rate
    };
    HazardPair::new(ae, ce)
}

fn cmd_estimate(ctx: &mut Ctx, a: &EstimateArgs) -> Result<(), CliError> {
    let (ds, plan) = load(ctx, &a.data)?;
    let name = a.estimator.name();
    if a.estimator == EstimatorKind::IncidenceProportion && a.at.is_none() {
        return Err(CliError::Usage("--estimator incidence-proportion needs --at".into()));
    }
    let horizon = a
        .horizon
        .unwrap_or_else(|| ds.records.iter().map(|r| r.time).fold(0.0, f64::max));
    let mut outputs = Vec::new();
    for g in Group::BOTH {
        let out = match a.estimator {
            EstimatorKind::Km => GroupOutput::Curve(kaplan_meier(&ds, g, plan.target)?),
            EstimatorKind::NelsonAalen => GroupOutput::Curve(nelson_aalen_for(&ds, g, plan.target)?),
            EstimatorKind::AalenJohansen => GroupOutput::Curve(aalen_johansen(&ds, g, plan.target, plan.competing)?),
            EstimatorKind::ParametricCif => {
                let h = parametric_hazards(&ds, g, &plan)?;
                GroupOutput::Curve(theoretical_cif(h, &linear_grid(horizon, 101))?)
            }
            EstimatorKind::IncidenceProportion => {
                let t = a.at.expect("checked above");
                GroupOutput::Scalar(json!({ "t": t, "value": incidence_proportion(&ds, g, plan.target, t)? }))
            }
            EstimatorKind::Crude => GroupOutput::Scalar(json!({ "value": crude_rate(&ds, g, plan.target)? })),
            EstimatorKind::IncidenceRate => {
                GroupOutput::Scalar(to_value(&incidence_rate(&ds, g, plan.target, a.exposure_adjusted)?))
            }
        };
        outputs.push((g, out));
    }

    match ctx.format {
        Format::Json => {
            let groups: Vec<Value> = outputs
                .iter()
                .map(|(g, o)| match o {
                    GroupOutput::Curve(c) => json!({ "group": g.index(), "curve": c }),
                    GroupOutput::Scalar(v) => json!({ "group": g.index(), "estimate": v }),
                })
                .collect();
            let body = json!({ "estimator": name, "plan": plan, "groups": groups });
            ctx.write_out("estimate.json", &ctx.report("estimate", body))?;
        }
        Format::Csv => {
            let mut scalar_rows = Vec::new();
            for (g, o) in &outputs {
                match o {
                    GroupOutput::Curve(c) => {
                        let mut buf = ctx.csv_preamble().into_bytes();
                        c.write_csv(&mut buf).expect("in-memory write");
                        ctx.write_out(&format!("{name}_group{}.csv", g.index()), &buf)?;
                    }
                    GroupOutput::Scalar(v) => scalar_rows.push((g, v)),
                }
            }
            if !scalar_rows.is_empty() {
                let mut buf = ctx.csv_preamble();
                let keys: Vec<String> = scalar_rows[0].1.as_object().expect("object").keys().cloned().collect();
                buf.push_str(&format!("group,{}\n", keys.join(",")));
                for (g, v) in scalar_rows {
                    let cells: Vec<String> = keys
                        .iter()
                        .map(|k| match &v[k] {
                            Value::Number(n) => n.as_f64().map(g17).unwrap_or_else(|| n.to_string()),
                            other => other.to_string(),
                        })
                        .collect();
                    buf.push_str(&format!("{},{}\n", g.index(), cells.join(",")));
                }
                ctx.write_out(&format!("{name}.csv"), buf.as_bytes())?;
            }
        }
    }

    if a.plot {
        let curves: Vec<(Group, &CurveEstimate)> = outputs
            .iter()
            .filter_map(|(g, o)| match o {
                GroupOutput::Curve(c) => Some((*g, c)),
                GroupOutput::Scalar(_) => None,
            })
            .collect();
        if curves.is_empty() {
            ctx.warn(format!("--plot ignored: {name} gives a single number per group"));
        } else {
            let mut series: Vec<Series> = curves
                .iter()
                .map(|(g, c)| {
                    let label = format!("group {}", g.index());
                    if a.estimator == EstimatorKind::ParametricCif {
                        Series {
                            dashed: false,
                            ..Series::from_theory(label, c)
                        }
                    } else {
                        Series::from_estimate(label, c)
                    }
                })
                .collect();
            if a.estimator == EstimatorKind::AalenJohansen {
                for g in Group::BOTH {
                    let h = parametric_hazards(&ds, g, &plan)?;
                    let c = theoretical_cif(h, &linear_grid(horizon, 101))?;
                    series.push(Series::from_theory(format!("group {} constant hazards", g.index()), &c));
                }
            }
            let mut title = format!("{name} ({} strategy)", plan.strategy);
            if plan.is_assumption_laden() {
                title.push_str(" [assumption-laden]");
            }
            let svg = curves_svg(&title, &ds.meta.time_unit, "estimate", &series)?;
            ctx.write_out(&format!("{name}.svg"), svg.as_bytes())?;
        }
    }
    Ok(())
}

fn fit_value(r: &Result<CoxFit, CompareError>) -> Value {
    match r {
        Ok(f) => to_value(f),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn cmd_compare(ctx: &mut Ctx, a: &CompareArgs) -> Result<(), CliError> {
    let (ds, plan) = load(ctx, &a.data)?;
    let weights = match a.censoring_weights {
        WeightsArg::Pooled => CensoringWeights::Pooled,
        WeightsArg::ByGroup => CensoringWeights::ByGroup,
    };
    let rr = rate_ratio(&ds, plan.target);
    let cox_target = cox_cause_specific(&ds, plan.target);
    let cox_competing = (!plan.competing.is_empty()).then(|| cox_cause_specific(&ds, plan.competing));
    let fg = fine_gray(&ds, plan.target, plan.competing, weights);
    for (what, err) in [
        ("rate ratio", rr.as_ref().err()),
        ("competing-event Cox fit", cox_competing.as_ref().and_then(|r| r.as_ref().err())),
        ("Fine-Gray fit", fg.as_ref().err()),
    ] {
        if let Some(e) = err {
            ctx.warn(format!("{what} unavailable: {e}"));
        }
    }

    match ctx.format {
        Format::Json => {
            let body = json!({
                "plan": plan,
                "rate_ratio": match &rr { Ok(r) => to_value(r), Err(e) => json!({ "error": e.to_string() }) },
                "cox_target": fit_value(&cox_target),
                "cox_competing": cox_competing.as_ref().map(fit_value),
                "fine_gray": fit_value(&fg),
                "censoring_weights": weights,
            });
            ctx.write_out("compare.json", &ctx.report("compare", body))?;
        }
        Format::Csv => {
            let mut buf = ctx.csv_preamble();
            buf.push_str("analysis,beta,se,ratio,ci_lo,ci_hi,n_events\n");
            if let Ok(r) = &rr {
                let (lo, hi) = r.ci95.map_or((String::new(), String::new()), |(l, h)| (g17(l), g17(h)));
                buf.push_str(&format!("rate_ratio,,,{},{lo},{hi},\n", g17(r.ratio)));
            }
            let fits = [
                ("cox_target", Some(&cox_target)),
                ("cox_competing", cox_competing.as_ref()),
                ("fine_gray", Some(&fg)),
            ];
            for (label, f) in fits {
                if let Some(Ok(f)) = f {
                    buf.push_str(&format!(
                        "{label},{},{},{},{},{},{}\n",
                        g17(f.beta),
                        g17(f.se),
                        g17(f.hr),
                        g17(f.ci95.0),
                        g17(f.ci95.1),
                        f.n_events
                    ));
                }
            }
            ctx.write_out("compare.csv", buf.as_bytes())?;
        }
    }
    match cox_target {
        Ok(f) => {
            println!("cause-specific HR (target) = {:.4} [{:.4}, {:.4}]", f.hr, f.ci95.0, f.ci95.1);
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Result<(), CliError> {
    let s = a.scenario.scenario(ctx.seed)?;
    let ds = simulate(&s)?;
    let out = a.out.clone().unwrap_or_else(|| ctx.path("simulated.csv"));
    let mut buf = Vec::new();
    data::write_csv(&ds, &mut buf)?;
    ctx.write(&out, &buf)?;
    let meta = json!({ "rng": RNG_ALGORITHM, "scenario": s, "records": ds.len() });
    ctx.write(&out.with_extension("json"), &ctx.report("simulate", meta))?;
    if a.plot {
        let grid = linear_grid(a.horizon, 301);
        let series = Group::BOTH
            .iter()
            .map(|&g| {
                let c = theoretical_cif(s.hazards(g), &grid)?;
                Ok(Series {
                    dashed: false,
                    ..Series::from_theory(format!("group {}", g.index()), &c)
                })
            })
            .collect::<Result<Vec<_>, EstimateError>>()?;
        let svg = curves_svg("Theoretical cumulative AE probability", "time", "probability", &series)?;
        ctx.write_out("theoretical_cif.svg", svg.as_bytes())?;
    }
    Ok(())
}

fn cmd_bias(ctx: &mut Ctx, a: &BiasArgs) -> Result<(), CliError> {
    let s = a.scenario.scenario(ctx.seed)?;
    let table = bias_experiment(&s, a.t_eval, a.reps)?;
    match ctx.format {
        Format::Json => ctx.write_out("bias.json", &ctx.report("bias", to_value(&table)))?,
        Format::Csv => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf).expect("in-memory write");
            ctx.write_out("bias.csv", &buf)?;
        }
    }
    Ok(())
}

fn cmd_meta(ctx: &mut Ctx, a: &MetaArgs) -> Result<(), CliError> {
    let studies: Vec<StudyEffect> = meta::read_studies(&read_file(&a.input)?[..])?;
    let mut results: Vec<MetaResult> = Vec::new();
    let all = a.method == MetaMethodArg::All;
    if all || a.method == MetaMethodArg::Fixed {
        results.push(meta::fixed_effect(&studies)?);
    }
    if all || a.method == MetaMethodArg::Mkh {
        match meta::knapp_hartung_modified(&studies) {
            Ok(r) => results.push(r),
            Err(MetaError::FewerThanTwoStudies) if all => {
                ctx.warn("modified Knapp-Hartung skipped: it needs at least two studies")
            }
            Err(e) => return Err(e.into()),
        }
    }
    if all || a.method == MetaMethodArg::Bayes {
        for &scale in &a.prior_scales {
            results.push(meta::bayes_half_normal(&studies, scale)?);
        }
    }
    let forest = meta::forest_data(&studies, &results);
    match ctx.format {
        Format::Json => {
            let body = json!({ "studies": studies, "results": results, "forest": forest });
            ctx.write_out("meta.json", &ctx.report("meta", body))?;
        }
        Format::Csv => {
            let mut buf = Vec::new();
            writeln!(buf, "method,mu_hat,lo,hi,ratio,ratio_lo,ratio_hi,tau").expect("in-memory write");
            for r in &results {
                writeln!(
                    buf,
                    "{},{},{},{},{},{},{},{}",
                    r.method.label(),
                    g17(r.mu_hat),
                    g17(r.interval95.0),
                    g17(r.interval95.1),
                    g17(r.mu_hat.exp()),
                    g17(r.interval95.0.exp()),
                    g17(r.interval95.1.exp()),
                    r.tau.map(g17).unwrap_or_default()
                )
                .expect("in-memory write");
            }
            ctx.write_out("meta.csv", &buf)?;
            let mut fb = Vec::new();
            forest.write_csv(&mut fb).expect("in-memory write");
            ctx.write_out("forest.csv", &fb)?;
        }
    }
    if a.plot {
        let svg = forest_svg("Forest plot", &forest)?;
        ctx.write_out("forest.svg", svg.as_bytes())?;
    }
    Ok(())
}
