//! Command-line front end: `validate`, `estimate`, `simulate` and
//! `example-data`.
//!
//! Exit codes: 0 success, 1 internal error, 2 input or validation error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fetwfe::effects::{EffectsReport, EstimateEntry};
use fetwfe::estimator::{self, EstimateError, EstimatorConfig};
use fetwfe::gls::GlsError;
use fetwfe::panel::{self, LoadOptions, PanelError, ValidationReport};
use fetwfe::simulate::{self, SimConfig, SimError, StudyMetrics};
use fetwfe::solver::{SolverConfig, SolverError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        CliError::Input(format!("panel: {e}"))
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        let input = match &e {
            EstimateError::Panel(_)
            | EstimateError::Design(_)
            | EstimateError::SplitCounts(_)
            | EstimateError::Config(_) => true,
            EstimateError::Gls(g) => !matches!(g, GlsError::RidgeFailed),
            EstimateError::Solver(s) => matches!(
                s,
                SolverError::InvalidConfig(_) | SolverError::ZeroResponse | SolverError::NonFinite
            ),
            _ => false,
        };
        if input {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Design(_) => CliError::Input(e.to_string()),
            SimError::Estimate(inner) => inner.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("writing {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "fetwfe", version, about = "Fused extended two-way fixed effects for staggered adoption panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a panel CSV for structural problems and rank preconditions.
    Validate(ValidateArgs),
    /// Fit the model and report treatment effects with intervals.
    Estimate(EstimateArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
    /// Write a synthetic state-by-year panel in the input format.
    ExampleData(ExampleArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub csv: PathBuf,
    #[arg(long)]
    pub drop_always_treated: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SolverArgs {
    /// Bridge exponent in (0, 2].
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    #[arg(long, default_value_t = 100)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda_min_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge_lambda2: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            q: self.q,
            lambda_grid_size: self.grid_size,
            lambda_min_ratio: self.lambda_min_ratio,
            ridge_lambda2: self.ridge_lambda2,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    pub csv: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub sigma_sq: Option<f64>,
    #[arg(long)]
    pub sigma_c_sq: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub drop_always_treated: bool,
    /// CSV of `cohort,count` from an independent sample; switches the
    /// overall interval to the split-sample variance.
    #[arg(long)]
    pub split_counts: Option<PathBuf>,
    /// CSV of `cohort,time,weight` for an extra fixed-weight aggregate.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "fetwfe-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML or JSON simulation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// study1, study1-reduced, study2 or study2-desk.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub competitors_raw: bool,
    #[arg(long)]
    pub estimate_variance: bool,
    #[arg(long, env = "FETWFE_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, default_value = "fetwfe-sim")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExampleArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "policy_panel.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_digests: Vec<(String, String)>,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    fs::write(path, text).map_err(|e| write_err(path, e))
}

fn open_csv(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| io_err(path, e))
}

pub fn render_validation(report: &ValidationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "N = {}, T = {}, cohorts = {}, covariates = {}, p = {}, NT = {}",
        report.n_units, report.n_times, report.n_cohorts, report.n_covariates, report.n_params, report.n_obs
    );
    if report.issues.is_empty() {
        let _ = writeln!(s, "no issues");
    }
    for issue in &report.issues {
        let _ = writeln!(s, "{:?}: {}", issue.severity, issue.message);
    }
    s
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<i32, CliError> {
    let file = open_csv(&args.csv)?;
    let opts = LoadOptions {
        drop_always_treated: args.drop_always_treated,
    };
    let (data, dropped) = panel::load_panel_with(file, opts)?;
    let report = panel::validate_rank_preconditions(&data);
    print!("{}", render_validation(&report));
    if !dropped.is_empty() {
        println!("dropped {} always-treated units", dropped.len());
    }
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    Ok(if report.has_hard_failure() { EXIT_INPUT } else { EXIT_OK })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn fmt_entry(e: &EstimateEntry) -> String {
    let ci = if e.degenerate {
        "degenerate".to_string()
    } else {
        format!("({}, {})", fmt_opt(e.ci_low), fmt_opt(e.ci_high))
    };
    format!("{:>10.4} {:>10} {}", e.estimate, fmt_opt(e.se), ci)
}

pub fn render_summary(report: &EffectsReport, custom: Option<&EstimateEntry>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Cohort-time effects");
    let _ = writeln!(s, "{:>8} {:>8} {:>10} {:>10} interval", "cohort", "time", "estimate", "se");
    for a in &report.att {
        let _ = writeln!(s, "{:>8} {:>8} {}", a.r_label, a.t_label, fmt_entry(&a.value));
    }
    let _ = writeln!(s, "\nCohort average effects");
    let _ = writeln!(s, "{:>8} {:>6} {:>10} {:>10} interval", "cohort", "units", "estimate", "se");
    for c in &report.cohort_att {
        let _ = writeln!(s, "{:>8} {:>6} {}", c.r_label, c.n_units, fmt_entry(&c.value));
    }
    let _ = writeln!(s, "\nOverall ATT ({})", report.overall.variance_kind);
    let _ = writeln!(s, "{:>15} {}", "", fmt_entry(&report.overall.value));
    if let Some(c) = custom {
        let _ = writeln!(s, "\nCustom weighted aggregate");
        let _ = writeln!(s, "{:>15} {}", "", fmt_entry(c));
    }
    let _ = writeln!(
        s,
        "\nCovariate trends diagnostic: {}",
        if report.ciun { "all time-covariate interactions are zero" } else { "nonzero time-covariate interactions" }
    );
    for n in &report.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

#[derive(Debug, Serialize)]
struct EstimateFile<'a> {
    #[serde(flatten)]
    report: &'a EffectsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    custom: Option<&'a EstimateEntry>,
    lambda: f64,
    selected: usize,
    p: usize,
    nt: usize,
    dropped_units: &'a [String],
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<i32, CliError> {
    let start = Instant::now();
    let opts = LoadOptions {
        drop_always_treated: args.drop_always_treated,
    };
    let (data, dropped) = panel::load_panel_with(open_csv(&args.csv)?, opts)?;
    let validation = panel::validate_rank_preconditions(&data);
    if validation.has_hard_failure() {
        eprint!("{}", render_validation(&validation));
        return Ok(EXIT_INPUT);
    }
    let config = EstimatorConfig {
        solver: args.solver.config(),
        sigma_sq: args.sigma_sq,
        sigma_c_sq: args.sigma_c_sq,
        alpha: args.alpha,
        ..Default::default()
    };
    let split = match &args.split_counts {
        Some(p) => Some(estimator::load_split_counts(open_csv(p)?, &data)?),
        None => None,
    };
    let weights = match &args.weights {
        Some(p) => Some(estimator::load_weights(open_csv(p)?, &data)?),
        None => None,
    };
    let out = estimator::estimate(&data, &config, split.as_ref(), weights.as_ref())?;

    fs::create_dir_all(&args.out).map_err(|e| write_err(&args.out, e))?;
    let report_path = args.out.join("report.json");
    let summary_path = args.out.join("summary.txt");
    let path_path = args.out.join("path.json");
    let manifest_path = args.out.join("manifest.json");
    write_json(
        &report_path,
        &EstimateFile {
            report: &out.report,
            custom: out.custom.as_ref(),
            lambda: out.model.fit.lambda,
            selected: out.model.fit.selected.len(),
            p: out.model.prepared.layout.p(),
            nt: out.model.prepared.nt(),
            dropped_units: &dropped,
        },
    )?;
    let summary = render_summary(&out.report, out.custom.as_ref());
    fs::write(&summary_path, &summary).map_err(|e| write_err(&summary_path, e))?;
    write_json(&path_path, &out.model.path)?;
    print!("{summary}");

    let mut digests = vec![(args.csv.display().to_string(), sha256_file(&args.csv)?)];
    for p in [&args.split_counts, &args.weights].into_iter().flatten() {
        digests.push((p.display().to_string(), sha256_file(p)?));
    }
    let manifest = RunManifest {
        command: "estimate".into(),
        config: serde_json::to_value(&config).map_err(|e| CliError::Internal(e.to_string()))?,
        input_digests: digests,
        version: fetwfe::VERSION.into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: [&report_path, &summary_path, &path_path, &manifest_path]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(EXIT_OK)
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

pub fn resolve_sim_config(args: &SimulateArgs) -> Result<SimConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => load_sim_config(p)?,
        (None, Some(name)) => SimConfig::preset(name)
            .ok_or_else(|| CliError::Input(format!("unknown preset `{name}`")))?,
        (None, None) => SimConfig::study2_desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    cfg.competitors_raw |= args.competitors_raw;
    cfg.estimate_variance |= args.estimate_variance;
    cfg.validate()?;
    Ok(cfg)
}

pub fn render_metrics(m: &StudyMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "replicates: {} completed, {} skipped (p = {})", m.completed, m.skipped, m.p);
    let _ = writeln!(s, "{:<10} {:>14} {:>12}", "method", "ATT sq. err", "se");
    for mm in &m.methods {
        if let Some(a) = mm.att_sq_error {
            let _ = writeln!(s, "{:<10} {:>14.5} {:>12.5}", mm.method, a.mean, a.se);
        }
    }
    if let Some(a) = m.selection_accuracy {
        let _ = writeln!(s, "selection accuracy: {:.4} ({:.4})", a.mean, a.se);
    }
    if let Some(a) = m.restriction_recall {
        let _ = writeln!(s, "restriction recall: {:.4} ({:.4})", a.mean, a.se);
    }
    for (k, c) in m.cohort_coverage.iter().enumerate() {
        let _ = writeln!(s, "cohort {k} coverage: {:.4} ({} degenerate)", c.rate, c.degenerate);
    }
    let _ = writeln!(s, "overall conservative coverage: {:.4}", m.overall_conservative_coverage.rate);
    let _ = writeln!(s, "overall split-sample coverage: {:.4}", m.overall_split_coverage.rate);
    s
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32, CliError> {
    let start = Instant::now();
    let cfg = resolve_sim_config(args)?;
    let run = || simulate::run_study(&cfg);
    let (metrics, replicates) = match args.threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Internal(e.to_string()))?
            .install(run)?,
        _ => run()?,
    };
    fs::create_dir_all(&args.out).map_err(|e| write_err(&args.out, e))?;
    let json_path = args.out.join("metrics.json");
    let csv_path = args.out.join("metrics.csv");
    let reps_path = args.out.join("replicates.json");
    let manifest_path = args.out.join("manifest.json");
    write_json(&json_path, &metrics)?;
    let f = fs::File::create(&csv_path).map_err(|e| write_err(&csv_path, e))?;
    simulate::write_metrics_csv(&metrics, f)?;
    write_json(&reps_path, &replicates)?;
    print!("{}", render_metrics(&metrics));
    let mut digests = Vec::new();
    if let Some(p) = &args.config {
        digests.push((p.display().to_string(), sha256_file(p)?));
    }
    let manifest = RunManifest {
        command: "simulate".into(),
        config: serde_json::to_value(&cfg).map_err(|e| CliError::Internal(e.to_string()))?,
        input_digests: digests,
        version: fetwfe::VERSION.into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: [&json_path, &csv_path, &reps_path, &manifest_path]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(EXIT_OK)
}

pub fn cmd_example_data(args: &ExampleArgs) -> Result<i32, CliError> {
    let f = fs::File::create(&args.out).map_err(|e| write_err(&args.out, e))?;
    simulate::write_policy_style_csv(args.seed, f)?;
    println!("wrote {}", args.out.display());
    Ok(EXIT_OK)
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ExampleData(a) => cmd_example_data(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_args(preset: Option<&str>) -> SimulateArgs {
        SimulateArgs {
            config: None,
            preset: preset.map(str::to_string),
            seed: Some(99),
            replications: Some(7),
            competitors_raw: true,
            estimate_variance: false,
            threads: None,
            out: PathBuf::from("unused"),
        }
    }

    #[test]
    fn overrides_apply_to_presets() {
        let cfg = resolve_sim_config(&sim_args(Some("study1-reduced"))).unwrap();
        assert_eq!(cfg.n_times, 10);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.replications, 7);
        assert!(cfg.competitors_raw);
        let err = resolve_sim_config(&sim_args(Some("bogus"))).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INPUT);
    }

    #[test]
    fn solver_flags_map_to_config() {
        let cli = Cli::try_parse_from(["fetwfe", "estimate", "p.csv", "--q", "1", "--grid-size", "7"]).unwrap();
        let Command::Estimate(a) = cli.command else {
            panic!("expected estimate");
        };
        let c = a.solver.config();
        assert_eq!((c.q, c.lambda_grid_size), (1.0, 7));
        assert_eq!(c.max_iterations, SolverConfig::default().max_iterations);
    }

    #[test]
    fn error_classes() {
        let e: CliError = EstimateError::Config("bad".into()).into();
        assert_eq!(e.exit_code(), EXIT_INPUT);
        let e: CliError = EstimateError::Solver(SolverError::RankDeficientAtZeroLambda).into();
        assert_eq!(e.exit_code(), EXIT_INTERNAL);
    }

    #[test]
    fn degenerate_entries_render_as_such() {
        let mut e = EstimateEntry::point(0.0);
        e.degenerate = true;
        assert!(fmt_entry(&e).contains("degenerate"));
    }
}
