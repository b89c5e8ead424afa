//! `tolcal` — command-line driver for the calibration toolkit.
//!
//! Subcommands cover the full workflow: `simulate` produces synthetic
//! datasets, `audit` measures calibration, `diagram` draws reliability
//! charts, `calibrate` fits and compares the four calibrators, `distill`
//! trains the linear student on soft labels, `regress` runs the
//! confidence-filter attenuation comparison, and `elicit` gathers fresh
//! measurements from a chat endpoint.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for validation errors
//! (bad data or parameters), 3 for runtime errors (I/O, HTTP, auth).

mod svg;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tolcal_core::calibrators::compare_calibrators;
use tolcal_core::dataset::{
    load_dataset, save_dataset, ConfidenceScale, Dataset, DatasetFormat, ToleranceConfig,
};
use tolcal_core::distill::{
    align_features, class_count_for, distill_pipeline, load_features, TrainConfig,
};
use tolcal_core::elicit::{
    elicit_dataset, load_inputs, ConstructPrompt, ElicitConfig, ElicitFailure, ElicitMode,
};
use tolcal_core::error::{Error, Result};
use tolcal_core::metrics::{metric_report, reliability_bins};
use tolcal_core::proxies::{attach_proxy, ProxyMethod};
use tolcal_core::regress::{
    confidence_filter, daily_stance, join_stance_covariate, load_covariate, ols, save_covariate,
    simulate_attenuation, AttenuationConfig, RegressionResult,
};
use tolcal_core::synth::{generate, MiscalibrationProfile};

#[derive(Parser)]
#[command(
    name = "tolcal",
    version,
    about = "Tolerance-based calibration toolkit for bounded-scale measurements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute T-ECE, Brier, and rank-correlation metrics for a dataset.
    Audit(AuditArgs),
    /// Fit Platt, beta, isotonic, and temperature calibrators; compare on a test split.
    Calibrate(CalibrateArgs),
    /// Train a linear student on soft labels and compare it with its teacher.
    Distill(DistillArgs),
    /// Regress daily stance on a covariate with and without a confidence filter.
    Regress(RegressArgs),
    /// Generate synthetic datasets with a chosen miscalibration profile.
    Simulate(SimulateArgs),
    /// Measure texts against a chat-completions endpoint.
    Elicit(ElicitArgs),
    /// Render a reliability diagram as SVG.
    Diagram(DiagramArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    /// Confidence stored as [0, 1].
    Unit,
    /// Confidence stored as [0, 100].
    Percent,
}

impl From<ScaleArg> for ConfidenceScale {
    fn from(scale: ScaleArg) -> Self {
        match scale {
            ScaleArg::Unit => ConfidenceScale::Unit,
            ScaleArg::Percent => ConfidenceScale::Percent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProxyArg {
    Verbal,
    Resampling,
    #[value(name = "logit_geom")]
    LogitGeom,
    #[value(name = "p_true")]
    PTrue,
}

impl From<ProxyArg> for ProxyMethod {
    fn from(proxy: ProxyArg) -> Self {
        match proxy {
            ProxyArg::Verbal => ProxyMethod::Verbal,
            ProxyArg::Resampling => ProxyMethod::Resampling,
            ProxyArg::LogitGeom => ProxyMethod::LogitGeom,
            ProxyArg::PTrue => ProxyMethod::PTrue,
        }
    }
}

#[derive(Parser)]
struct AuditArgs {
    /// Dataset file (JSONL or CSV by extension).
    input: PathBuf,
    /// Tolerance half-width in score units.
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    epsilon: f64,
    /// Number of equal-width confidence bins.
    #[arg(long, allow_negative_numbers = true, default_value_t =10)]
    bins: usize,
    /// Replace stored confidence using this proxy before scoring.
    #[arg(long, value_enum)]
    proxy: Option<ProxyArg>,
    /// Confidence scale used in the input file.
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
    /// Also write a reliability diagram to this SVG path.
    #[arg(long)]
    diagram: Option<PathBuf>,
    /// Also write the JSON report to this path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Parser)]
struct CalibrateArgs {
    /// Training dataset for the calibrator fits.
    #[arg(long)]
    train: PathBuf,
    /// Held-out dataset the comparison is evaluated on.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    epsilon: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =10)]
    bins: usize,
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
    /// Directory for the fitted model JSONs (one per successful method).
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Parser)]
struct DistillArgs {
    /// Teacher dataset whose (y_pred, confidence) become soft labels.
    input: PathBuf,
    /// Feature matrix (CSV with id column, or JSONL {"id", "features"}).
    #[arg(long)]
    features: PathBuf,
    /// Class count; defaults to 11 for datasets named like "fomc", else 10.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_negative_numbers = true, default_value_t =30)]
    epochs: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t =2e-3)]
    learning_rate: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =16)]
    batch_size: usize,
    /// Softmax temperature during training.
    #[arg(long, allow_negative_numbers = true, default_value_t =1.0)]
    temperature: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =1.0)]
    grad_clip: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =0.8)]
    split_fraction: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =17)]
    seed: u64,
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    epsilon: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =10)]
    bins: usize,
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
    /// Write the trained student model JSON here.
    #[arg(long)]
    student_out: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Parser)]
struct RegressArgs {
    /// Sentence-level dataset with group keys.
    input: PathBuf,
    /// CSV mapping group_key to the regressor value.
    #[arg(long)]
    covariate: PathBuf,
    /// Confidence threshold on the 0-100 scale (e.g. 90).
    #[arg(long, allow_negative_numbers = true, default_value_t =90.0)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Identity,
    Overconfident,
    Underconfident,
    BaseRate,
    Attenuation,
}

#[derive(Parser)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    profile: ProfileArg,
    /// Records to generate (ignored by the attenuation profile).
    #[arg(long, allow_negative_numbers = true, default_value_t =1000)]
    n: usize,
    /// Power-profile exponent.
    #[arg(long, allow_negative_numbers = true, default_value_t =2.0)]
    gamma: f64,
    /// Base-rate profile accuracy.
    #[arg(long, allow_negative_numbers = true, default_value_t =0.3)]
    p: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    epsilon: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =7)]
    seed: u64,
    /// Attenuation profile: number of days.
    #[arg(long, allow_negative_numbers = true, default_value_t =60)]
    days: usize,
    /// Attenuation profile: sentences per day.
    #[arg(long, allow_negative_numbers = true, default_value_t =24)]
    sentences_per_day: usize,
    /// Attenuation profile: where to write the per-day covariate CSV.
    #[arg(long, required_if_eq("profile", "attenuation"))]
    covariate_out: Option<PathBuf>,
    /// Output dataset path (JSONL or CSV by extension).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Verbal,
    Resampling,
}

#[derive(Parser)]
struct ElicitArgs {
    /// JSONL of {"id", "text", "y_true"} to measure.
    texts: PathBuf,
    /// Attribute key the model reports (e.g. "formality").
    #[arg(long)]
    attribute: String,
    /// Definition of the attribute shown to the model.
    #[arg(long)]
    definition: String,
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    tolerance: f64,
    /// Chat-completions endpoint URL.
    #[arg(long)]
    endpoint: String,
    /// Model name sent in the request body.
    #[arg(long)]
    model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "TOLCAL_API_KEY")]
    key_env: String,
    #[arg(long, value_enum, default_value = "verbal")]
    mode: ModeArg,
    #[arg(long, allow_negative_numbers = true, default_value_t =3)]
    retries: u32,
    #[arg(long, allow_negative_numbers = true, default_value_t =20)]
    resamples: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t =4)]
    concurrency: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t =250)]
    backoff_ms: u64,
    #[arg(long, allow_negative_numbers = true, default_value_t =1.0)]
    temperature: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =1.0)]
    top_p: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =4096)]
    max_tokens: u32,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct DiagramArgs {
    input: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t =10.0)]
    epsilon: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t =10)]
    bins: usize,
    #[arg(long, value_enum, default_value = "unit")]
    scale: ScaleArg,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests land here too; they exit 0.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(if err.is_validation() { 2 } else { 3 });
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Audit(args) => cmd_audit(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Regress(args) => cmd_regress(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Elicit(args) => cmd_elicit(args),
        Command::Diagram(args) => cmd_diagram(args),
    }
}

fn load(path: &Path, scale: ScaleArg) -> Result<Dataset> {
    load_dataset(path, DatasetFormat::from_path(path), scale.into())
}

/// Prints a report as pretty JSON, optionally writing it to a file as well.
fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report serialization");
    if let Some(path) = output {
        std::fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let cfg = ToleranceConfig::new(args.epsilon, args.bins)?;
    let mut dataset = load(&args.input, args.scale)?;
    if let Some(proxy) = args.proxy {
        dataset = attach_proxy(&dataset, proxy.into(), &cfg)?;
    }
    let report = metric_report(&dataset, &cfg)?;
    if let Some(path) = &args.diagram {
        let bins = reliability_bins(&dataset, &cfg)?;
        std::fs::write(path, svg::render_reliability_svg(&bins, dataset.name()))?;
    }
    emit(&report, args.output.as_deref())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let cfg = ToleranceConfig::new(args.epsilon, args.bins)?;
    let train = load(&args.train, args.scale)?;
    let test = load(&args.test, args.scale)?;
    let comparison = compare_calibrators(&train, &test, &cfg)?;

    if let Some(dir) = &args.model_dir {
        std::fs::create_dir_all(dir)?;
        for entry in &comparison.entries {
            if let Some(model) = &entry.model {
                let path = dir.join(format!("{}.json", entry.method));
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(model).expect("model serialization"),
                )?;
            }
        }
    }

    let succeeded = comparison
        .entries
        .iter()
        .filter(|e| e.model.is_some())
        .count();
    emit(&comparison, args.output.as_deref())?;
    if succeeded == 0 {
        return Err(Error::DegenerateFit(
            "all four calibration methods failed on this training data".into(),
        ));
    }
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let tol = ToleranceConfig::new(args.epsilon, args.bins)?;
    let dataset = load(&args.input, args.scale)?;
    let rows = load_features(&args.features)?;
    let features = align_features(&dataset, &rows)?;
    let k = args.k.unwrap_or_else(|| class_count_for(dataset.name()));
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        temperature: args.temperature,
        grad_clip: args.grad_clip,
        split_fraction: args.split_fraction,
        seed: args.seed,
    };
    let report = distill_pipeline(&dataset, &features, k, &cfg, &tol)?;
    if let (Some(path), Some(model)) = (&args.student_out, &report.model) {
        std::fs::write(
            path,
            serde_json::to_string_pretty(model).expect("model serialization"),
        )?;
    }
    emit(&report, args.output.as_deref())
}

#[derive(Serialize)]
struct RegressReport {
    /// Threshold as given, on the 0-100 scale.
    threshold: f64,
    days_matched: usize,
    days_matched_filtered: usize,
    unfiltered: RegressionResult,
    filtered: RegressionResult,
    /// Group keys present on only one side of the stance/covariate join.
    warnings: Vec<String>,
}

fn cmd_regress(args: RegressArgs) -> Result<()> {
    if !args.threshold.is_finite() || !(0.0..=100.0).contains(&args.threshold) {
        return Err(Error::InvalidInput(format!(
            "threshold must lie in [0, 100], got {}",
            args.threshold
        )));
    }
    let dataset = load(&args.input, args.scale)?;
    let covariate = load_covariate(&args.covariate)?;

    let stances = daily_stance(&dataset)?;
    let (x, y, mut warnings) = join_stance_covariate(&stances, &covariate);
    let unfiltered = ols(&x, &y)?;

    let surviving = confidence_filter(&dataset, args.threshold / 100.0)?;
    let filtered_stances = daily_stance(&surviving)?;
    let (fx, fy, filtered_warnings) = join_stance_covariate(&filtered_stances, &covariate);
    if fx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} day(s) matched after filtering at threshold {}; need 3",
            fx.len(),
            args.threshold
        )));
    }
    let filtered = ols(&fx, &fy)?;

    for key in filtered_warnings {
        if !warnings.contains(&key) {
            warnings.push(key);
        }
    }
    for key in &warnings {
        eprintln!("warning: group key {key:?} has no match between stances and covariate");
    }
    emit(
        &RegressReport {
            threshold: args.threshold,
            days_matched: x.len(),
            days_matched_filtered: fx.len(),
            unfiltered,
            filtered,
            warnings,
        },
        args.output.as_deref(),
    )
}

#[derive(Serialize)]
struct SimulateSummary {
    profile: String,
    n_records: usize,
    out: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariate_out: Option<String>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (dataset, covariate) = match args.profile {
        ProfileArg::Identity => (generate(&MiscalibrationProfile::Identity, args.n, args.epsilon, args.seed)?, None),
        ProfileArg::Overconfident => (
            generate(
                &MiscalibrationProfile::OverconfidentPower { gamma: args.gamma },
                args.n,
                args.epsilon,
                args.seed,
            )?,
            None,
        ),
        ProfileArg::Underconfident => (
            generate(
                &MiscalibrationProfile::UnderconfidentPower { gamma: args.gamma },
                args.n,
                args.epsilon,
                args.seed,
            )?,
            None,
        ),
        ProfileArg::BaseRate => (
            generate(
                &MiscalibrationProfile::BaseRate { p: args.p },
                args.n,
                args.epsilon,
                args.seed,
            )?,
            None,
        ),
        ProfileArg::Attenuation => {
            let (records, covariate) = simulate_attenuation(
                &AttenuationConfig::default(),
                args.seed,
                args.days,
                args.sentences_per_day,
            )?;
            (Dataset::new("attenuation", records)?, Some(covariate))
        }
    };
    save_dataset(
        &dataset,
        &args.out,
        DatasetFormat::from_path(&args.out),
        args.scale.into(),
    )?;
    let mut covariate_out = None;
    if let Some(covariate) = covariate {
        let path = args
            .covariate_out
            .as_ref()
            .expect("clap enforces --covariate-out for the attenuation profile");
        save_covariate(path, &covariate)?;
        covariate_out = Some(path.display().to_string());
    }
    emit(
        &SimulateSummary {
            profile: dataset.name().to_string(),
            n_records: dataset.len(),
            out: args.out.display().to_string(),
            covariate_out,
        },
        None,
    )
}

#[derive(Serialize)]
struct ElicitSummary {
    n_records: usize,
    n_failures: usize,
    total_retries: u64,
    out: String,
    failures: Vec<ElicitFailure>,
}

fn cmd_elicit(args: ElicitArgs) -> Result<()> {
    let inputs = load_inputs(&args.texts)?;
    let construct = ConstructPrompt::new(&args.attribute, &args.definition, args.tolerance)?;
    let cfg = ElicitConfig {
        endpoint_url: args.endpoint,
        api_key_env_var: args.key_env,
        model_name: args.model,
        temperature: args.temperature,
        top_p: args.top_p,
        max_tokens: args.max_tokens,
        retries: args.retries,
        resamples: args.resamples,
        concurrency: args.concurrency,
        backoff_ms: args.backoff_ms,
    };
    let mode = match args.mode {
        ModeArg::Verbal => ElicitMode::Verbal,
        ModeArg::Resampling => ElicitMode::Resampling,
    };
    let outcome = elicit_dataset(&inputs, &construct, &cfg, mode)?;
    if outcome.dataset.is_empty() {
        let first = outcome
            .failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_default();
        return Err(Error::Http(format!(
            "all {} texts failed; first error: {first}",
            inputs.len()
        )));
    }
    save_dataset(
        &outcome.dataset,
        &args.out,
        DatasetFormat::from_path(&args.out),
        ConfidenceScale::Unit,
    )?;
    emit(
        &ElicitSummary {
            n_records: outcome.dataset.len(),
            n_failures: outcome.failures.len(),
            total_retries: outcome.total_retries,
            out: args.out.display().to_string(),
            failures: outcome.failures,
        },
        None,
    )
}

fn cmd_diagram(args: DiagramArgs) -> Result<()> {
    let cfg = ToleranceConfig::new(args.epsilon, args.bins)?;
    let dataset = load(&args.input, args.scale)?;
    let bins = reliability_bins(&dataset, &cfg)?;
    std::fs::write(&args.out, svg::render_reliability_svg(&bins, dataset.name()))?;
    Ok(())
}
