use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lattice_trend::asymptotics::{wald_test, InferenceReport, ParamEstimate};
use lattice_trend::model::{CoefficientVector, ExponentVector, LatticeGrid, ModelSpec, ParamSpace};
use lattice_trend::montecarlo::{paper_study, run_study, StudyConfig};
use lattice_trend::nlse::{fit, fit_residuals, FitOptions, FitResult};
use lattice_trend::simulate::{gen_dataset, gen_error_field, trend_surface, BuiltinKernel, ErrorFieldModel, MaKernel};
use lattice_trend::spectral::{long_run_variance, LrvMode, LrvOptions};
use lattice_trend::{Result, TrendError};

/// Power-law trend estimation on regular lattices.
#[derive(Debug, Parser)]
#[command(name = "lattice-trend", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit exponents and coefficients to a lattice CSV (`u1,..,ud,y`).
    Fit(FitArgs),
    /// Write a simulated error field or dataset as lattice CSV.
    Simulate(SimulateArgs),
    /// Run a replication study and write its summary table.
    Study(StudyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LrvArg {
    Independence,
    Nonparametric,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dims: usize,
    /// Terms per dimension.
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<usize>,
    /// Lower exponent bound, one value or one per dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Vec<f64>,
    /// Upper exponent bound, one value or one per dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Vec<f64>,
    #[arg(long, default_value_t = ParamSpace::DEFAULT_DELTA)]
    delta: f64,
    /// Coarse grid points per exponent.
    #[arg(long, default_value_t = 9)]
    resolution: usize,
    #[arg(long, value_enum, default_value = "independence")]
    lrv: LrvArg,
    /// Lag-window bandwidths per dimension for `--lrv nonparametric`.
    #[arg(long, value_delimiter = ',')]
    bandwidth: Option<Vec<usize>>,
    /// Null values to test, as `name=value` (e.g. `theta_1_1=1`).
    #[arg(long = "null")]
    nulls: Vec<String>,
    /// Output JSON path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// `iid`, a built-in kernel (`ma1`, `ma4`, `ma9` or full names) or inline
    /// JSON `{"offsets": [[j, k, coef], ...]}`.
    #[arg(long, default_value = "iid")]
    kernel: String,
    /// Innovation scale.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long)]
    seed: u64,
    /// Terms per dimension of an added trend.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    /// Trend exponents, stacked by dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Trend coefficients, stacked by dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    /// Omit the error field.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// One of the eight built-in designs (1-8).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    paper_table: Option<usize>,
    /// Study configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    out: Format,
    /// Output path; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; all available cores by default.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ParamOut<'a> {
    #[serde(flatten)]
    estimate: &'a ParamEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    z_vs_null: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    fit: &'a FitResult,
    lrv_mode: LrvMode,
    two_pi_f0: f64,
    parameters: Vec<ParamOut<'a>>,
    covariance: &'a [Vec<f64>],
}

fn writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn broadcast(values: &[f64], dims: usize, default: f64, name: &str) -> Result<Vec<f64>> {
    match values.len() {
        0 => Ok(vec![default; dims]),
        1 => Ok(vec![values[0]; dims]),
        k if k == dims => Ok(values.to_vec()),
        k => Err(TrendError::Invalid(format!("--{name} has {k} values for {dims} dimensions"))),
    }
}

fn run_fit(args: FitArgs) -> Result<()> {
    if args.p.len() != args.dims {
        return Err(TrendError::Invalid(format!("--p has {} entries but --dims is {}", args.p.len(), args.dims)));
    }
    let spec = ModelSpec::new(args.p.clone())?;
    let space = ParamSpace::new(
        broadcast(&args.lower, args.dims, ParamSpace::DEFAULT_LOWER, "lower")?,
        broadcast(&args.upper, args.dims, ParamSpace::DEFAULT_UPPER, "upper")?,
        args.delta,
    )?;
    let grid = LatticeGrid::read_csv(BufReader::new(File::open(&args.input)?))?;
    if grid.dims() != args.dims {
        return Err(TrendError::Invalid(format!("input has {} coordinates, --dims is {}", grid.dims(), args.dims)));
    }
    let opts = FitOptions { resolution: args.resolution, ..FitOptions::default() };
    let result = fit(&grid, &spec, &space, &opts)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    let lrv_opts = match args.lrv {
        LrvArg::Independence => LrvOptions::default(),
        LrvArg::Nonparametric => LrvOptions::nonparametric(args.bandwidth.clone()),
    };
    let residuals = fit_residuals(&grid, &result.theta_hat, &result.beta_hat)?;
    let two_pi_f0 = long_run_variance(&residuals, &lrv_opts)?;
    let report: InferenceReport = result.inference(grid.extents(), two_pi_f0)?;

    let mut tests = vec![None; report.parameters.len()];
    for entry in &args.nulls {
        let (name, value) =
            entry.split_once('=').ok_or_else(|| TrendError::Invalid(format!("--null `{entry}` is not name=value")))?;
        let index =
            report.find(name.trim()).ok_or_else(|| TrendError::Invalid(format!("unknown parameter `{name}`")))?;
        let value: f64 =
            value.trim().parse().map_err(|_| TrendError::Invalid(format!("bad null value in `{entry}`")))?;
        tests[index] = Some(wald_test(&report, index, value)?);
    }
    let output = FitOutput {
        fit: &result,
        lrv_mode: lrv_opts.mode,
        two_pi_f0,
        parameters: report
            .parameters
            .iter()
            .zip(&tests)
            .map(|(q, t)| ParamOut { estimate: q, z_vs_null: t.map(|t| t.statistic), p_value: t.map(|t| t.p_value) })
            .collect(),
        covariance: &report.covariance,
    };
    let mut w = writer(&args.out)?;
    serde_json::to_writer_pretty(&mut w, &output)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn error_model(kernel: &str, sigma: f64) -> Result<ErrorFieldModel> {
    let trimmed = kernel.trim();
    if trimmed == "iid" {
        ErrorFieldModel::iid(sigma)
    } else if trimmed.starts_with('{') {
        Ok(ErrorFieldModel::FiniteMa { kernel: MaKernel::from_json(trimmed)? })
    } else {
        let k = BuiltinKernel::parse(trimmed)?.kernel();
        let k = MaKernel::new(k.offsets().to_vec(), k.coefs().to_vec(), sigma)?;
        Ok(ErrorFieldModel::FiniteMa { kernel: k })
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let model = error_model(&args.kernel, args.sigma)?;
    let trend = match (&args.p, &args.theta, &args.beta) {
        (Some(p), Some(t), Some(b)) => {
            let spec = ModelSpec::new(p.clone())?;
            Some((ExponentVector::from_flat(&spec, t)?, CoefficientVector::from_flat(&spec, b)?))
        }
        (None, None, None) => None,
        _ => return Err(TrendError::Invalid("--p, --theta and --beta go together".into())),
    };
    let grid = match (trend, args.noiseless) {
        (Some((t, b)), false) => gen_dataset(&t, &b, &model, &args.n, args.seed)?,
        (Some((t, b)), true) => trend_surface(&t, &b, &args.n)?,
        (None, false) => gen_error_field(&model, &args.n, args.seed)?,
        (None, true) => return Err(TrendError::Invalid("--noiseless needs a trend".into())),
    };
    let mut w = writer(&args.out)?;
    grid.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_study_command(args: StudyArgs) -> Result<()> {
    let mut config: StudyConfig = match (args.paper_table, &args.config) {
        (Some(k), None) => paper_study(k)?,
        (None, Some(path)) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        _ => return Err(TrendError::Invalid("give exactly one of --paper-table and --config".into())),
    };
    config.base_seed = args.seed;
    if let Some(r) = args.reps {
        config.replications = r;
    }
    let report = match args.threads {
        Some(t) => {
            if t == 0 {
                return Err(TrendError::Invalid("--threads must be positive".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| TrendError::Invalid(e.to_string()))?;
            pool.install(|| run_study(&config))?
        }
        None => run_study(&config)?,
    };
    let mut w = writer(&args.output)?;
    match args.out {
        Format::Csv => report.write_csv(&mut w)?,
        Format::Json => {
            report.write_json(&mut w)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn diagnostic(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            diagnostic("usage", e.to_string().lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Study(a) => run_study_command(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_numerical() => {
            diagnostic("numerical", &e.to_string());
            ExitCode::from(2)
        }
        Err(e) => {
            diagnostic("validation", &e.to_string());
            ExitCode::from(1)
        }
    }
}
