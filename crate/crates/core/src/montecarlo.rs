//! Replication studies: bias, mean squared error and empirical size of the
//! nonlinear least-squares estimates and of the least-squares coefficients at
//! the true exponents.
//!
//! Replication `r` draws its dataset with seed `base_seed + r`. Replications
//! run in parallel and are reduced in index order, so a report depends only
//! on the configuration.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{lse_covariance, param_name, ParamKind, Z_975};
use crate::error::{Result, TrendError};
use crate::model::{validate_theta, CoefficientVector, ExponentVector, LatticeGrid, ModelSpec, ParamSpace};
use crate::nlse::{fit, fit_residuals, lse_known_theta, FitOptions};
use crate::simulate::{gen_dataset, BuiltinKernel, ErrorFieldModel, MaKernel};
use crate::spectral::{long_run_variance, LrvOptions};

/// Two-sided 1% standard normal critical value.
pub const Z_995: f64 = 2.575_829_303_548_901;

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Exponents and coefficients by nonlinear least squares.
    Nlse,
    /// Coefficients by least squares at the true exponents.
    Lse,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Nlse => "nlse",
            Estimator::Lse => "lse",
        }
    }
}

fn default_replications() -> usize {
    1000
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Nlse, Estimator::Lse]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub theta: ExponentVector,
    pub beta: CoefficientVector,
    pub extents: Vec<Vec<usize>>,
    pub error_model: ErrorFieldModel,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub space: ParamSpace,
    #[serde(default)]
    pub fit_options: FitOptions,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Long-run variance used in the standard errors.
    #[serde(default)]
    pub lrv: LrvOptions,
    /// Whether size columns are reported.
    #[serde(default = "default_true")]
    pub report_sizes: bool,
    /// Whether per-replication estimates are kept in the report.
    #[serde(default)]
    pub keep_raw: bool,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(TrendError::Invalid("need at least one replication".into()));
        }
        if self.extents.is_empty() {
            return Err(TrendError::Invalid("need at least one lattice size".into()));
        }
        if self.estimators.is_empty() {
            return Err(TrendError::Invalid("need at least one estimator".into()));
        }
        let spec = self.theta.spec()?;
        if !self.beta.matches(&spec) {
            return Err(TrendError::Shape("coefficients do not match exponents".into()));
        }
        let report = validate_theta(&self.theta, &self.space);
        if !report.is_valid() {
            return Err(TrendError::Invalid(report.violations.join("; ")));
        }
        if self.beta.flat().iter().any(|&b| b == 0.0 || !b.is_finite()) {
            return Err(TrendError::Invalid("true coefficients must be nonzero".into()));
        }
        for n in &self.extents {
            if n.len() != spec.dims() || n.iter().any(|&ni| ni < 2) {
                return Err(TrendError::Invalid(format!("lattice size {n:?} does not fit the model")));
            }
        }
        match &self.error_model {
            ErrorFieldModel::Iid { sigma } => {
                ErrorFieldModel::iid(*sigma)?;
            }
            ErrorFieldModel::FiniteMa { kernel } => {
                MaKernel::new(kernel.offsets().to_vec(), kernel.coefs().to_vec(), kernel.sigma())?;
                if kernel.dims() != spec.dims() {
                    return Err(TrendError::Shape("kernel dimension differs from the model".into()));
                }
            }
        }
        self.fit_options.validate()
    }

    fn parameters(&self) -> Vec<(ParamKind, usize, usize, f64)> {
        let mut out = Vec::new();
        for (kind, blocks) in [(ParamKind::Theta, self.theta.blocks()), (ParamKind::Beta, self.beta.blocks())] {
            for (i, block) in blocks.iter().enumerate() {
                for (j, &v) in block.iter().enumerate() {
                    out.push((kind, i + 1, j + 1, v));
                }
            }
        }
        out
    }
}

/// Configuration of one of the eight built-in designs: designs 1-2 i.i.d.
/// errors, 3-4 the 8-neighbour MA(1), 5-6 the multilateral MA(4) and 7-8 the
/// diagonal MA(9); odd designs use exponents (1, 1) and even designs (2, 0.5).
pub fn paper_study(table: usize) -> Result<StudyConfig> {
    if !(1..=8).contains(&table) {
        return Err(TrendError::Invalid(format!("design {table} is not one of 1..8")));
    }
    let theta = if table % 2 == 1 { vec![vec![1.0], vec![1.0]] } else { vec![vec![2.0], vec![0.5]] };
    let error_model = match table.div_ceil(2) {
        1 => ErrorFieldModel::Iid { sigma: 1.0 },
        2 => ErrorFieldModel::builtin(BuiltinKernel::Ma1Multidirection),
        3 => ErrorFieldModel::builtin(BuiltinKernel::Ma4Multilateral),
        _ => ErrorFieldModel::builtin(BuiltinKernel::Ma9Diagonal),
    };
    Ok(StudyConfig {
        theta: ExponentVector::new(theta),
        beta: CoefficientVector::new(vec![vec![1.0], vec![1.0]]),
        extents: vec![vec![8, 12], vec![10, 10], vec![11, 20], vec![15, 15]],
        error_model,
        replications: 1000,
        base_seed: 0,
        space: ParamSpace::default_for(2),
        fit_options: FitOptions::default(),
        estimators: default_estimators(),
        lrv: LrvOptions::default(),
        report_sizes: table <= 2,
        keep_raw: false,
    })
}

/// Summary of one estimator for one parameter at one lattice size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: Vec<usize>,
    pub estimator: Estimator,
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    pub size5: Option<f64>,
    pub size1: Option<f64>,
    /// Replications used.
    pub replications: usize,
    pub failures: usize,
}

/// Estimates and standard errors of one replication for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimates {
    pub n: Vec<usize>,
    pub estimator: Estimator,
    /// Replication index and its draw; failed replications are absent.
    pub draws: Vec<(usize, Draw)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw: Vec<RawEstimates>,
}

impl StudyReport {
    pub fn cell(&self, n: &[usize], estimator: Estimator, parameter: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.n == n && c.estimator == estimator && c.parameter == parameter)
    }

    /// CSV with columns `n1..nd, estimator, parameter, bias, mse, size5,
    /// size1, failures`; sizes are empty when not reported.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.cells.first().map_or(2, |c| c.n.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=d).map(|i| format!("n{i}")).collect();
        header.extend(["estimator", "parameter", "bias", "mse", "size5", "size1", "failures"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let mut row: Vec<String> = c.n.iter().map(|v| v.to_string()).collect();
            row.push(c.estimator.name().into());
            row.push(c.parameter.clone());
            row.push(c.bias.to_string());
            row.push(c.mse.to_string());
            row.push(opt(c.size5));
            row.push(opt(c.size1));
            row.push(c.failures.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

struct Replication {
    nlse: Option<Draw>,
    lse: Option<Draw>,
}

fn run_nlse(config: &StudyConfig, spec: &ModelSpec, grid: &LatticeGrid, n: &[usize]) -> Result<Draw> {
    let fitted = fit(grid, spec, &config.space, &config.fit_options)?;
    let residuals = fit_residuals(grid, &fitted.theta_hat, &fitted.beta_hat)?;
    let lrv = long_run_variance(&residuals, &config.lrv)?;
    let report = fitted.inference(n, lrv)?;
    Ok(Draw {
        estimates: report.parameters.iter().map(|q| q.estimate).collect(),
        se: report.parameters.iter().map(|q| q.se).collect(),
    })
}

fn run_lse(config: &StudyConfig, grid: &LatticeGrid, n: &[usize]) -> Result<Draw> {
    let beta = lse_known_theta(grid, &config.theta)?;
    let residuals = fit_residuals(grid, &config.theta, &beta)?;
    let lrv = long_run_variance(&residuals, &config.lrv)?;
    let cov = lse_covariance(&config.theta, n, lrv)?;
    Ok(Draw { estimates: beta.flat(), se: (0..cov.nrows()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect() })
}

fn replicate(config: &StudyConfig, spec: &ModelSpec, n: &[usize], r: usize) -> Result<Replication> {
    let seed = config.base_seed.wrapping_add(r as u64);
    let grid = gen_dataset(&config.theta, &config.beta, &config.error_model, n, seed)?;
    let wants = |e| config.estimators.contains(&e);
    let keep_numerical = |res: Result<Draw>| match res {
        Ok(d) => Ok(Some(d)),
        Err(e) if e.is_numerical() => {
            log::debug!("replication {r} at {n:?} failed: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let nlse = if wants(Estimator::Nlse) { keep_numerical(run_nlse(config, spec, &grid, n))? } else { None };
    let lse = if wants(Estimator::Lse) { keep_numerical(run_lse(config, &grid, n))? } else { None };
    Ok(Replication { nlse, lse })
}

/// Aggregates `(index, draw)` pairs over the chosen parameters.
fn summarize(
    config: &StudyConfig,
    n: &[usize],
    estimator: Estimator,
    params: &[(ParamKind, usize, usize, f64)],
    offset: usize,
    draws: &[(usize, Draw)],
    failures: usize,
) -> Vec<Cell> {
    let used = draws.len();
    params
        .iter()
        .enumerate()
        .map(|(k, &(kind, dim, term, truth))| {
            let idx = offset + k;
            let mut bias = 0.0;
            let mut mse = 0.0;
            let mut rej5 = 0usize;
            let mut rej1 = 0usize;
            for (_, d) in draws {
                let err = d.estimates[idx] - truth;
                bias += err;
                mse += err * err;
                let z = (err / d.se[idx]).abs();
                rej5 += usize::from(z > Z_975);
                rej1 += usize::from(z > Z_995);
            }
            let denom = used.max(1) as f64;
            let size = |count: usize| (config.report_sizes && used > 0).then(|| count as f64 / denom);
            Cell {
                n: n.to_vec(),
                estimator,
                parameter: param_name(kind, dim, term),
                truth,
                bias: if used > 0 { bias / denom } else { f64::NAN },
                mse: if used > 0 { mse / denom } else { f64::NAN },
                size5: size(rej5),
                size1: size(rej1),
                replications: used,
                failures,
            }
        })
        .collect()
}

pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let spec = config.theta.spec()?;
    let params = config.parameters();
    let p = spec.p();
    let mut cells = Vec::new();
    let mut raw = Vec::new();
    for n in &config.extents {
        let reps: Vec<Result<Replication>> =
            (0..config.replications).into_par_iter().map(|r| replicate(config, &spec, n, r)).collect();
        let reps: Vec<Replication> = reps.into_iter().collect::<Result<_>>()?;
        for &estimator in &config.estimators {
            let draws: Vec<(usize, Draw)> = reps
                .iter()
                .enumerate()
                .filter_map(|(r, rep)| {
                    let d = match estimator {
                        Estimator::Nlse => rep.nlse.as_ref(),
                        Estimator::Lse => rep.lse.as_ref(),
                    };
                    d.map(|d| (r, d.clone()))
                })
                .collect();
            let failures = config.replications - draws.len();
            if failures as f64 > MAX_FAILURE_SHARE * config.replications as f64 {
                return Err(TrendError::TooManyFailures { failed: failures, total: config.replications });
            }
            if failures > 0 {
                log::warn!("{failures} {} replications failed at {n:?}", estimator.name());
            }
            match estimator {
                Estimator::Nlse => cells.extend(summarize(config, n, estimator, &params, 0, &draws, failures)),
                // Least squares estimates only the coefficients.
                Estimator::Lse => {
                    let betas: Vec<_> = params[p..].iter().map(|&(_, i, j, v)| (ParamKind::Beta, i, j, v)).collect();
                    cells.extend(summarize(config, n, estimator, &betas, 0, &draws, failures));
                }
            }
            if config.keep_raw {
                raw.push(RawEstimates { n: n.clone(), estimator, draws });
            }
        }
    }
    Ok(StudyReport { cells, raw })
}
