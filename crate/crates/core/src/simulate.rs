//! Error fields `x_u = sigma * sum_v xi_v eps_{u-v}` with a finite set of
//! offsets `v` and i.i.d. standard normal innovations, plus synthetic
//! datasets `y_u = f(u;theta)' beta + x_u`.
//!
//! Innovations are drawn on the box padded by the kernel reach in every
//! dimension, so each `x_u` is a full convolution and the field is exactly
//! stationary up to the edges. Innovation `k` of the padded box (row-major)
//! is the counter-based draw `(seed, k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrendError};
use crate::model::{linear_index, power, CoefficientVector, ExponentVector, LatticeGrid};
use crate::rng::CounterRng;

/// Finite moving-average kernel on `Z^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaKernel {
    offsets: Vec<Vec<i64>>,
    coefs: Vec<f64>,
    sigma: f64,
}

/// Inline JSON form: `{"offsets": [[j, k, coef], ...], "sigma": 1.0}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelJson {
    offsets: Vec<Vec<f64>>,
    #[serde(default)]
    sigma: Option<f64>,
}

impl MaKernel {
    pub fn new(offsets: Vec<Vec<i64>>, coefs: Vec<f64>, sigma: f64) -> Result<Self> {
        if offsets.is_empty() || offsets.len() != coefs.len() {
            return Err(TrendError::Invalid(format!("{} offsets but {} coefficients", offsets.len(), coefs.len())));
        }
        let d = offsets[0].len();
        if d == 0 || offsets.iter().any(|o| o.len() != d) {
            return Err(TrendError::Invalid("offsets must all have the same positive dimension".into()));
        }
        if !offsets.iter().any(|o| o.iter().all(|&c| c == 0)) {
            return Err(TrendError::Invalid("kernel must contain the zero offset".into()));
        }
        for (k, o) in offsets.iter().enumerate() {
            if offsets[..k].contains(o) {
                return Err(TrendError::Invalid(format!("offset {o:?} listed twice")));
            }
        }
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(TrendError::Invalid("kernel coefficients must be finite".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(TrendError::Invalid(format!("innovation scale {sigma} must be positive")));
        }
        let kernel = Self { offsets, coefs, sigma };
        if kernel.coef_sum().abs() < 1e-12 {
            log::warn!("kernel coefficients sum to zero; the long-run variance vanishes");
        }
        Ok(kernel)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: KernelJson = serde_json::from_str(text)?;
        let mut offsets = Vec::with_capacity(parsed.offsets.len());
        let mut coefs = Vec::with_capacity(parsed.offsets.len());
        for row in &parsed.offsets {
            let (coef, coords) = row
                .split_last()
                .filter(|(_, c)| !c.is_empty())
                .ok_or_else(|| TrendError::Parse("each offset row is [v_1, ..., v_d, coef]".into()))?;
            let mut o = Vec::with_capacity(coords.len());
            for &c in coords {
                if c.fract() != 0.0 || !c.is_finite() {
                    return Err(TrendError::Parse(format!("offset coordinate {c} is not an integer")));
                }
                o.push(c as i64);
            }
            offsets.push(o);
            coefs.push(*coef);
        }
        Self::new(offsets, coefs, parsed.sigma.unwrap_or(1.0))
    }

    pub fn dims(&self) -> usize {
        self.offsets[0].len()
    }

    pub fn offsets(&self) -> &[Vec<i64>] {
        &self.offsets
    }

    pub fn coefs(&self) -> &[f64] {
        &self.coefs
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn coef_sum(&self) -> f64 {
        self.coefs.iter().sum()
    }

    /// Largest `|v_i|` over the offsets, per dimension.
    pub fn reach(&self) -> Vec<usize> {
        (0..self.dims()).map(|i| self.offsets.iter().map(|o| o[i].unsigned_abs() as usize).max().unwrap_or(0)).collect()
    }

    /// `gamma_v = sigma^2 sum_w xi_w xi_{w+v}`.
    pub fn autocovariance(&self, lag: &[i64]) -> f64 {
        let mut acc = 0.0;
        for (w, cw) in self.offsets.iter().zip(&self.coefs) {
            let shifted: Vec<i64> = w.iter().zip(lag).map(|(a, b)| a + b).collect();
            if let Some(k) = self.offsets.iter().position(|o| *o == shifted) {
                acc += cw * self.coefs[k];
            }
        }
        self.sigma * self.sigma * acc
    }

    /// `2 pi F(0) = sigma^2 (sum_v xi_v)^2`.
    pub fn long_run_variance(&self) -> f64 {
        let s = self.coef_sum();
        self.sigma * self.sigma * s * s
    }
}

/// Built-in two-dimensional kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKernel {
    /// `eps_u - 0.12` times each of the 8 nearest neighbours.
    Ma1Multidirection,
    /// `eps_u + a_j` on `(+-j, 0)` and `(0, +-j)` with `a = (0.14, 0.12, 0.10, 0.08)`.
    Ma4Multilateral,
    /// `eps_u + 0.95^|j|` on the diagonal `(j, j)`, `0 < |j| <= 9`.
    Ma9Diagonal,
}

impl BuiltinKernel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ma1_multidirection" | "ma1" => Ok(Self::Ma1Multidirection),
            "ma4_multilateral" | "ma4" => Ok(Self::Ma4Multilateral),
            "ma9_diagonal" | "ma9" => Ok(Self::Ma9Diagonal),
            other => Err(TrendError::UnknownKernel(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ma1Multidirection => "ma1_multidirection",
            Self::Ma4Multilateral => "ma4_multilateral",
            Self::Ma9Diagonal => "ma9_diagonal",
        }
    }

    pub fn kernel(self) -> MaKernel {
        let mut offsets = vec![vec![0, 0]];
        let mut coefs = vec![1.0];
        match self {
            Self::Ma1Multidirection => {
                for j in -1..=1 {
                    for k in -1..=1 {
                        if (j, k) != (0, 0) {
                            offsets.push(vec![j, k]);
                            coefs.push(-0.12);
                        }
                    }
                }
            }
            Self::Ma4Multilateral => {
                let a = [0.14, 0.12, 0.10, 0.08];
                for j in 1..=4i64 {
                    for o in [[j, 0], [-j, 0], [0, j], [0, -j]] {
                        offsets.push(o.to_vec());
                        coefs.push(a[(j - 1) as usize]);
                    }
                }
            }
            Self::Ma9Diagonal => {
                for j in (-9..=9i64).filter(|&j| j != 0) {
                    offsets.push(vec![j, j]);
                    coefs.push(0.95f64.powi(j.abs() as i32));
                }
            }
        }
        MaKernel { offsets, coefs, sigma: 1.0 }
    }
}

/// Kernel by name (`ma1_multidirection`, `ma4_multilateral`, `ma9_diagonal`).
pub fn builtin_kernel(name: &str) -> Result<MaKernel> {
    Ok(BuiltinKernel::parse(name)?.kernel())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorFieldModel {
    Iid { sigma: f64 },
    FiniteMa { kernel: MaKernel },
}

impl ErrorFieldModel {
    pub fn iid(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(TrendError::Invalid(format!("noise scale {sigma} must be positive")));
        }
        Ok(Self::Iid { sigma })
    }

    pub fn builtin(kernel: BuiltinKernel) -> Self {
        Self::FiniteMa { kernel: kernel.kernel() }
    }

    /// `2 pi F(0)` of the field.
    pub fn long_run_variance(&self) -> f64 {
        match self {
            Self::Iid { sigma } => sigma * sigma,
            Self::FiniteMa { kernel } => kernel.long_run_variance(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Iid { sigma } => sigma * sigma,
            Self::FiniteMa { kernel } => kernel.autocovariance(&vec![0; kernel.dims()]),
        }
    }
}

/// Draws one error field on the box with the given extents.
pub fn gen_error_field(model: &ErrorFieldModel, n: &[usize], seed: u64) -> Result<LatticeGrid> {
    if n.is_empty() || n.contains(&0) {
        return Err(TrendError::Invalid(format!("extents {n:?} must be positive")));
    }
    let rng = CounterRng::new(seed);
    let n_obs: usize = n.iter().product();
    match model {
        ErrorFieldModel::Iid { sigma } => {
            if !(*sigma > 0.0) {
                return Err(TrendError::Invalid(format!("noise scale {sigma} must be positive")));
            }
            let values = (0..n_obs).into_par_iter().map(|k| sigma * rng.standard_normal(k as u64)).collect();
            LatticeGrid::new(n.to_vec(), values)
        }
        ErrorFieldModel::FiniteMa { kernel } => {
            if kernel.dims() != n.len() {
                return Err(TrendError::Shape(format!(
                    "kernel is {}-dimensional, lattice is {}-dimensional",
                    kernel.dims(),
                    n.len()
                )));
            }
            let reach = kernel.reach();
            let padded: Vec<usize> = n.iter().zip(&reach).map(|(ni, mi)| ni + 2 * mi).collect();
            let n_padded: usize = padded.iter().product();
            let eps: Vec<f64> = (0..n_padded).into_par_iter().map(|k| rng.standard_normal(k as u64)).collect();

            // Site u (1-based) sits at padded position u + reach; eps_{u-v}
            // is then at u + reach - v, always inside the padded box.
            let taps: Vec<(isize, f64)> = kernel
                .offsets()
                .iter()
                .zip(kernel.coefs())
                .map(|(v, &c)| {
                    let mut stride = 1isize;
                    let mut shift = 0isize;
                    for i in (0..v.len()).rev() {
                        shift -= v[i] as isize * stride;
                        stride *= padded[i] as isize;
                    }
                    (shift, c)
                })
                .collect();
            let sigma = kernel.sigma();
            let grid = LatticeGrid::from_fn(n.to_vec(), |_| 0.0)?;
            let values = grid
                .sites()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|u| {
                    let centre: Vec<usize> = u.iter().zip(&reach).map(|(ui, mi)| ui + mi).collect();
                    let base = linear_index(&centre, &padded) as isize;
                    sigma * taps.iter().map(|&(s, c)| c * eps[(base + s) as usize]).sum::<f64>()
                })
                .collect();
            LatticeGrid::new(n.to_vec(), values)
        }
    }
}

/// The noise-free surface `f(u;theta)' beta` on the box.
pub fn trend_surface(theta: &ExponentVector, beta: &CoefficientVector, n: &[usize]) -> Result<LatticeGrid> {
    let spec = theta.spec()?;
    if !beta.matches(&spec) || theta.dims() != n.len() {
        return Err(TrendError::Shape("exponents, coefficients and extents disagree".into()));
    }
    let profiles: Vec<Vec<f64>> = theta
        .blocks()
        .iter()
        .zip(beta.blocks())
        .zip(n)
        .map(|((tb, bb), &ni)| {
            (1..=ni).map(|t| tb.iter().zip(bb).map(|(&e, &c)| c * power(t as f64, e)).sum()).collect()
        })
        .collect();
    LatticeGrid::from_fn(n.to_vec(), |u| u.iter().enumerate().map(|(i, &ui)| profiles[i][ui - 1]).sum())
}

/// `y_u = f(u;theta)' beta + x_u`.
pub fn gen_dataset(
    theta: &ExponentVector,
    beta: &CoefficientVector,
    model: &ErrorFieldModel,
    n: &[usize],
    seed: u64,
) -> Result<LatticeGrid> {
    trend_surface(theta, beta, n)?.add(&gen_error_field(model, n, seed)?)
}
