//! Long-run variance `2 pi F(0)` of the error field, estimated from
//! residuals.
//!
//! The nonparametric estimate is a lag-window sum of sample
//! autocovariances, `sum_{|v_i| <= m_i} prod_i (1 - |v_i|/(m_i+1)) gamma_v`,
//! where `gamma_v = N^{-1} sum_u r_u r_{u+v}` over pairs inside the box. The
//! product Bartlett window keeps the weighting positive semidefinite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrendError};
use crate::model::LatticeGrid;

/// Relative positivity floor applied to the nonparametric estimate.
pub const LRV_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrvMode {
    /// `RSS / N`: errors treated as uncorrelated.
    Independence,
    /// Bartlett lag-window estimate.
    Nonparametric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrvOptions {
    pub mode: LrvMode,
    /// Per-dimension bandwidths; `None` selects `floor(n_i^{1/3})`.
    pub bandwidth: Option<Vec<usize>>,
}

impl Default for LrvOptions {
    fn default() -> Self {
        Self { mode: LrvMode::Independence, bandwidth: None }
    }
}

impl LrvOptions {
    pub fn nonparametric(bandwidth: Option<Vec<usize>>) -> Self {
        Self { mode: LrvMode::Nonparametric, bandwidth }
    }

    pub fn bandwidths_for(&self, n: &[usize]) -> Vec<usize> {
        match &self.bandwidth {
            Some(m) => m.clone(),
            None => n.iter().map(|&ni| default_bandwidth(ni)).collect(),
        }
    }
}

/// `floor(n^{1/3})`, guarded against `powf` rounding at perfect cubes.
pub fn default_bandwidth(n: usize) -> usize {
    let mut m = (n as f64).cbrt().floor() as usize;
    while (m + 1).pow(3) <= n {
        m += 1;
    }
    while m > 0 && m.pow(3) > n {
        m -= 1;
    }
    m
}

/// `sum_u r_u^2 / N`.
pub fn lrv_independence(residuals: &LatticeGrid) -> f64 {
    let value = residuals.sum_of_squares() / residuals.n_obs() as f64;
    if value == 0.0 {
        log::warn!("all residuals are zero; the fit is degenerate");
    }
    value
}

/// Sample autocovariance at `lag` with denominator `N`.
pub fn sample_autocovariance(residuals: &LatticeGrid, lag: &[i64]) -> f64 {
    let n = residuals.extents();
    let d = n.len();
    // Sites u with u + lag inside the box: per-dimension ranges.
    let lo: Vec<usize> = lag.iter().map(|&l| if l < 0 { (-l) as usize } else { 0 }).collect();
    let hi: Vec<usize> =
        lag.iter().zip(n).map(|(&l, &ni)| if l > 0 { ni.saturating_sub(l as usize) } else { ni }).collect();
    if (0..d).any(|i| lo[i] >= hi[i]) {
        return 0.0;
    }
    let mut strides = vec![1isize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * n[i + 1] as isize;
    }
    let shift: isize = lag.iter().zip(&strides).map(|(&l, &s)| l as isize * s).sum();
    let values = residuals.values();
    let mut site = lo.clone();
    let mut acc = 0.0;
    loop {
        let k: isize = site.iter().zip(&strides).map(|(&u, &s)| u as isize * s).sum();
        acc += values[k as usize] * values[(k + shift) as usize];
        let mut dim = d;
        loop {
            if dim == 0 {
                return acc / residuals.n_obs() as f64;
            }
            dim -= 1;
            site[dim] += 1;
            if site[dim] < hi[dim] {
                break;
            }
            site[dim] = lo[dim];
        }
    }
}

/// Bartlett lag-window estimate of `2 pi F(0)`, floored at
/// `LRV_FLOOR * RSS / N`.
pub fn lrv_nonparametric(residuals: &LatticeGrid, opts: &LrvOptions) -> Result<f64> {
    let n = residuals.extents();
    let m = opts.bandwidths_for(n);
    if m.len() != n.len() {
        return Err(TrendError::Shape(format!("{} bandwidths for a {}-dimensional lattice", m.len(), n.len())));
    }
    for (i, (&mi, &ni)) in m.iter().zip(n).enumerate() {
        if mi >= ni {
            return Err(TrendError::BandwidthTooLarge { dim: i + 1, bandwidth: mi, extent: ni });
        }
    }

    // gamma_{-v} = gamma_v: visit lags whose first nonzero coordinate is
    // positive and double them.
    let mut lags: Vec<Vec<i64>> = vec![vec![]];
    for &mi in &m {
        let mi = mi as i64;
        lags = lags
            .into_iter()
            .flat_map(|l| {
                (-mi..=mi).map(move |v| {
                    let mut next = l.clone();
                    next.push(v);
                    next
                })
            })
            .collect();
    }
    let half: Vec<Vec<i64>> =
        lags.into_iter().filter(|l| l.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0)).collect();
    let weight = |lag: &[i64]| -> f64 {
        lag.iter().zip(&m).map(|(&v, &mi)| 1.0 - v.unsigned_abs() as f64 / (mi as f64 + 1.0)).product()
    };
    let gamma0 = lrv_independence(residuals);
    let off: Vec<f64> = half.par_iter().map(|lag| 2.0 * weight(lag) * sample_autocovariance(residuals, lag)).collect();
    let estimate = gamma0 + off.iter().sum::<f64>();
    Ok(estimate.max(LRV_FLOOR * gamma0))
}

/// Dispatches on [`LrvOptions::mode`].
pub fn long_run_variance(residuals: &LatticeGrid, opts: &LrvOptions) -> Result<f64> {
    match opts.mode {
        LrvMode::Independence => Ok(lrv_independence(residuals)),
        LrvMode::Nonparametric => lrv_nonparametric(residuals, opts),
    }
}
