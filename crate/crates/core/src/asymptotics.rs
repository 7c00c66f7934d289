//! Limit matrices, plug-in covariance of the estimates and Wald tests.
//!
//! With `phi_i` the vector `(theta_ij + 1)^{-1}` and `Phi_i` the Cauchy
//! matrix `(theta_ij + theta_ik + 1)^{-1}`, the `p x p` matrices are built
//! blockwise:
//!
//! ```text
//!            diagonal block            off-diagonal block (i != k)
//! Phi        Phi_i                     phi_i phi_k'
//! Phi+       Phi_i o Phi_i             phi_i (phi_k o phi_k)'
//! Phi++      2 Phi_i o Phi_i o Phi_i   (phi_i o phi_i)(phi_k o phi_k)'
//! ```
//!
//! and `Upsilon = Phi++ - Phi+' Phi^{-1} Phi+`. With `D = N^{1/2}
//! diag(n_i^theta_ij)`, `L = diag(log n_i)` and `B = (beta_diag^{-1}, -I)`,
//! the estimates `(theta_hat, beta_hat)` are approximately normal with
//! covariance `2 pi F(0) (L+ D+^{-1}) B' Upsilon^{-1} B (D+^{-1} L+)`, a
//! matrix of rank `p` only.
//!
//! `Phi^{-1}` has a closed form: each diagonal block is a Cauchy matrix with
//! an explicit inverse, the off-diagonal blocks are rank one, and a single
//! zero exponent borders the matrix with a row of `phi` entries.

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Result, TrendError};
use crate::model::{CoefficientVector, ExponentVector};

/// Gap below which the closed-form inverse reports a singularity.
pub const FORMULA_EPS: f64 = 1e-12;

/// Two-sided 5% standard normal critical value.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// `Phi(g, h)`: limit of the scaled cross moments of `f(u;g)` and `f(u;h)`.
pub fn phi_matrix(g: &ExponentVector, h: &ExponentVector) -> DMatrix<f64> {
    let rows = stacked(g);
    let cols = stacked(h);
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        let (i, ga) = rows[a];
        let (k, hb) = cols[b];
        if i == k {
            1.0 / (ga + hb + 1.0)
        } else {
            1.0 / ((ga + 1.0) * (hb + 1.0))
        }
    })
}

/// Single-log moments: diagonal blocks `(a + b + 1)^{-2}`, off-diagonal
/// blocks `phi_i (phi_k o phi_k)'`.
pub fn phi_plus_matrix(theta: &ExponentVector) -> DMatrix<f64> {
    let pos = stacked(theta);
    DMatrix::from_fn(pos.len(), pos.len(), |a, b| {
        let (i, ta) = pos[a];
        let (k, tb) = pos[b];
        if i == k {
            (ta + tb + 1.0).powi(-2)
        } else {
            1.0 / ((ta + 1.0) * (tb + 1.0).powi(2))
        }
    })
}

/// Double-log moments: diagonal blocks `2 (a + b + 1)^{-3}`, off-diagonal
/// blocks `(phi_i o phi_i)(phi_k o phi_k)'`.
pub fn phi_plus_plus_matrix(theta: &ExponentVector) -> DMatrix<f64> {
    let pos = stacked(theta);
    DMatrix::from_fn(pos.len(), pos.len(), |a, b| {
        let (i, ta) = pos[a];
        let (k, tb) = pos[b];
        if i == k {
            2.0 * (ta + tb + 1.0).powi(-3)
        } else {
            1.0 / ((ta + 1.0).powi(2) * (tb + 1.0).powi(2))
        }
    })
}

fn stacked(h: &ExponentVector) -> Vec<(usize, f64)> {
    h.blocks().iter().enumerate().flat_map(|(i, b)| b.iter().map(move |&e| (i, e))).collect()
}

#[derive(Debug, Clone)]
pub struct LimitMatrices {
    /// `phi_i`, one per dimension.
    pub phi_vecs: Vec<DVector<f64>>,
    pub phi: DMatrix<f64>,
    pub phi_inverse: DMatrix<f64>,
    pub phi_plus: DMatrix<f64>,
    pub phi_plus_plus: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub upsilon_inverse: DMatrix<f64>,
    /// `p x 2p` matrix `(beta_diag^{-1}, -I_p)`.
    pub b: DMatrix<f64>,
    pub beta_diag: DMatrix<f64>,
    /// Whether `phi_inverse` came from the closed form.
    pub closed_form_inverse: bool,
}

impl LimitMatrices {
    /// `B' Upsilon^{-1} B`, the normalized `2p x 2p` limit covariance per unit
    /// of `2 pi F(0)`.
    pub fn normalized_covariance(&self) -> DMatrix<f64> {
        self.b.transpose() * &self.upsilon_inverse * &self.b
    }
}

/// Builds `Phi`, `Phi+`, `Phi++`, `Upsilon` and `B` at `(theta, beta)`.
pub fn limit_matrices(theta: &ExponentVector, beta: &CoefficientVector) -> Result<LimitMatrices> {
    let spec = theta.spec()?;
    if !beta.matches(&spec) {
        return Err(TrendError::Shape("coefficients do not match exponents".into()));
    }
    if theta.flat().iter().any(|&v| !(v > -0.5)) {
        return Err(TrendError::Invalid("limit matrices need every exponent above -1/2".into()));
    }
    let p = theta.len();
    let phi = phi_matrix(theta, theta);
    let phi_plus = phi_plus_matrix(theta);
    let phi_plus_plus = phi_plus_plus_matrix(theta);
    let (phi_inverse, closed_form_inverse) = match cauchy_block_inverse(theta) {
        Ok(inv) => (inv, true),
        Err(TrendError::FormulaSingularity(_)) => (generic_inverse(&phi).ok_or(TrendError::DegenerateUpsilon)?, false),
        Err(e) => return Err(e),
    };
    let raw = &phi_plus_plus - phi_plus.transpose() * &phi_inverse * &phi_plus;
    let upsilon = (&raw + raw.transpose()) * 0.5;
    let upsilon_inverse = Cholesky::new(upsilon.clone()).ok_or(TrendError::DegenerateUpsilon)?.inverse();

    let flat_beta = beta.flat();
    if let Some(k) = flat_beta.iter().position(|&b| b == 0.0 || !b.is_finite()) {
        return Err(TrendError::Invalid(format!("coefficient {} must be nonzero and finite", k + 1)));
    }
    let beta_diag = DMatrix::from_diagonal(&DVector::from_vec(flat_beta.clone()));
    let mut b = DMatrix::zeros(p, 2 * p);
    for (k, &bk) in flat_beta.iter().enumerate() {
        b[(k, k)] = 1.0 / bk;
        b[(k, p + k)] = -1.0;
    }
    let phi_vecs = theta
        .blocks()
        .iter()
        .map(|blk| DVector::from_iterator(blk.len(), blk.iter().map(|&v| 1.0 / (v + 1.0))))
        .collect();
    Ok(LimitMatrices {
        phi_vecs,
        phi,
        phi_inverse,
        phi_plus,
        phi_plus_plus,
        upsilon,
        upsilon_inverse,
        b,
        beta_diag,
        closed_form_inverse,
    })
}

fn generic_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match Cholesky::new(m.clone()) {
        Some(ch) => Some(ch.inverse()),
        None => m.clone().lu().try_inverse(),
    }
}

/// Inverse of the symmetric Cauchy matrix `(1 + v_k + v_m)^{-1}`:
/// with `x = v + 1/2`,
/// `inv[k][l] = prod_m (x_k + x_m)(x_l + x_m) / ((x_k + x_l) prod_{m!=k}(x_k - x_m) prod_{m!=l}(x_l - x_m))`.
pub fn cauchy_inverse(v: &[f64]) -> Result<DMatrix<f64>> {
    check_nodes(v)?;
    let r = v.len();
    let x: Vec<f64> = v.iter().map(|&vi| vi + 0.5).collect();
    // a_k = prod_m (x_k + x_m) / prod_{m != k} (x_k - x_m)
    let a: Vec<f64> = (0..r)
        .map(|k| (0..r).map(|m| if m == k { x[k] + x[m] } else { (x[k] + x[m]) / (x[k] - x[m]) }).product())
        .collect();
    Ok(DMatrix::from_fn(r, r, |k, l| a[k] * a[l] / (x[k] + x[l])))
}

fn check_nodes(v: &[f64]) -> Result<()> {
    for (k, &vk) in v.iter().enumerate() {
        if (1.0 + 2.0 * vk).abs() < FORMULA_EPS {
            return Err(TrendError::FormulaSingularity(format!("1 + 2 v = 0 at v = {vk}")));
        }
        for &vm in &v[..k] {
            if (vk - vm).abs() < FORMULA_EPS {
                return Err(TrendError::FormulaSingularity(format!("repeated node {vk}")));
            }
        }
    }
    Ok(())
}

/// Per-dimension closed-form pieces: `T_ii^{-1}`, `z_i = T_ii^{-1} t_i / (1 -
/// tau_i)` and `kappa_i = 1 / (1 - tau_i)`, read off the inverse of the
/// Cauchy matrix bordered by the node `v = 0`.
struct BlockPieces {
    t_inv: DMatrix<f64>,
    z: DVector<f64>,
    kappa: f64,
}

fn block_pieces(v: &[f64]) -> Result<BlockPieces> {
    if let Some(&vk) = v.iter().find(|&&vk| vk.abs() < FORMULA_EPS) {
        return Err(TrendError::FormulaSingularity(format!("zero node {vk} inside a Cauchy block")));
    }
    let t_inv = cauchy_inverse(v)?;
    let r = v.len();
    let x: Vec<f64> = v.iter().map(|&vi| vi + 0.5).collect();
    // Border node x_0 = 1/2: x_k + x_0 = 1 + v_k, x_k - x_0 = v_k.
    let kappa: f64 = v.iter().map(|&vm| ((1.0 + vm) / vm).powi(2)).product();
    let border: f64 = v.iter().map(|&vm| (1.0 + vm) / -vm).product();
    let z = DVector::from_fn(r, |k, _| {
        let own: f64 = (0..r).map(|m| if m == k { x[k] + x[m] } else { (x[k] + x[m]) / (x[k] - x[m]) }).product();
        // -(T+^{-1})_{k,0}
        -(own * (1.0 + v[k]) / v[k]) * border / (1.0 + v[k])
    });
    Ok(BlockPieces { t_inv, z, kappa })
}

/// Closed-form `Phi(theta, theta)^{-1}`.
///
/// Without a zero exponent the block formulas for a matrix whose
/// off-diagonal blocks are `t_i t_k'` give, with `sigma = sum_i (kappa_i - 1)`,
///
/// ```text
/// diagonal:  T_ii^{-1} + z_i z_i' (sigma - kappa_i + 1) / (kappa_i (1 + sigma))
/// off-diag:  -z_i z_k' / (1 + sigma)
/// ```
///
/// One zero exponent borders the remaining matrix `T` with `(t', 1)`; the
/// bordered inverse is `[[T^{-1} + Z Z'/(1+sigma), -Z], [-Z', 1 + sigma]]`.
pub fn cauchy_block_inverse(theta: &ExponentVector) -> Result<DMatrix<f64>> {
    let pos = stacked(theta);
    let p = pos.len();
    let zeros: Vec<usize> = (0..p).filter(|&a| pos[a].1.abs() < FORMULA_EPS).collect();
    if zeros.len() > 1 {
        return Err(TrendError::FormulaSingularity("more than one zero exponent".into()));
    }
    let zero = zeros.first().copied();
    for blk in theta.blocks() {
        check_nodes(blk)?;
    }

    // Blocks with the zero exponent (if any) removed; `kept` maps back.
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    let mut pieces: Vec<(Vec<usize>, BlockPieces)> = Vec::new();
    let mut offset = 0;
    for blk in theta.blocks() {
        let idx: Vec<usize> = (offset..offset + blk.len()).filter(|&a| Some(a) != zero).collect();
        offset += blk.len();
        if idx.is_empty() {
            continue;
        }
        let v: Vec<f64> = idx.iter().map(|&a| pos[a].1).collect();
        kept.extend(&idx);
        pieces.push((idx, block_pieces(&v)?));
    }
    let sigma: f64 = pieces.iter().map(|(_, bp)| bp.kappa - 1.0).sum();
    let one_plus_sigma = 1.0 + sigma;

    let mut out = DMatrix::zeros(p, p);
    for (ii, (idx_i, bi)) in pieces.iter().enumerate() {
        for (kk, (idx_k, bk)) in pieces.iter().enumerate() {
            for (r, &a) in idx_i.iter().enumerate() {
                for (c, &b) in idx_k.iter().enumerate() {
                    let zz = bi.z[r] * bk.z[c];
                    let mut value = if ii == kk {
                        bi.t_inv[(r, c)] + zz * (sigma - bi.kappa + 1.0) / (bi.kappa * one_plus_sigma)
                    } else {
                        -zz / one_plus_sigma
                    };
                    if zero.is_some() {
                        value += zz / one_plus_sigma;
                    }
                    out[(a, b)] = value;
                }
            }
        }
    }
    if let Some(z0) = zero {
        for (idx, bp) in &pieces {
            for (r, &a) in idx.iter().enumerate() {
                out[(a, z0)] = -bp.z[r];
                out[(z0, a)] = -bp.z[r];
            }
        }
        out[(z0, z0)] = one_plus_sigma;
    }
    debug_assert_eq!(kept.len() + usize::from(zero.is_some()), p);
    Ok(out)
}

/// Norming matrices at the true (or plug-in) exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normings {
    /// Diagonal of `D = N^{1/2} diag(n_i^theta_ij)`.
    pub d: Vec<f64>,
    /// Diagonal of `L(n) = diag(log n_i)` repeated over each dimension's terms.
    pub l: Vec<f64>,
}

impl Normings {
    pub fn new(theta: &ExponentVector, n: &[usize]) -> Result<Self> {
        if theta.dims() != n.len() {
            return Err(TrendError::Shape("exponents and extents disagree".into()));
        }
        let root_n = (n.iter().product::<usize>() as f64).sqrt();
        let pos = stacked(theta);
        Ok(Self {
            d: pos.iter().map(|&(i, e)| root_n * (n[i] as f64).powf(e)).collect(),
            l: pos.iter().map(|&(i, _)| (n[i] as f64).ln()).collect(),
        })
    }

    /// `D+ = I_2 (x) D`.
    pub fn d_plus(&self) -> Vec<f64> {
        self.d.iter().chain(&self.d).copied().collect()
    }

    /// `L+ = diag(I_p, L)`.
    pub fn l_plus(&self) -> Vec<f64> {
        std::iter::repeat_n(1.0, self.l.len()).chain(self.l.iter().copied()).collect()
    }

    /// Diagonal of `L+ D+^{-1}`, which maps the normalized limit to the
    /// original scale.
    pub fn unnormalize(&self) -> Vec<f64> {
        self.l_plus().iter().zip(self.d_plus()).map(|(l, d)| l / d).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Theta,
    Beta,
}

/// One entry of `alpha = (theta', beta')'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub kind: ParamKind,
    /// 1-based dimension.
    pub dim: usize,
    /// 1-based term within the dimension.
    pub term: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci95: [f64; 2],
}

/// Plug-in inference for all `2p` estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// `theta` entries first, then `beta`, both in stacked order.
    pub parameters: Vec<ParamEstimate>,
    /// `2p x 2p` covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    /// The `2 pi F(0)` scale used.
    pub two_pi_f0: f64,
}

impl InferenceReport {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.covariance.len();
        DMatrix::from_fn(k, k, |a, b| self.covariance[a][b])
    }

    pub fn p(&self) -> usize {
        self.parameters.len() / 2
    }

    pub fn index_of(&self, kind: ParamKind, dim: usize, term: usize) -> Option<usize> {
        self.parameters.iter().position(|q| q.kind == kind && q.dim == dim && q.term == term)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|q| q.name == name)
    }

    pub fn se(&self, index: usize) -> f64 {
        self.parameters[index].se
    }
}

pub fn param_name(kind: ParamKind, dim: usize, term: usize) -> String {
    match kind {
        ParamKind::Theta => format!("theta_{dim}_{term}"),
        ParamKind::Beta => format!("beta_{dim}_{term}"),
    }
}

/// Plug-in covariance of `(theta_hat, beta_hat)`:
/// `2 pi F(0) (L+ D+^{-1}) B' Upsilon^{-1} B (D+^{-1} L+)` at the estimates.
pub fn covariance(
    theta_hat: &ExponentVector,
    beta_hat: &CoefficientVector,
    n: &[usize],
    two_pi_f0: f64,
) -> Result<InferenceReport> {
    if !(two_pi_f0 > 0.0) || !two_pi_f0.is_finite() {
        return Err(TrendError::Invalid(format!("long-run variance {two_pi_f0} must be positive")));
    }
    let lim = limit_matrices(theta_hat, beta_hat)?;
    let norm = Normings::new(theta_hat, n)?;
    let scale = norm.unnormalize();
    let core = lim.normalized_covariance();
    let k = core.nrows();
    let cov = DMatrix::from_fn(k, k, |a, b| two_pi_f0 * scale[a] * core[(a, b)] * scale[b]);
    let cov = (&cov + cov.transpose()) * 0.5;

    let p = k / 2;
    let mut labels = Vec::with_capacity(p);
    for (i, blk) in theta_hat.blocks().iter().enumerate() {
        for j in 0..blk.len() {
            labels.push((i + 1, j + 1));
        }
    }
    let estimates: Vec<f64> = theta_hat.flat().into_iter().chain(beta_hat.flat()).collect();
    let parameters = (0..k)
        .map(|a| {
            let kind = if a < p { ParamKind::Theta } else { ParamKind::Beta };
            let (dim, term) = labels[a % p];
            let se = cov[(a, a)].max(0.0).sqrt();
            ParamEstimate {
                name: param_name(kind, dim, term),
                kind,
                dim,
                term,
                estimate: estimates[a],
                se,
                ci95: [estimates[a] - Z_975 * se, estimates[a] + Z_975 * se],
            }
        })
        .collect();
    Ok(InferenceReport {
        parameters,
        covariance: (0..k).map(|a| (0..k).map(|b| cov[(a, b)]).collect()).collect(),
        two_pi_f0,
    })
}

/// Covariance of the least-squares coefficients at known exponents,
/// `2 pi F(0) D^{-1} Phi^{-1} D^{-1}`.
pub fn lse_covariance(theta: &ExponentVector, n: &[usize], two_pi_f0: f64) -> Result<DMatrix<f64>> {
    if !(two_pi_f0 > 0.0) || !two_pi_f0.is_finite() {
        return Err(TrendError::Invalid(format!("long-run variance {two_pi_f0} must be positive")));
    }
    let phi_inv = match cauchy_block_inverse(theta) {
        Ok(inv) => inv,
        Err(TrendError::FormulaSingularity(_)) => {
            generic_inverse(&phi_matrix(theta, theta)).ok_or(TrendError::DegenerateUpsilon)?
        }
        Err(e) => return Err(e),
    };
    let d = Normings::new(theta, n)?.d;
    let p = d.len();
    Ok(DMatrix::from_fn(p, p, |a, b| two_pi_f0 * phi_inv[(a, b)] / (d[a] * d[b])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn check_null(report: &InferenceReport, index: usize, null_value: f64) -> Result<()> {
    let q = report
        .parameters
        .get(index)
        .ok_or_else(|| TrendError::Invalid(format!("parameter index {index} out of range")))?;
    if q.kind == ParamKind::Beta && null_value == 0.0 {
        return Err(TrendError::ZeroNullForBeta(q.name.clone()));
    }
    Ok(())
}

/// Two-sided `z` test of one parameter against `null_value`.
pub fn wald_test(report: &InferenceReport, index: usize, null_value: f64) -> Result<WaldResult> {
    check_null(report, index, null_value)?;
    let q = &report.parameters[index];
    if !(q.se > 0.0) {
        return Err(TrendError::Invalid(format!("standard error of {} is not positive", q.name)));
    }
    let z = (q.estimate - null_value) / q.se;
    Ok(WaldResult { statistic: z, p_value: two_sided_p(z) })
}

/// `2 (1 - Phi(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * std.cdf(-z.abs())
}

/// Chi-square test of several parameters jointly. Sets containing both the
/// exponent and the coefficient of one term are rejected: their joint limit
/// covariance is singular.
pub fn joint_wald_test(report: &InferenceReport, indices: &[usize], nulls: &[f64]) -> Result<WaldResult> {
    if indices.is_empty() || indices.len() != nulls.len() {
        return Err(TrendError::Invalid("need one null value per selected parameter".into()));
    }
    for (&a, &v) in indices.iter().zip(nulls) {
        check_null(report, a, v)?;
    }
    let p = report.p();
    for (k, &a) in indices.iter().enumerate() {
        if indices[..k].contains(&a) {
            return Err(TrendError::Invalid(format!("parameter {} selected twice", report.parameters[a].name)));
        }
        let partner = if a < p { a + p } else { a - p };
        if indices.contains(&partner) {
            let q = &report.parameters[a];
            return Err(TrendError::InadmissibleJointTest(format!("({}, {})", q.dim, q.term)));
        }
    }
    let full = report.covariance_matrix();
    let m = indices.len();
    let sub = DMatrix::from_fn(m, m, |r, c| full[(indices[r], indices[c])]);
    let diff = DVector::from_fn(m, |r, _| report.parameters[indices[r]].estimate - nulls[r]);
    let inv = Cholesky::new(sub).ok_or(TrendError::DegenerateUpsilon)?.inverse();
    let stat = (diff.transpose() * inv * &diff)[(0, 0)];
    let chi = ChiSquared::new(m as f64).expect("positive degrees of freedom");
    Ok(WaldResult { statistic: stat, p_value: 1.0 - chi.cdf(stat) })
}

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}
