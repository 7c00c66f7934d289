//! Trend model on a regular lattice: the regressor family
//! `y_u = sum_i sum_j beta_ij * u_i^theta_ij + x_u`, its exponent search
//! space and the gridded data container.
//!
//! All stacked vectors use dimension-major, exponent-ascending order: the
//! `p_1` terms of dimension 1 first, then the `p_2` terms of dimension 2, and
//! so on.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrendError};

/// Exponents at or below this bound make `u^h` non-square-summable.
pub const EXPONENT_FLOOR: f64 = -0.5;

/// Number of power terms per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    p_per_dim: Vec<usize>,
}

impl ModelSpec {
    pub fn new(p_per_dim: Vec<usize>) -> Result<Self> {
        if p_per_dim.is_empty() {
            return Err(TrendError::Invalid("model needs at least one dimension".into()));
        }
        if p_per_dim.iter().sum::<usize>() == 0 {
            return Err(TrendError::Invalid("model needs at least one power term".into()));
        }
        Ok(Self { p_per_dim })
    }

    pub fn dims(&self) -> usize {
        self.p_per_dim.len()
    }

    /// Total number of regressors `p`.
    pub fn p(&self) -> usize {
        self.p_per_dim.iter().sum()
    }

    pub fn p_per_dim(&self) -> &[usize] {
        &self.p_per_dim
    }

    /// Dimension index of every stacked position.
    pub fn dim_of(&self) -> Vec<usize> {
        self.p_per_dim.iter().enumerate().flat_map(|(i, &pi)| std::iter::repeat_n(i, pi)).collect()
    }
}

macro_rules! blocked_vector {
    ($name:ident) => {
        impl $name {
            pub fn new(blocks: Vec<Vec<f64>>) -> Self {
                Self(blocks)
            }

            /// Split a stacked vector into per-dimension blocks.
            pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
                if flat.len() != spec.p() {
                    return Err(TrendError::Shape(format!(
                        "expected {} stacked entries, got {}",
                        spec.p(),
                        flat.len()
                    )));
                }
                let mut blocks = Vec::with_capacity(spec.dims());
                let mut at = 0;
                for &pi in spec.p_per_dim() {
                    blocks.push(flat[at..at + pi].to_vec());
                    at += pi;
                }
                Ok(Self(blocks))
            }

            pub fn blocks(&self) -> &[Vec<f64>] {
                &self.0
            }

            pub fn block(&self, dim: usize) -> &[f64] {
                &self.0[dim]
            }

            pub fn dims(&self) -> usize {
                self.0.len()
            }

            pub fn len(&self) -> usize {
                self.0.iter().map(Vec::len).sum()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn flat(&self) -> Vec<f64> {
                self.0.iter().flatten().copied().collect()
            }

            pub fn spec(&self) -> Result<ModelSpec> {
                ModelSpec::new(self.0.iter().map(Vec::len).collect())
            }

            pub fn matches(&self, spec: &ModelSpec) -> bool {
                self.0.len() == spec.dims() && self.0.iter().zip(spec.p_per_dim()).all(|(b, &pi)| b.len() == pi)
            }
        }
    };
}

/// Exponents `theta` (or a candidate `h`), one ascending list per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExponentVector(Vec<Vec<f64>>);

/// Coefficients `beta`, laid out like the matching [`ExponentVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefficientVector(Vec<Vec<f64>>);

blocked_vector!(ExponentVector);
blocked_vector!(CoefficientVector);

/// Compact exponent space: per-dimension bounds and a common minimum gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub delta: f64,
}

impl ParamSpace {
    pub const DEFAULT_LOWER: f64 = -0.45;
    pub const DEFAULT_UPPER: f64 = 4.0;
    pub const DEFAULT_DELTA: f64 = 0.05;

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, delta: f64) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(TrendError::Shape(format!("{} lower bounds but {} upper bounds", lower.len(), upper.len())));
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo > EXPONENT_FLOOR) || !(lo < hi) || !hi.is_finite() {
                return Err(TrendError::Invalid(format!(
                    "dimension {}: bounds [{lo}, {hi}] must satisfy -1/2 < lower < upper < inf",
                    i + 1
                )));
            }
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(TrendError::Invalid(format!("separation {delta} must be positive")));
        }
        Ok(Self { lower, upper, delta })
    }

    /// `[-0.45, 4]` in every dimension with `delta = 0.05`.
    pub fn default_for(dims: usize) -> Self {
        Self {
            lower: vec![Self::DEFAULT_LOWER; dims],
            upper: vec![Self::DEFAULT_UPPER; dims],
            delta: Self::DEFAULT_DELTA,
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    /// Errors when some dimension cannot hold `p_i` exponents `delta` apart.
    pub fn check_nonempty(&self, spec: &ModelSpec) -> Result<()> {
        if spec.dims() != self.dims() {
            return Err(TrendError::Shape(format!(
                "model has {} dimensions, parameter space has {}",
                spec.dims(),
                self.dims()
            )));
        }
        for (i, &pi) in spec.p_per_dim().iter().enumerate() {
            let room = self.upper[i] - self.lower[i];
            if pi > 1 && room < (pi - 1) as f64 * self.delta {
                return Err(TrendError::Invalid(format!(
                    "dimension {}: [{}, {}] cannot hold {pi} exponents separated by {}",
                    i + 1,
                    self.lower[i],
                    self.upper[i],
                    self.delta
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of [`validate_theta`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ThetaReport {
    pub violations: Vec<String>,
}

impl ThetaReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks bounds and within-dimension separation. Equal exponents in
/// different dimensions are allowed.
pub fn validate_theta(h: &ExponentVector, space: &ParamSpace) -> ThetaReport {
    let mut violations = Vec::new();
    if h.dims() != space.dims() {
        violations.push(format!("exponent vector has {} dimensions, parameter space has {}", h.dims(), space.dims()));
        return ThetaReport { violations };
    }
    // Tolerance for values written out in decimal and parsed back.
    let slack = 1e-12;
    for (i, block) in h.blocks().iter().enumerate() {
        for (j, &v) in block.iter().enumerate() {
            if !v.is_finite() {
                violations.push(format!("h[{}][{}] is not finite", i + 1, j + 1));
            }
        }
        if let Some(&first) = block.first() {
            if first < space.lower[i] - slack {
                violations.push(format!("h[{}][1] = {first} below lower bound {}", i + 1, space.lower[i]));
            }
        }
        if let Some(&last) = block.last() {
            if last > space.upper[i] + slack {
                violations.push(format!("h[{}][{}] = {last} above upper bound {}", i + 1, block.len(), space.upper[i]));
            }
        }
        for j in 1..block.len() {
            let gap = block[j] - block[j - 1];
            if gap < space.delta - slack {
                violations.push(format!(
                    "h[{}][{}] - h[{}][{}] = {gap} below separation {}",
                    i + 1,
                    j + 1,
                    i + 1,
                    j,
                    space.delta
                ));
            }
        }
    }
    ThetaReport { violations }
}

/// Stacked regressor `f(u; theta)` at a 1-based multi-index.
pub fn eval_regressor(u: &[usize], theta: &ExponentVector) -> Result<Vec<f64>> {
    if u.len() != theta.dims() {
        return Err(TrendError::Shape(format!(
            "site has {} coordinates, exponents have {} dimensions",
            u.len(),
            theta.dims()
        )));
    }
    if let Some(pos) = u.iter().position(|&ui| ui == 0) {
        return Err(TrendError::Invalid(format!("coordinate {} of the site is 0; sites are 1-based", pos + 1)));
    }
    Ok(theta.blocks().iter().zip(u).flat_map(|(block, &ui)| block.iter().map(move |&e| power(ui as f64, e))).collect())
}

/// Deterministic part `f(u; theta)' beta`.
pub fn trend_value(u: &[usize], theta: &ExponentVector, beta: &CoefficientVector) -> Result<f64> {
    let spec = theta.spec()?;
    if !beta.matches(&spec) {
        return Err(TrendError::Shape("coefficients do not match exponents".into()));
    }
    let f = eval_regressor(u, theta)?;
    Ok(f.iter().zip(beta.flat()).map(|(a, b)| a * b).sum())
}

/// `x^e` with `x^0 == 1` exactly.
#[inline]
pub(crate) fn power(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Warnings for fits that come close to violating identifiability: two or
/// more exponents within `tol` of zero, or coefficients within `tol` of zero.
pub fn identification_warnings(theta: &ExponentVector, beta: &CoefficientVector, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    let near_zero = theta.flat().iter().filter(|v| v.abs() < tol).count();
    if near_zero >= 2 {
        out.push(format!(
            "{near_zero} exponents lie within {tol} of zero; at most one intercept-like term is identified"
        ));
    }
    for (i, block) in beta.blocks().iter().enumerate() {
        for (j, &b) in block.iter().enumerate() {
            if b.abs() < tol {
                out.push(format!("coefficient beta[{}][{}] = {b} is near zero", i + 1, j + 1));
            }
        }
    }
    out
}

/// Observations on the box `{1..n_1} x ... x {1..n_d}`, stored row-major
/// (last coordinate fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    extents: Vec<usize>,
    values: Vec<f64>,
}

impl LatticeGrid {
    pub fn new(extents: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if extents.is_empty() || extents.contains(&0) {
            return Err(TrendError::Invalid(format!("extents {extents:?} must be positive")));
        }
        let n_obs: usize = extents.iter().product();
        if values.len() != n_obs {
            return Err(TrendError::Shape(format!("extents {extents:?} need {n_obs} values, got {}", values.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(TrendError::Invalid(format!("value at linear index {k} is not finite")));
        }
        Ok(Self { extents, values })
    }

    /// Builds a grid by evaluating `f` at every 1-based site.
    pub fn from_fn(extents: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n_obs: usize = extents.iter().product();
        let mut values = Vec::with_capacity(n_obs);
        let mut site = vec![1usize; extents.len()];
        for _ in 0..n_obs {
            values.push(f(&site));
            advance(&mut site, &extents);
        }
        Self::new(extents, values)
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    /// `N`, the number of sites.
    pub fn n_obs(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn linear_index(&self, u: &[usize]) -> usize {
        linear_index(u, &self.extents)
    }

    pub fn get(&self, u: &[usize]) -> f64 {
        self.values[self.linear_index(u)]
    }

    /// Row-major 1-based site list.
    pub fn sites(&self) -> Sites<'_> {
        Sites { extents: &self.extents, next: Some(vec![1; self.extents.len()]) }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `out[t-1] = sum of y_u over sites with u_dim = t`.
    pub fn marginal_sums(&self, dim: usize) -> Vec<f64> {
        let n_dim = self.extents[dim];
        let inner: usize = self.extents[dim + 1..].iter().product();
        let mut out = vec![0.0; n_dim];
        for (k, v) in self.values.iter().enumerate() {
            out[(k / inner) % n_dim] += v;
        }
        out
    }

    /// Elementwise sum with another grid of the same extents.
    pub fn add(&self, other: &LatticeGrid) -> Result<LatticeGrid> {
        if self.extents != other.extents {
            return Err(TrendError::Shape(format!("extents {:?} and {:?} differ", self.extents, other.extents)));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        LatticeGrid::new(self.extents.clone(), values)
    }

    /// Reads the `u1,...,ud,y` CSV format. Rows may come in any order but
    /// must cover the box exactly once.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let d = headers
            .len()
            .checked_sub(1)
            .filter(|&d| d >= 1)
            .ok_or_else(|| TrendError::Parse("header must list at least one coordinate column and y".into()))?;
        for (k, h) in headers.iter().enumerate().take(d) {
            if h != format!("u{}", k + 1) {
                return Err(TrendError::Parse(format!("header column {} is `{h}`, expected `u{}`", k + 1, k + 1)));
            }
        }
        if &headers[d] != "y" {
            return Err(TrendError::Parse(format!("last header column is `{}`, expected `y`", &headers[d])));
        }
        let mut rows: Vec<(Vec<usize>, f64)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(TrendError::Parse(format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    d + 1
                )));
            }
            let mut u = Vec::with_capacity(d);
            for k in 0..d {
                let ui: usize = rec[k]
                    .parse()
                    .map_err(|_| TrendError::Parse(format!("row {}: bad coordinate `{}`", line + 1, &rec[k])))?;
                if ui == 0 {
                    return Err(TrendError::Parse(format!("row {}: coordinates are 1-based", line + 1)));
                }
                u.push(ui);
            }
            let y: f64 =
                rec[d].parse().map_err(|_| TrendError::Parse(format!("row {}: bad value `{}`", line + 1, &rec[d])))?;
            rows.push((u, y));
        }
        if rows.is_empty() {
            return Err(TrendError::Parse("no data rows".into()));
        }
        let extents: Vec<usize> = (0..d).map(|k| rows.iter().map(|(u, _)| u[k]).max().unwrap_or(0)).collect();
        let n_obs: usize = extents.iter().product();
        if rows.len() != n_obs {
            return Err(TrendError::Invalid(format!(
                "{} rows do not cover the {extents:?} box of {n_obs} sites exactly once",
                rows.len()
            )));
        }
        let mut values = vec![f64::NAN; n_obs];
        let mut seen = vec![false; n_obs];
        for (u, y) in rows {
            let k = linear_index(&u, &extents);
            if seen[k] {
                return Err(TrendError::Invalid(format!("site {u:?} appears more than once")));
            }
            seen[k] = true;
            values[k] = y;
        }
        Self::new(extents, values)
    }

    /// Writes the `u1,...,ud,y` CSV format in row-major order. Values use the
    /// shortest representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dims()).map(|k| format!("u{k}")).collect();
        header.push("y".into());
        wtr.write_record(&header)?;
        for (site, y) in self.sites().zip(&self.values) {
            let mut rec: Vec<String> = site.iter().map(|u| u.to_string()).collect();
            rec.push(format!("{y:?}"));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn linear_index(u: &[usize], extents: &[usize]) -> usize {
    u.iter().zip(extents).fold(0, |acc, (&ui, &n)| acc * n + (ui - 1))
}

fn advance(site: &mut [usize], extents: &[usize]) -> bool {
    for k in (0..site.len()).rev() {
        if site[k] < extents[k] {
            site[k] += 1;
            return true;
        }
        site[k] = 1;
    }
    false
}

pub struct Sites<'a> {
    extents: &'a [usize],
    next: Option<Vec<usize>>,
}

impl Iterator for Sites<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut following = current.clone();
        if advance(&mut following, self.extents) {
            self.next = Some(following);
        }
        Some(current)
    }
}
