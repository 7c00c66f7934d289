//! Nonlinear least squares over the exponent space with the coefficients
//! profiled out, and the least-squares baseline at known exponents.
//!
//! The search scans a coarse product grid of `delta`-feasible exponent
//! vectors, then refines the best few points with Nelder-Mead. Simplex
//! vertices that leave the space are evaluated at their projection onto it,
//! with the objective inflated by the squared projection distance so the
//! simplex is pulled back inside.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{covariance, InferenceReport};
use crate::design::{Profiler, DEFAULT_CONDITION_THRESHOLD};
use crate::error::{Result, TrendError};
use crate::model::{identification_warnings, CoefficientVector, ExponentVector, LatticeGrid, ModelSpec, ParamSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Coarse grid points per exponent across `[lower, upper]`.
    pub resolution: usize,
    /// Best coarse points refined by the simplex search.
    pub n_starts: usize,
    /// Simplex size on the exponents at which refinement stops.
    pub tolerance: f64,
    /// Iteration cap for each simplex run.
    pub max_iter: usize,
    /// Extra simplex runs restarted from the incumbent with a smaller step.
    pub restarts: usize,
    pub condition_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            resolution: 9,
            n_starts: 5,
            tolerance: 1e-7,
            max_iter: 500,
            restarts: 2,
            condition_threshold: DEFAULT_CONDITION_THRESHOLD,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(TrendError::Invalid(format!("grid resolution {} must be at least 2", self.resolution)));
        }
        if self.n_starts == 0 {
            return Err(TrendError::Invalid("need at least one refinement start".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(TrendError::Invalid(format!("tolerance {} must be positive", self.tolerance)));
        }
        if !(self.condition_threshold > 1.0) {
            return Err(TrendError::Invalid("condition threshold must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ExponentVector,
    pub beta_hat: CoefficientVector,
    pub rss: f64,
    /// `rss / N`.
    pub sigma2_hat: f64,
    pub n_obs: usize,
    /// Profiled objective evaluations, coarse grid included.
    pub n_evals: usize,
    /// Whether the final simplex shrank below the tolerance.
    pub converged: bool,
    /// Condition estimate of the scaled Gram matrix at `theta_hat`.
    pub condition: f64,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Plug-in inference at `(theta_hat, beta_hat)`.
    pub fn inference(&self, n: &[usize], two_pi_f0: f64) -> Result<InferenceReport> {
        covariance(&self.theta_hat, &self.beta_hat, n, two_pi_f0)
    }
}

/// Projects `h` onto the space: sort, clamp to the bounds, then push
/// exponents closer than `delta` upward and, if that overflows the upper
/// bound, back downward from the top.
pub fn project(h: &ExponentVector, space: &ParamSpace) -> ExponentVector {
    let blocks = h
        .blocks()
        .iter()
        .enumerate()
        .map(|(i, block)| {
            let (lo, hi, delta) = (space.lower[i], space.upper[i], space.delta);
            let mut b: Vec<f64> = block.iter().map(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) }).collect();
            b.sort_by(f64::total_cmp);
            for j in 1..b.len() {
                b[j] = b[j].max(b[j - 1] + delta);
            }
            if let Some(last) = b.last_mut() {
                if *last > hi {
                    *last = hi;
                    for j in (0..b.len() - 1).rev() {
                        b[j] = b[j].min(b[j + 1] - delta);
                    }
                }
            }
            b
        })
        .collect();
    ExponentVector::new(blocks)
}

/// Coarse grid values for one dimension.
fn axis(space: &ParamSpace, dim: usize, resolution: usize) -> Vec<f64> {
    let (lo, hi) = (space.lower[dim], space.upper[dim]);
    (0..resolution).map(|k| lo + (hi - lo) * k as f64 / (resolution - 1) as f64).collect()
}

/// Strictly increasing `r`-subsets of the axis whose gaps are at least
/// `delta`, in lexicographic index order.
fn feasible_blocks(values: &[f64], r: usize, delta: f64) -> Vec<Vec<f64>> {
    fn extend(values: &[f64], r: usize, delta: f64, start: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for k in start..values.len() {
            if cur.last().is_none_or(|&prev| values[k] - prev >= delta - 1e-12) {
                cur.push(values[k]);
                extend(values, r, delta, k + 1, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(values, r, delta, 0, &mut Vec::with_capacity(r), &mut out);
    out
}

/// Every `delta`-feasible coarse exponent vector, in lexicographic order.
pub fn coarse_grid(spec: &ModelSpec, space: &ParamSpace, resolution: usize) -> Vec<ExponentVector> {
    let per_dim: Vec<Vec<Vec<f64>>> = spec
        .p_per_dim()
        .iter()
        .enumerate()
        .map(|(i, &r)| feasible_blocks(&axis(space, i, resolution), r, space.delta))
        .collect();
    let mut points: Vec<Vec<Vec<f64>>> = vec![vec![]];
    for choices in &per_dim {
        points = points
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |c| {
                    let mut next = prefix.clone();
                    next.push(c.clone());
                    next
                })
            })
            .collect();
    }
    points.into_iter().map(ExponentVector::new).collect()
}

struct Simplex {
    best: Vec<f64>,
    value: f64,
    evals: usize,
    converged: bool,
}

fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: &[f64], tol: f64, max_iter: usize) -> Simplex {
    let k = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..k {
        let mut x = x0.to_vec();
        x[i] += step[i];
        pts.push(x);
    }
    let mut vals: Vec<f64> = pts.iter().map(|x| f(x)).collect();
    let mut evals = k + 1;
    let order = |vals: &[f64]| {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        idx
    };
    let mut converged = false;
    for _ in 0..max_iter {
        let idx = order(&vals);
        pts = idx.iter().map(|&a| pts[a].clone()).collect();
        vals = idx.iter().map(|&a| vals[a]).collect();
        let size = pts[1..].iter().flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        if size < tol {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..k).map(|j| pts[..k].iter().map(|p| p[j]).sum::<f64>() / k as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..k).map(|j| centroid[j] + t * (pts[k][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[k] = xe;
                vals[k] = fe;
            } else {
                pts[k] = xr;
                vals[k] = fr;
            }
            continue;
        }
        if fr < vals[k - 1] {
            pts[k] = xr;
            vals[k] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[k] {
            let x = along(-0.5);
            let v = f(&x);
            (x, v)
        } else {
            let x = along(0.5);
            let v = f(&x);
            (x, v)
        };
        evals += 1;
        if fc < vals[k].min(fr) {
            pts[k] = xc;
            vals[k] = fc;
            continue;
        }
        for i in 1..=k {
            pts[i] = (0..k).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            vals[i] = f(&pts[i]);
        }
        evals += k;
    }
    let idx = order(&vals);
    Simplex { best: pts[idx[0]].clone(), value: vals[idx[0]], evals, converged }
}

fn cmp_value(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

/// Nonlinear least-squares fit of the power-law trend.
pub fn fit(grid: &LatticeGrid, spec: &ModelSpec, space: &ParamSpace, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    space.check_nonempty(spec)?;
    if grid.dims() != spec.dims() {
        return Err(TrendError::Shape(format!("model has {} dimensions, grid has {}", spec.dims(), grid.dims())));
    }
    for (i, (&ni, &pi)) in grid.extents().iter().zip(spec.p_per_dim()).enumerate() {
        if pi >= 1 && ni < 2 {
            return Err(TrendError::Invalid(format!("dimension {} needs at least 2 sites", i + 1)));
        }
    }
    let n_obs = grid.n_obs();
    if n_obs <= 2 * spec.p() {
        return Err(TrendError::InsufficientData { n_obs, twice_p: 2 * spec.p() });
    }

    let profiler = Profiler::with_threshold(grid, opts.condition_threshold);
    let points = coarse_grid(spec, space, opts.resolution);
    if points.is_empty() {
        return Err(TrendError::Invalid(format!(
            "no {}-point grid configuration respects the separation {}; raise the resolution",
            opts.resolution, space.delta
        )));
    }
    let coarse: Vec<Result<f64>> = points.par_iter().map(|h| profiler.rss(h)).collect();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(points.len());
    for (k, r) in coarse.iter().enumerate() {
        match r {
            Ok(v) if v.is_finite() => scored.push((k, *v)),
            Ok(_) | Err(TrendError::NearSingularGram { .. }) => {}
            Err(e) => return Err(e.clone()),
        }
    }
    if scored.is_empty() {
        return Err(TrendError::AllGridPointsSingular);
    }
    scored.sort_by(|a, b| cmp_value(a.1, b.1).then(a.0.cmp(&b.0)));
    let mut n_evals = points.len();

    let step: Vec<f64> = spec
        .p_per_dim()
        .iter()
        .enumerate()
        .flat_map(|(i, &r)| {
            std::iter::repeat_n(0.5 * (space.upper[i] - space.lower[i]) / (opts.resolution - 1) as f64, r)
        })
        .collect();
    let objective = |x: &[f64]| -> f64 {
        let Ok(raw) = ExponentVector::from_flat(spec, x) else {
            return f64::INFINITY;
        };
        let proj = project(&raw, space);
        let dist2: f64 = x.iter().zip(proj.flat()).map(|(a, b)| (a - b).powi(2)).sum();
        match profiler.rss(&proj) {
            Ok(r) => r * (1.0 + dist2),
            Err(_) => f64::INFINITY,
        }
    };

    let starts: Vec<usize> = scored.iter().take(opts.n_starts).map(|s| s.0).collect();
    let refined: Vec<Simplex> = starts
        .par_iter()
        .map(|&k| {
            let x0 = points[k].flat();
            let mut run = nelder_mead(&objective, &x0, &step, opts.tolerance, opts.max_iter);
            let mut scale = 1.0;
            for _ in 0..opts.restarts {
                scale *= 0.25;
                let small: Vec<f64> = step.iter().map(|s| (s * scale).max(10.0 * opts.tolerance)).collect();
                let next = nelder_mead(&objective, &run.best, &small, opts.tolerance, opts.max_iter);
                let improved = next.value < run.value;
                let evals = run.evals + next.evals;
                if improved || next.converged {
                    let done = !improved;
                    run = Simplex { evals, ..next };
                    if done {
                        break;
                    }
                } else {
                    run.evals = evals;
                }
            }
            run
        })
        .collect();
    n_evals += refined.iter().map(|s| s.evals).sum::<usize>();

    // Ordered reduction by start index; each run starts at a feasible grid
    // point, so its best value never exceeds that point's RSS.
    let winner = refined
        .iter()
        .enumerate()
        .min_by(|a, b| cmp_value(a.1.value, b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, run)| run)
        .expect("at least one start");
    let best_theta = project(&ExponentVector::from_flat(spec, &winner.best)?, space);
    let converged = winner.converged;

    let profile = profiler.profile(&best_theta)?;
    let mut warnings = identification_warnings(&best_theta, &profile.beta, 0.05);
    if !converged {
        warnings.push("simplex refinement did not reach the tolerance".into());
    }
    for (i, block) in best_theta.blocks().iter().enumerate() {
        for (j, &v) in block.iter().enumerate() {
            if (v - space.lower[i]).abs() < 1e-9 || (v - space.upper[i]).abs() < 1e-9 {
                warnings.push(format!("theta[{}][{}] = {v} lies on the boundary", i + 1, j + 1));
            }
        }
        for j in 1..block.len() {
            if block[j] - block[j - 1] < space.delta + 1e-9 {
                warnings.push(format!("theta[{}][{}..{}] are at the minimum separation", i + 1, j, j + 1));
            }
        }
    }
    Ok(FitResult {
        theta_hat: best_theta,
        beta_hat: profile.beta,
        rss: profile.rss,
        sigma2_hat: profile.rss / n_obs as f64,
        n_obs,
        n_evals,
        converged,
        condition: profile.system.condition,
        warnings,
    })
}

/// Least-squares coefficients when the exponents are known.
pub fn lse_known_theta(grid: &LatticeGrid, theta: &ExponentVector) -> Result<CoefficientVector> {
    Ok(Profiler::new(grid).solve(theta)?.0)
}

/// `y - f(u; theta_hat)' beta_hat` as a grid.
pub fn fit_residuals(grid: &LatticeGrid, theta: &ExponentVector, beta: &CoefficientVector) -> Result<LatticeGrid> {
    LatticeGrid::new(grid.extents().to_vec(), Profiler::new(grid).residuals(theta, beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::profile_rss;
    use crate::simulate::{gen_dataset, trend_surface, ErrorFieldModel};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn ev(b: Vec<Vec<f64>>) -> ExponentVector {
        ExponentVector::new(b)
    }
    fn cv(b: Vec<Vec<f64>>) -> CoefficientVector {
        CoefficientVector::new(b)
    }

    #[test]
    fn projection_restores_feasibility() {
        let space = ParamSpace::new(vec![-0.45, 0.0], vec![4.0, 1.0], 0.1).unwrap();
        let p = project(&ev(vec![vec![3.0, -1.0, 3.02], vec![1.5, 0.95]]), &space);
        assert_eq!(p.block(0), &[-0.45, 3.0, 3.1]);
        assert_relative_eq!(p.block(1)[0], 0.9, epsilon = 1e-15);
        assert_eq!(p.block(1)[1], 1.0);
        let inside = ev(vec![vec![0.0, 1.0], vec![0.5]]);
        assert_eq!(project(&inside, &ParamSpace::default_for(2)), inside);
    }

    #[test]
    fn coarse_grid_respects_separation() {
        let spec = ModelSpec::new(vec![2, 1]).unwrap();
        let space = ParamSpace::default_for(2);
        let pts = coarse_grid(&spec, &space, 9);
        assert_eq!(pts.len(), 36 * 9);
        assert!(pts.iter().all(|h| h.block(0)[1] > h.block(0)[0]));
        let wide = ParamSpace::new(vec![0.0], vec![1.0], 0.3).unwrap();
        let pts = coarse_grid(&ModelSpec::new(vec![2]).unwrap(), &wide, 5);
        // Pairs of {0, .25, .5, .75, 1} at least 0.3 apart.
        assert_eq!(pts.len(), 6);
    }

    #[test]
    fn noiseless_recovery() {
        let theta = ev(vec![vec![1.0], vec![1.0]]);
        let beta = cv(vec![vec![1.0], vec![1.0]]);
        let grid = trend_surface(&theta, &beta, &[10, 10]).unwrap();
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let fit = fit(&grid, &spec, &ParamSpace::default_for(2), &FitOptions::default()).unwrap();
        for (a, b) in fit.theta_hat.flat().iter().zip(theta.flat()) {
            assert!((a - b).abs() < 1e-6, "{fit:?}");
        }
        for (a, b) in fit.beta_hat.flat().iter().zip(beta.flat()) {
            assert!((a - b).abs() < 1e-6, "{fit:?}");
        }
        assert!(fit.converged);
    }

    #[test]
    fn noiseless_two_terms_in_one_dimension() {
        let theta = ev(vec![vec![0.3, 1.7], vec![0.8]]);
        let beta = cv(vec![vec![2.0, -0.5], vec![1.5]]);
        let grid = trend_surface(&theta, &beta, &[20, 15]).unwrap();
        let spec = ModelSpec::new(vec![2, 1]).unwrap();
        let fit = fit(&grid, &spec, &ParamSpace::default_for(2), &FitOptions::default()).unwrap();
        for (a, b) in fit.theta_hat.flat().iter().zip(theta.flat()) {
            assert!((a - b).abs() < 1e-6, "{fit:?}");
        }
        for (a, b) in fit.beta_hat.flat().iter().zip(beta.flat()) {
            assert!((a - b).abs() < 1e-5 * b.abs(), "{fit:?}");
        }
    }

    #[test]
    fn fit_beats_every_coarse_point_and_is_deterministic() {
        let theta = ev(vec![vec![1.0], vec![1.0]]);
        let beta = cv(vec![vec![1.0], vec![1.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::iid(1.0).unwrap(), &[12, 12], 3).unwrap();
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let space = ParamSpace::default_for(2);
        let opts = FitOptions::default();
        let a = fit(&grid, &spec, &space, &opts).unwrap();
        let b = fit(&grid, &spec, &space, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rss.to_bits(), b.rss.to_bits());
        for h in coarse_grid(&spec, &space, opts.resolution) {
            if let Ok(r) = profile_rss(&h, &grid) {
                assert!(a.rss <= r);
            }
        }
        assert_relative_eq!(a.sigma2_hat, a.rss / 144.0);
    }

    #[test]
    fn scaling_the_data_scales_the_coefficients() {
        let theta = ev(vec![vec![2.0], vec![0.5]]);
        let beta = cv(vec![vec![1.0], vec![1.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::iid(1.0).unwrap(), &[8, 12], 5).unwrap();
        let scaled =
            LatticeGrid::new(grid.extents().to_vec(), grid.values().iter().map(|v| 3.0 * v).collect()).unwrap();
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let space = ParamSpace::default_for(2);
        let a = fit(&grid, &spec, &space, &FitOptions::default()).unwrap();
        let b = fit(&scaled, &spec, &space, &FitOptions::default()).unwrap();
        for (x, y) in a.theta_hat.flat().iter().zip(b.theta_hat.flat()) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in a.beta_hat.flat().iter().zip(b.beta_hat.flat()) {
            assert_relative_eq!(3.0 * x, y, max_relative = 1e-4);
        }
    }

    #[test]
    fn relabeling_dimensions_swaps_blocks() {
        let theta = ev(vec![vec![1.5], vec![0.7]]);
        let beta = cv(vec![vec![1.0], vec![-2.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::iid(0.5).unwrap(), &[9, 13], 8).unwrap();
        let swapped = LatticeGrid::from_fn(vec![13, 9], |u| grid.get(&[u[1], u[0]])).unwrap();
        let space = ParamSpace::new(vec![-0.45, -0.3], vec![4.0, 3.0], 0.05).unwrap();
        let space_t = ParamSpace::new(vec![-0.3, -0.45], vec![3.0, 4.0], 0.05).unwrap();
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let a = fit(&grid, &spec, &space, &FitOptions::default()).unwrap();
        let b = fit(&swapped, &spec, &space_t, &FitOptions::default()).unwrap();
        assert!((a.theta_hat.block(0)[0] - b.theta_hat.block(1)[0]).abs() < 1e-5);
        assert!((a.theta_hat.block(1)[0] - b.theta_hat.block(0)[0]).abs() < 1e-5);
        assert_relative_eq!(a.beta_hat.block(0)[0], b.beta_hat.block(1)[0], max_relative = 1e-4);
        assert_relative_eq!(a.rss, b.rss, max_relative = 1e-8);
    }

    #[test]
    fn lse_matches_dense_least_squares() {
        let theta = ev(vec![vec![0.0, 1.0], vec![0.5]]);
        let beta = cv(vec![vec![1.0, 1.0], vec![1.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::iid(1.0).unwrap(), &[7, 9], 11).unwrap();
        let sites: Vec<Vec<usize>> = grid.sites().collect();
        let x = DMatrix::from_fn(sites.len(), 3, |r, c| {
            let u = &sites[r];
            [1.0, u[0] as f64, (u[1] as f64).sqrt()][c]
        });
        let y = DVector::from_column_slice(grid.values());
        let oracle = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        let b = lse_known_theta(&grid, &theta).unwrap().flat();
        for k in 0..3 {
            assert_relative_eq!(b[k], oracle[k], max_relative = 1e-9);
        }
    }

    #[test]
    fn insufficient_data() {
        let grid = LatticeGrid::from_fn(vec![2, 2], |u| u[0] as f64).unwrap();
        let err = fit(&grid, &ModelSpec::new(vec![1, 1]).unwrap(), &ParamSpace::default_for(2), &FitOptions::default())
            .unwrap_err();
        assert_eq!(err, TrendError::InsufficientData { n_obs: 4, twice_p: 4 });
    }

    #[test]
    fn residuals_grid() {
        let theta = ev(vec![vec![1.0]]);
        let beta = cv(vec![vec![2.0]]);
        let grid = LatticeGrid::from_fn(vec![4], |u| 2.0 * u[0] as f64 + 0.5).unwrap();
        let r = fit_residuals(&grid, &theta, &beta).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.5));
    }
}
