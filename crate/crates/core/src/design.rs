//! Normal equations for a candidate exponent vector `h`, the profiled
//! coefficients `beta(h)` and the profiled residual sum of squares `R(h)`.
//!
//! Power sums factor over dimensions, so the `p x p` Gram matrix costs
//! `O(sum_i n_i p_i^2)` rather than `O(N p^2)`. Solves happen in the scaled
//! coordinates `c = D(h) b` with `D(h) = N^{1/2} diag(n_i^{h_ij})`, where the
//! Gram matrix has entries that are averages of `(t / n_i)^e` and stays
//! `O(1)` as the lattice grows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, TrendError};
use crate::model::{power, CoefficientVector, ExponentVector, LatticeGrid};

/// Largest condition estimate of the scaled Gram matrix accepted by default.
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e12;

/// Normal-equation system at one candidate `h`.
#[derive(Debug, Clone)]
pub struct GramSystem {
    /// `M(h, h) = sum_u f(u;h) f(u;h)'`.
    pub gram: DMatrix<f64>,
    /// `sum_u f(u;h) y_u`.
    pub rhs: DVector<f64>,
    /// Diagonal of `D(h)`.
    pub scale: Vec<f64>,
    /// `D(h)^{-1} M(h,h) D(h)^{-1}`.
    pub scaled_gram: DMatrix<f64>,
    /// Ratio of extreme eigenvalues of the scaled Gram matrix.
    pub condition: f64,
}

/// `(1/n) sum_{t=1}^{n} (t/n)^e`.
fn scaled_power_mean(n: usize, e: f64) -> f64 {
    let nf = n as f64;
    (1..=n).map(|t| power(t as f64 / nf, e)).sum::<f64>() / nf
}

fn raw_power_sum(n: usize, e: f64) -> f64 {
    (1..=n).map(|t| power(t as f64, e)).sum()
}

fn check_extents(h: &ExponentVector, n: &[usize]) -> Result<()> {
    if h.dims() != n.len() {
        return Err(TrendError::Shape(format!("exponents have {} dimensions, lattice has {}", h.dims(), n.len())));
    }
    if n.contains(&0) {
        return Err(TrendError::Invalid("extents must be positive".into()));
    }
    Ok(())
}

/// `(dimension, exponent)` for every stacked position.
fn stacked(h: &ExponentVector) -> Vec<(usize, f64)> {
    h.blocks().iter().enumerate().flat_map(|(i, b)| b.iter().map(move |&e| (i, e))).collect()
}

/// Cross moment matrix `M(g, h) = sum_u f(u;g) f(u;h)'` from separable
/// one-dimensional power sums.
pub fn gram_matrix(g: &ExponentVector, h: &ExponentVector, n: &[usize]) -> Result<DMatrix<f64>> {
    check_extents(g, n)?;
    check_extents(h, n)?;
    if g.spec()? != h.spec()? {
        return Err(TrendError::Shape("g and h have different layouts".into()));
    }
    let n_obs: usize = n.iter().product();
    let rows = stacked(g);
    let cols = stacked(h);
    let row_sums: Vec<f64> = rows.iter().map(|&(i, e)| raw_power_sum(n[i], e)).collect();
    let col_sums: Vec<f64> = cols.iter().map(|&(i, e)| raw_power_sum(n[i], e)).collect();
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        let (i, ga) = rows[a];
        let (k, hb) = cols[b];
        if i == k {
            (n_obs / n[i]) as f64 * raw_power_sum(n[i], ga + hb)
        } else {
            (n_obs / (n[i] * n[k])) as f64 * (row_sums[a] * col_sums[b])
        }
    }))
}

/// `D(h)^{-1} M(h,h) D(h)^{-1}`; tends to the limit matrix `Phi(h,h)` as every
/// extent grows.
pub fn scaled_gram(h: &ExponentVector, n: &[usize]) -> Result<DMatrix<f64>> {
    check_extents(h, n)?;
    let pos = stacked(h);
    let means: Vec<f64> = pos.iter().map(|&(i, e)| scaled_power_mean(n[i], e)).collect();
    Ok(DMatrix::from_fn(pos.len(), pos.len(), |a, b| {
        let (i, ha) = pos[a];
        let (k, hb) = pos[b];
        if i == k {
            scaled_power_mean(n[i], ha + hb)
        } else {
            means[a] * means[b]
        }
    }))
}

/// Diagonal of `D(h) = N^{1/2} diag(n_i^{h_ij})`.
pub fn scale_diagonal(h: &ExponentVector, n: &[usize]) -> Vec<f64> {
    let root_n = (n.iter().product::<usize>() as f64).sqrt();
    stacked(h).iter().map(|&(i, e)| root_n * power(n[i] as f64, e)).collect()
}

/// Profiled least-squares solution at one `h`.
#[derive(Debug, Clone)]
pub struct Profile {
    pub beta: CoefficientVector,
    pub rss: f64,
    pub system: GramSystem,
}

/// Evaluates `beta(h)` and `R(h)` repeatedly against one data grid, caching
/// the per-dimension marginal sums of `y`.
#[derive(Debug, Clone)]
pub struct Profiler<'a> {
    grid: &'a LatticeGrid,
    marginals: Vec<Vec<f64>>,
    condition_threshold: f64,
}

impl<'a> Profiler<'a> {
    pub fn new(grid: &'a LatticeGrid) -> Self {
        Self::with_threshold(grid, DEFAULT_CONDITION_THRESHOLD)
    }

    pub fn with_threshold(grid: &'a LatticeGrid, condition_threshold: f64) -> Self {
        let marginals = (0..grid.dims()).map(|i| grid.marginal_sums(i)).collect();
        Self { grid, marginals, condition_threshold }
    }

    pub fn grid(&self) -> &LatticeGrid {
        self.grid
    }

    /// Builds and solves the scaled normal equations at `h`.
    pub fn solve(&self, h: &ExponentVector) -> Result<(CoefficientVector, GramSystem)> {
        let n = self.grid.extents();
        check_extents(h, n)?;
        let n_obs = self.grid.n_obs() as f64;
        let pos = stacked(h);
        let scaled = scaled_gram(h, n)?;
        let scale = scale_diagonal(h, n);
        let scaled_rhs = DVector::from_iterator(
            pos.len(),
            pos.iter().map(|&(i, e)| {
                let ni = n[i] as f64;
                self.marginals[i].iter().enumerate().map(|(t, y)| power((t + 1) as f64 / ni, e) * y).sum::<f64>()
                    / n_obs.sqrt()
            }),
        );

        let eig = SymmetricEigen::new(scaled.clone());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= self.condition_threshold) {
            return Err(TrendError::NearSingularGram { condition, threshold: self.condition_threshold });
        }
        let projected = eig.eigenvectors.transpose() * &scaled_rhs;
        let weighted = projected.component_div(&eig.eigenvalues);
        let c = &eig.eigenvectors * weighted;
        let flat: Vec<f64> = c.iter().zip(&scale).map(|(ci, di)| ci / di).collect();
        let beta = CoefficientVector::from_flat(&h.spec()?, &flat)?;

        let rhs = DVector::from_iterator(pos.len(), scaled_rhs.iter().zip(&scale).map(|(r, d)| r * d));
        let system = GramSystem { gram: gram_matrix(h, h, n)?, rhs, scale, scaled_gram: scaled, condition };
        Ok((beta, system))
    }

    /// Residuals `y_u - b' f(u;h)` in row-major order.
    pub fn residuals(&self, h: &ExponentVector, b: &CoefficientVector) -> Result<Vec<f64>> {
        let n = self.grid.extents();
        check_extents(h, n)?;
        if !b.matches(&h.spec()?) {
            return Err(TrendError::Shape("coefficients do not match exponents".into()));
        }
        // Fitted surface is a sum of one-dimensional profiles.
        let profiles: Vec<Vec<f64>> = h
            .blocks()
            .iter()
            .zip(b.blocks())
            .zip(n)
            .map(|((hb, bb), &ni)| {
                (1..=ni).map(|t| hb.iter().zip(bb).map(|(&e, &c)| c * power(t as f64, e)).sum()).collect()
            })
            .collect();
        let d = n.len();
        let mut site = vec![0usize; d];
        let mut out = Vec::with_capacity(self.grid.n_obs());
        for &y in self.grid.values() {
            let fitted: f64 = (0..d).map(|i| profiles[i][site[i]]).sum();
            out.push(y - fitted);
            for k in (0..d).rev() {
                site[k] += 1;
                if site[k] < n[k] {
                    break;
                }
                site[k] = 0;
            }
        }
        Ok(out)
    }

    /// `Q(b, h)`.
    pub fn objective(&self, h: &ExponentVector, b: &CoefficientVector) -> Result<f64> {
        Ok(self.residuals(h, b)?.iter().map(|r| r * r).sum())
    }

    pub fn profile(&self, h: &ExponentVector) -> Result<Profile> {
        let (beta, system) = self.solve(h)?;
        let rss = self.objective(h, &beta)?;
        Ok(Profile { beta, rss, system })
    }

    /// `R(h) = Q(beta(h), h)`.
    pub fn rss(&self, h: &ExponentVector) -> Result<f64> {
        Ok(self.profile(h)?.rss)
    }
}

/// `beta(h) = M(h,h)^{-1} sum_u f(u;h) y_u` with the default conditioning guard.
pub fn profile_beta(h: &ExponentVector, grid: &LatticeGrid) -> Result<(CoefficientVector, GramSystem)> {
    Profiler::new(grid).solve(h)
}

/// `R(h) = min_b Q(b, h)`.
pub fn profile_rss(h: &ExponentVector, grid: &LatticeGrid) -> Result<f64> {
    Profiler::new(grid).rss(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(b: Vec<Vec<f64>>) -> ExponentVector {
        ExponentVector::new(b)
    }

    #[test]
    fn gram_examples() {
        let m = gram_matrix(&ev(vec![vec![1.0]]), &ev(vec![vec![1.0]]), &[3]).unwrap();
        assert_eq!(m[(0, 0)], 14.0);

        let h = ev(vec![vec![1.0], vec![1.0]]);
        let m = gram_matrix(&h, &h, &[2, 2]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[10.0, 9.0, 9.0, 10.0]));
    }

    #[test]
    fn gram_matches_direct_site_loop() {
        let g = ev(vec![vec![-0.3, 0.8], vec![1.7]]);
        let h = ev(vec![vec![0.0, 2.2], vec![0.4]]);
        let n = [7, 5];
        let fast = gram_matrix(&g, &h, &n).unwrap();
        let mut slow = DMatrix::zeros(3, 3);
        for u1 in 1..=n[0] {
            for u2 in 1..=n[1] {
                let fg = crate::model::eval_regressor(&[u1, u2], &g).unwrap();
                let fh = crate::model::eval_regressor(&[u1, u2], &h).unwrap();
                for a in 0..3 {
                    for b in 0..3 {
                        slow[(a, b)] += fg[a] * fh[b];
                    }
                }
            }
        }
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
    }

    #[test]
    fn gram_transpose_symmetry_is_exact() {
        let g = ev(vec![vec![-0.2, 1.3], vec![0.6, 3.1]]);
        let h = ev(vec![vec![0.1, 2.0], vec![-0.4, 0.9]]);
        let n = [9, 13];
        let a = gram_matrix(&g, &h, &n).unwrap();
        let b = gram_matrix(&h, &g, &n).unwrap();
        assert_eq!(a, b.transpose());
    }

    #[test]
    fn scaled_gram_examples() {
        assert_eq!(scaled_gram(&ev(vec![vec![0.0]]), &[37]).unwrap()[(0, 0)], 1.0);

        let n = 100.0;
        let s = scaled_gram(&ev(vec![vec![1.0]]), &[100]).unwrap();
        assert_relative_eq!(s[(0, 0)], (n + 1.0) * (2.0 * n + 1.0) / (6.0 * n * n), epsilon = 1e-14);
        assert_relative_eq!(s[(0, 0)], 0.33835, epsilon = 1e-12);

        let s = scaled_gram(&ev(vec![vec![1.0], vec![1.0]]), &[50, 50]).unwrap();
        assert_relative_eq!(s[(0, 1)], 0.2601, epsilon = 1e-14);
    }

    #[test]
    fn scaled_gram_approaches_hilbert_limit() {
        // Oracle: direct summation of (t/n)^{a+b}/n at n = 10^4.
        let n = 10_000usize;
        let direct = |e: f64| (1..=n).map(|t| (t as f64 / n as f64).powf(e)).sum::<f64>() / n as f64;
        let s = scaled_gram(&ev(vec![vec![0.0, 1.0]]), &[n]).unwrap();
        assert_relative_eq!(s[(0, 1)], direct(1.0), epsilon = 1e-13);
        assert_relative_eq!(s[(1, 1)], direct(2.0), epsilon = 1e-13);
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-4);
        assert_relative_eq!(s[(0, 1)], 0.5, epsilon = 1e-4);
        assert_relative_eq!(s[(1, 1)], 1.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn scaled_gram_is_unscaled_gram_over_d() {
        let h = ev(vec![vec![0.3, 1.9], vec![-0.1]]);
        let n = [11, 6];
        let m = gram_matrix(&h, &h, &n).unwrap();
        let s = scaled_gram(&h, &n).unwrap();
        let d = scale_diagonal(&h, &n);
        for a in 0..3 {
            for b in 0..3 {
                assert_relative_eq!(m[(a, b)] / (d[a] * d[b]), s[(a, b)], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_interpolation() {
        let grid = LatticeGrid::from_fn(vec![12], |u| 2.0 * u[0] as f64).unwrap();
        let (beta, sys) = profile_beta(&ev(vec![vec![1.0]]), &grid).unwrap();
        assert_relative_eq!(beta.block(0)[0], 2.0, epsilon = 1e-10);
        assert!(sys.condition >= 1.0);
        assert!(profile_rss(&ev(vec![vec![1.0]]), &grid).unwrap() <= 1e-9 * grid.sum_of_squares());
    }

    #[test]
    fn constant_data_gives_its_level() {
        let grid = LatticeGrid::from_fn(vec![5, 4], |_| -3.25).unwrap();
        let h = ev(vec![vec![0.0], vec![]]);
        let (beta, _) = profile_beta(&h, &grid).unwrap();
        assert_relative_eq!(beta.block(0)[0], -3.25, epsilon = 1e-12);
    }

    #[test]
    fn projection_never_exceeds_total_sum_of_squares() {
        let grid = LatticeGrid::from_fn(vec![6, 7], |u| ((u[0] * 31 + u[1] * 17) % 11) as f64 - 5.0).unwrap();
        let r = profile_rss(&ev(vec![vec![0.4], vec![2.3]]), &grid).unwrap();
        assert!(r <= grid.sum_of_squares());
    }

    #[test]
    fn duplicate_columns_are_near_singular() {
        let grid = LatticeGrid::from_fn(vec![6, 6], |u| (u[0] + u[1]) as f64).unwrap();
        let err = profile_beta(&ev(vec![vec![0.0], vec![0.0]]), &grid).unwrap_err();
        assert!(matches!(err, TrendError::NearSingularGram { .. }));
    }

    #[test]
    fn residuals_follow_row_major_order() {
        let grid = LatticeGrid::from_fn(vec![3, 2, 4], |u| (u[0] * u[1] + u[2]) as f64).unwrap();
        let h = ev(vec![vec![1.0], vec![0.5], vec![2.0]]);
        let b = CoefficientVector::new(vec![vec![0.5], vec![-1.0], vec![0.25]]);
        let res = Profiler::new(&grid).residuals(&h, &b).unwrap();
        for (site, r) in grid.sites().zip(&res) {
            let fitted = crate::model::trend_value(&site, &h, &b).unwrap();
            assert_relative_eq!(*r, grid.get(&site) - fitted, epsilon = 1e-12);
        }
    }
}
