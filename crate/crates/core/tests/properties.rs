use lattice_trend::asymptotics::{covariance, limit_matrices, numerical_rank, phi_matrix, Normings};
use lattice_trend::design::{gram_matrix, profile_beta, scaled_gram, Profiler};
use lattice_trend::model::{validate_theta, CoefficientVector, ExponentVector, LatticeGrid, ModelSpec, ParamSpace};
use lattice_trend::montecarlo::{paper_study, run_study};
use lattice_trend::nlse::{fit, project, FitOptions};
use lattice_trend::simulate::{gen_dataset, gen_error_field, BuiltinKernel, ErrorFieldModel};
use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use proptest::prelude::*;

/// Exponent blocks for up to `max_dims` dimensions with up to `max_terms`
/// terms each, ascending with consecutive gaps of at least `gap`.
fn exponents(max_dims: usize, max_terms: usize, gap: f64) -> impl Strategy<Value = ExponentVector> {
    let block = (1..=max_terms).prop_flat_map(move |r| {
        (-0.45f64..1.5, prop::collection::vec(gap..gap + 0.8, r - 1)).prop_map(|(first, steps)| {
            let mut v = vec![first];
            for s in steps {
                v.push(v.last().unwrap() + s);
            }
            v
        })
    });
    prop::collection::vec(block, 1..=max_dims).prop_map(ExponentVector::new)
}

fn coefficients_for(theta: &ExponentVector) -> impl Strategy<Value = CoefficientVector> {
    let sizes: Vec<usize> = theta.blocks().iter().map(Vec::len).collect();
    let blocks: Vec<_> = sizes
        .into_iter()
        .map(|r| prop::collection::vec((0.5f64..2.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m }), r))
        .collect();
    blocks.prop_map(CoefficientVector::new)
}

fn extents_for(dims: usize, lo: usize, hi: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(lo..=hi, dims)
}

fn symmetric_error(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_symmetric_psd_with_unit_scaled_entries(
        (h, n) in exponents(2, 3, 0.3).prop_flat_map(|h| { let d = h.dims(); (Just(h), extents_for(d, 3, 12)) })
    ) {
        let m = gram_matrix(&h, &h, &n).unwrap();
        prop_assert_eq!(symmetric_error(&m), 0.0);
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * eig.max());
        let scaled = scaled_gram(&h, &n).unwrap();
        prop_assert!(scaled.iter().all(|&x| x > 0.0));
        // Averages of (u/n)^(a+b) only stay below one for nonnegative powers.
        if h.flat().iter().all(|&v| v >= 0.0) {
            prop_assert!(scaled.iter().all(|&x| x <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn cross_gram_transposes(
        (g, h, n) in exponents(2, 2, 0.1)
            .prop_flat_map(|g| {
                let counts: Vec<usize> = g.blocks().iter().map(Vec::len).collect();
                let d = g.dims();
                let h = counts
                    .into_iter()
                    .map(|r| prop::collection::vec(-0.45f64..4.0, r))
                    .collect::<Vec<_>>()
                    .prop_map(ExponentVector::new);
                (Just(g), h, extents_for(d, 2, 10))
            })
    ) {
        let gh = gram_matrix(&g, &h, &n).unwrap();
        let hg = gram_matrix(&h, &g, &n).unwrap();
        prop_assert_eq!(gh, hg.transpose());
    }

    #[test]
    fn profiled_rss_never_exceeds_the_objective(
        (h, b, n, seed) in exponents(2, 2, 0.3).prop_flat_map(|h| {
            let d = h.dims();
            let b = coefficients_for(&h);
            (Just(h), b, extents_for(d, 4, 10), any::<u64>())
        })
    ) {
        let grid = gen_error_field(&ErrorFieldModel::Iid { sigma: 1.0 }, &n, seed).unwrap();
        let profiler = Profiler::new(&grid);
        let rss = profiler.rss(&h).unwrap();
        prop_assert!(rss >= 0.0);
        prop_assert!(rss <= profiler.objective(&h, &b).unwrap() * (1.0 + 1e-10));
    }

    #[test]
    fn csv_site_order_does_not_change_the_profile(
        (h, n, seed, rotate) in exponents(2, 2, 0.3).prop_flat_map(|h| {
            let d = h.dims();
            (Just(h), extents_for(d, 4, 9), any::<u64>(), any::<prop::sample::Index>())
        })
    ) {
        let grid = gen_error_field(&ErrorFieldModel::Iid { sigma: 1.0 }, &n, seed).unwrap();
        let mut text = Vec::new();
        grid.write_csv(&mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let k = rotate.index(lines.len());
        lines.rotate_left(k);
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        let back = LatticeGrid::read_csv(shuffled.as_bytes()).unwrap();
        prop_assert_eq!(&back, &grid);
        let (b0, _) = profile_beta(&h, &grid).unwrap();
        let (b1, _) = profile_beta(&h, &back).unwrap();
        for (x, y) in b0.flat().iter().zip(b1.flat()) {
            prop_assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn limit_matrices_are_positive_definite(
        (theta, beta) in exponents(2, 2, 0.3).prop_flat_map(|t| { let b = coefficients_for(&t); (Just(t), b) })
    ) {
        let lm = limit_matrices(&theta, &beta).unwrap();
        prop_assert_eq!(symmetric_error(&lm.phi), 0.0);
        prop_assert!(Cholesky::new(lm.phi.clone()).is_some());
        prop_assert!(symmetric_error(&lm.upsilon) <= 1e-14 * lm.upsilon.amax());
        prop_assert!(Cholesky::new(lm.upsilon.clone()).is_some());
        let p = theta.len();
        prop_assert_eq!(numerical_rank(&lm.b, 1e-12), p);
        let eye = &lm.phi * &lm.phi_inverse;
        prop_assert!((eye - DMatrix::identity(p, p)).amax() < 1e-6);
    }

    #[test]
    fn covariance_is_psd_with_rank_at_most_p(
        (theta, beta, n, f0) in exponents(2, 2, 0.3).prop_flat_map(|t| {
            let d = t.dims();
            let b = coefficients_for(&t);
            (Just(t), b, extents_for(d, 5, 40), 0.1f64..10.0)
        })
    ) {
        let report = covariance(&theta, &beta, &n, f0).unwrap();
        let c = report.covariance_matrix();
        let p = theta.len();
        prop_assert!(symmetric_error(&c) <= 1e-12 * c.amax());
        let eig = SymmetricEigen::new(c.clone()).eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * eig.max());
        prop_assert!(numerical_rank(&c, 1e-8) <= p);
        prop_assert!(report.parameters.iter().all(|q| q.se > 0.0 && q.ci95[0] < q.estimate && q.estimate < q.ci95[1]));

        let norm = Normings::new(&theta, &n).unwrap();
        prop_assert!(norm.d_plus().iter().chain(norm.l_plus().iter()).all(|&x| x > 0.0));
    }

    #[test]
    fn phi_is_invariant_to_block_order(theta in exponents(3, 2, 0.3)) {
        let reversed = ExponentVector::new(theta.blocks().iter().rev().cloned().collect());
        let a = phi_matrix(&theta, &theta);
        let b = phi_matrix(&reversed, &reversed);
        prop_assert!((a.determinant() - b.determinant()).abs() <= 1e-12 * a.determinant().abs().max(1e-300));
        prop_assert!((a.trace() - b.trace()).abs() <= 1e-14 * a.trace());
    }

    #[test]
    fn projection_lands_in_the_parameter_space(
        raw in prop::collection::vec(prop::collection::vec(-3.0f64..7.0, 1..=3), 1..=2)
    ) {
        let h = ExponentVector::new(raw);
        let space = ParamSpace::default_for(h.dims());
        let projected = project(&h, &space);
        prop_assert!(validate_theta(&projected, &space).is_valid());
        prop_assert_eq!(project(&projected, &space), projected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scaling_the_response_scales_the_coefficients(
        c in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let theta = ExponentVector::new(vec![vec![1.0], vec![0.5]]);
        let beta = CoefficientVector::new(vec![vec![1.0], vec![1.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::Iid { sigma: 1.0 }, &[10, 10], seed).unwrap();
        let scaled = LatticeGrid::new(grid.extents().to_vec(), grid.values().iter().map(|y| c * y).collect()).unwrap();
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let space = ParamSpace::default_for(2);
        let opts = FitOptions::default();
        let a = fit(&grid, &spec, &space, &opts).unwrap();
        let b = fit(&scaled, &spec, &space, &opts).unwrap();
        for (x, y) in a.theta_hat.flat().iter().zip(b.theta_hat.flat()) {
            prop_assert!((x - y).abs() < 1e-4, "theta {} vs {}", x, y);
        }
        for (x, y) in a.beta_hat.flat().iter().zip(b.beta_hat.flat()) {
            prop_assert!((c * x - y).abs() < 1e-3 * (c * x).abs().max(c), "beta {} vs {}", c * x, y);
        }
        prop_assert!((b.rss - c * c * a.rss).abs() <= 1e-6 * b.rss);
    }

    #[test]
    fn fitted_exponents_are_feasible(seed in any::<u64>(), t1 in 0.0f64..3.0, gap in 0.2f64..1.0) {
        let theta = ExponentVector::new(vec![vec![t1, t1 + gap]]);
        let beta = CoefficientVector::new(vec![vec![1.0, -1.0]]);
        let grid = gen_dataset(&theta, &beta, &ErrorFieldModel::Iid { sigma: 0.5 }, &[30], seed).unwrap();
        let space = ParamSpace::default_for(1);
        let result = fit(&grid, &ModelSpec::new(vec![2]).unwrap(), &space, &FitOptions::default()).unwrap();
        prop_assert!(validate_theta(&result.theta_hat, &space).is_valid());
        prop_assert!(result.rss >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn study_cells_are_coherent(table in 1usize..=8, seed in any::<u64>()) {
        let mut config = paper_study(table).unwrap();
        config.replications = 6;
        config.base_seed = seed;
        config.extents = vec![vec![8, 9]];
        let report = run_study(&config).unwrap();
        for cell in &report.cells {
            prop_assert!(cell.mse >= cell.bias * cell.bias * (1.0 - 1e-12));
            for size in [cell.size5, cell.size1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&size));
            }
            prop_assert_eq!(cell.replications + cell.failures, 6);
        }
    }
}

#[test]
fn builtin_kernels_match_their_theoretical_variance() {
    for kernel in [BuiltinKernel::Ma1Multidirection, BuiltinKernel::Ma4Multilateral, BuiltinKernel::Ma9Diagonal] {
        let model = ErrorFieldModel::builtin(kernel);
        let grid = gen_error_field(&model, &[200, 200], 17).unwrap();
        let var = grid.sum_of_squares() / grid.n_obs() as f64;
        let expected = model.variance();
        // Loose bound: the sample variance of a short-memory field of 40 000
        // sites is within a few percent of its expectation.
        assert!((var - expected).abs() < 0.05 * expected, "{}: {var} vs {expected}", kernel.name());
    }
}
