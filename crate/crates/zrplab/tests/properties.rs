//! Property tests for the structural invariants: ranking bijections,
//! normalization, entropy conventions, and certificate monotonicity.

use proptest::prelude::*;

use zrplab::functionals::{dirichlet_sqrt, dissipation, entropy};
use zrplab::measures::{canonical_marginal, convolve_counts, single_site};
use zrplab::rates::RateFunction;
use zrplab::statespace::{build_generator, Flavor, StateSpace};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_unrank_bijection(ell in 1usize..7, particles in 0usize..10, pick in 0usize..1000) {
        let space = StateSpace::enumerate(ell, particles).unwrap();
        let index = pick % space.size();
        let eta = space.unrank(index);
        prop_assert_eq!(eta.iter().map(|&v| v as usize).sum::<usize>(), particles);
        prop_assert_eq!(space.rank(&eta), index);
    }

    #[test]
    fn measures_normalize(period in 1usize..5, n_max in 4usize..40) {
        let c = RateFunction::staircase(period, n_max);
        let mu = single_site(&c, n_max);
        prop_assert!(mu.check_normalized(1e-12));
        let marginal = canonical_marginal(&c, 4, n_max.min(16));
        prop_assert!(marginal.check_normalized(1e-12));
    }

    #[test]
    fn convolution_total_triangle(period in 1usize..4, ell in 1usize..5) {
        // Convolved counts truncate, so mass never exceeds one.
        let c = RateFunction::staircase(period, 12);
        let mu = single_site(&c, 12);
        let conv = convolve_counts(&mu, ell, 10);
        let total = conv.total();
        prop_assert!(total <= 1.0 + 1e-12 && total > 0.0);
    }

    #[test]
    fn entropy_scale_covariant_and_nonnegative(
        scale in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        let c = RateFunction::staircase(2, 8);
        let space = StateSpace::enumerate(3, 3).unwrap();
        let gen = build_generator(&space, &c, Flavor::Complete).unwrap();
        let f = &zrplab::functionals::random_positive_functions(&gen, 1, seed)[0];
        let nu = gen.stationary();
        let base = entropy(nu, f).unwrap();
        prop_assert!(base >= 0.0);
        let scaled: Vec<f64> = f.iter().map(|v| scale * v).collect();
        let expected = scale * base;
        prop_assert!((entropy(nu, &scaled).unwrap() - expected).abs() <= 1e-11 * expected.max(1e-12));
    }

    #[test]
    fn dissipation_dominates_sqrt_everywhere(seed in 0u64..500) {
        let c = RateFunction::staircase(3, 10);
        let space = StateSpace::enumerate(4, 3).unwrap();
        let gen = build_generator(&space, &c, Flavor::Complete).unwrap();
        let f = &zrplab::functionals::random_positive_functions(&gen, 1, seed)[0];
        let lhs = dissipation(&gen, f).unwrap();
        let rhs = 4.0 * dirichlet_sqrt(&gen, f).unwrap();
        prop_assert!(lhs - rhs >= -1e-10 * (1.0 + lhs));
    }

    #[test]
    fn certificate_window_monotone(period in 1usize..6, short in 10usize..40, extra in 1usize..60) {
        // Enlarging the window never increases the certified margin.
        let a = RateFunction::staircase(period, short).certify();
        let b = RateFunction::staircase(period, short + extra).certify();
        match (a.h1, b.h1) {
            (Some((da, _)), Some((db, _))) => prop_assert!(db <= da + 1e-12),
            (None, Some(_)) => prop_assert!(false, "longer window certified where short failed"),
            _ => {}
        }
    }

    #[test]
    fn regularized_staircase_uniformly_increasing(period in 2usize..6) {
        let c = RateFunction::staircase(period, 50);
        let n0 = c.certify().n0().unwrap();
        let reg = c.regularize(n0).unwrap();
        prop_assert!(reg.min_increment() > 0.0);
    }
}
