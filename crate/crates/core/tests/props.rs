//! Property tests for the algebraic invariants: projection idempotence,
//! linearity and rotation-commutation, probability normalization, and the
//! estimator's convex-combination bound.

use flowguide_core::guidance::estimate_guided_rate;
use flowguide_core::models::{
    gm_responsibilities, tabular_posterior, Completions, GaussianMixtureLabeledPrior, GmComponent,
    TabularDiscretePrior,
};
use flowguide_core::rng::derive_rng;
use flowguide_core::scalar::Scalar;
use flowguide_core::state::{
    column, project_to_simplex, random_rotation, rotate_state, StateSpaceSpec, Symbol, TimePoint,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn coord_matrix(d: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-100.0f64..100.0, d * n)
        .prop_map(move |v| Array2::from_shape_vec((d, n), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_zero_mean(
        d in 1usize..4,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = derive_rng(seed, &[0]);
        let x = Array2::from_shape_fn((d, n), |_| 50.0 * f64::standard_normal(&mut rng));
        let p = project_to_simplex(&x).unwrap();
        for row in p.rows() {
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12);
        }
        let pp = project_to_simplex(&p).unwrap();
        for (a, b) in p.iter().zip(pp.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_linear(
        (x, y) in (1usize..4, 1usize..6).prop_flat_map(|(d, n)| (coord_matrix(d, n), coord_matrix(d, n))),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let lhs = project_to_simplex(&(&x * alpha + &y * beta)).unwrap();
        let rhs = project_to_simplex(&x).unwrap() * alpha + project_to_simplex(&y).unwrap() * beta;
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((a - b).abs() < 1e-11, "lhs {a} rhs {b}");
        }
    }

    #[test]
    fn projection_commutes_with_rotations(
        d in 2usize..4,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = derive_rng(seed, &[1]);
        let x = Array2::from_shape_fn((d, n), |_| 10.0 * f64::standard_normal(&mut rng));
        let s = random_rotation::<f64, _>(d, &mut rng);
        let a = project_to_simplex(&rotate_state(&x, &s).unwrap()).unwrap();
        let b = rotate_state(&project_to_simplex(&x).unwrap(), &s).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_posterior_is_normalized_and_compatible(
        raw in proptest::collection::vec(0.01f64..1.0, 8),
        mask_pattern in proptest::collection::vec(any::<bool>(), 3),
        t in 0.0f64..0.99,
    ) {
        let space = StateSpaceSpec::new(3, 3, 1, 2).unwrap();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let prior = TabularDiscretePrior::new(space, probs).unwrap();
        let a_t: Vec<Symbol> = mask_pattern
            .iter()
            .map(|&masked| if masked { 2 } else { 0 })
            .collect();
        let posterior = tabular_posterior(&prior, &a_t, TimePoint::new(t).unwrap()).unwrap();
        let sum: f64 = posterior.entries().map(|(_, p)| p).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let mut buf = vec![0 as Symbol; 3];
        for (code, p) in posterior.entries() {
            prop_assert!(p >= 0.0);
            space.symbols_of_index(code, &mut buf).unwrap();
            for (i, &site) in buf.iter().enumerate() {
                if a_t[i] != space.mask_symbol {
                    prop_assert_eq!(site, a_t[i]);
                }
            }
        }
    }

    #[test]
    fn gm_responsibilities_are_normalized(
        x in -5.0f64..5.0,
        t in 0.0f64..0.99,
        w0 in 0.05f64..0.95,
        m0 in -3.0f64..3.0,
        m1 in -3.0f64..3.0,
        s0 in 0.1f64..2.0,
        s1 in 0.1f64..2.0,
    ) {
        let space = StateSpaceSpec::new(1, 3, 1, 2).unwrap();
        let prior = GaussianMixtureLabeledPrior::new(
            space,
            vec![
                GmComponent { weight: w0, mean: Array1::from_vec(vec![m0]), std: s0 },
                GmComponent { weight: 1.0 - w0, mean: Array1::from_vec(vec![m1]), std: s1 },
            ],
        )
        .unwrap();
        let resp = gm_responsibilities(
            &prior,
            column(&[x]).view(),
            space.mask_symbol,
            TimePoint::new(t).unwrap(),
        )
        .unwrap();
        prop_assert!((resp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(resp.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn estimated_rates_are_convex_combinations_of_conditional_rates(
        seed in any::<u64>(),
        k in 1usize..32,
        t in 0.0f64..0.95,
    ) {
        let space = StateSpaceSpec::new(3, 4, 1, 3).unwrap();
        let mut rng = derive_rng(seed, &[2]);
        let mut comps = Completions::empty(3);
        for _ in 0..k {
            let row: Vec<Symbol> = (0..3)
                .map(|_| (f64::unit_uniform(&mut rng) * 3.0) as Symbol)
                .collect();
            comps.push_row(&row);
        }
        let weights: Vec<f64> = (0..k).map(|_| 1e-6 + f64::unit_uniform(&mut rng)).collect();
        let a_t = [3 as Symbol, 0, 3];
        let est = estimate_guided_rate(
            &space,
            &comps,
            &weights,
            &a_t,
            TimePoint::new(t).unwrap(),
        )
        .unwrap();
        let bound = 1.0 / (1.0 - t) * (1.0 + 1e-12);
        for (i, row) in est.rates().rows().into_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if a_t[i] == space.mask_symbol {
                // Every completion unmasks the site, so the outflow is the
                // full conditional rate.
                prop_assert!((total - 1.0 / (1.0 - t)).abs() <= 1e-9 * bound);
            } else {
                prop_assert_eq!(total, 0.0);
            }
            for &r in row.iter() {
                prop_assert!(r >= 0.0 && r <= bound);
            }
        }
    }
}
