//! Estimator-against-oracle checks that go beyond single operations: the
//! exhaustive-frequency equality with exact enumeration, the
//! importance-sampling identity on randomized instances, and the
//! guidance-free reduction of the full sampler.

use flowguide_core::guidance::{
    estimate_guided_rate, run_guided_sampler, run_unguided_sampler, GuidanceConfig,
};
use flowguide_core::models::{Completions, TabularDiscretePrior, TabularOracle};
use flowguide_core::oracle::{exact_guided_rate, importance_sampling_identity_check};
use flowguide_core::predictors::{ConstantScore, TabularScore, TargetPredictor};
use flowguide_core::rng::derive_rng;
use flowguide_core::scalar::Scalar;
use flowguide_core::state::{StateSpaceSpec, Symbol, TimePoint};
use ndarray::Array2;

fn t(v: f64) -> TimePoint<f64> {
    TimePoint::new(v).unwrap()
}

fn random_instance(
    seed: u64,
    space: StateSpaceSpec,
) -> (TabularDiscretePrior<f64>, TabularScore<f64>) {
    let mut rng = derive_rng(seed, &[0]);
    let size = space.joint_size().unwrap();
    let mut probs: Vec<f64> = (0..size)
        .map(|_| 0.05 + f64::unit_uniform(&mut rng))
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let prior = TabularDiscretePrior::new(space, probs).unwrap();
    let scores: Vec<f64> = (0..size)
        .map(|_| 0.2 + 3.0 * f64::unit_uniform(&mut rng))
        .collect();
    let predictor = TabularScore::new(space, scores).unwrap();
    (prior, predictor)
}

fn random_masked_state(seed: u64, space: StateSpaceSpec) -> Vec<Symbol> {
    let mut rng = derive_rng(seed, &[1]);
    loop {
        let a_t: Vec<Symbol> = (0..space.n_sites)
            .map(|_| {
                if f64::unit_uniform(&mut rng) < 0.5 {
                    space.mask_symbol
                } else {
                    (f64::unit_uniform(&mut rng) * space.n_real_symbols() as f64) as Symbol
                }
            })
            .collect();
        if a_t.iter().any(|&s| s == space.mask_symbol) {
            return a_t;
        }
    }
}

// Feeding the estimator every compatible completion with multiplicity
// proportional to its exact posterior probability reproduces the enumerated
// guided rate to rounding. Uses dyadic priors so the multiplicities are
// exact.
#[test]
fn exhaustive_frequency_estimate_equals_enumeration() {
    let space = StateSpaceSpec::new(2, 3, 1, 2).unwrap();
    for seed in 0..20u64 {
        let mut rng = derive_rng(seed, &[2]);
        let size = space.joint_size().unwrap();
        // Integer masses out of 64.
        let mut masses: Vec<u64> = (0..size)
            .map(|_| 1 + (f64::unit_uniform(&mut rng) * 15.0) as u64)
            .collect();
        let deficit = 64 - masses.iter().sum::<u64>() % 64;
        masses[0] += deficit;
        let total: u64 = masses.iter().sum();
        let probs: Vec<f64> = masses.iter().map(|&m| m as f64 / total as f64).collect();
        let prior = TabularDiscretePrior::new(space, probs).unwrap();
        let scores: Vec<f64> = (0..size)
            .map(|_| 0.25 + 2.0 * f64::unit_uniform(&mut rng))
            .collect();
        let predictor = TabularScore::new(space, scores).unwrap();

        let a_t = [0 as Symbol, space.mask_symbol];
        let tp = t(0.5);

        // Enumerate compatible completions with posterior-proportional
        // multiplicity.
        let mut completions = Completions::empty(2);
        let mut weights = Vec::new();
        let coords = Array2::<f64>::zeros((1, 2));
        let mut buf = vec![0 as Symbol; 2];
        for code in 0..size {
            space.symbols_of_index(code, &mut buf).unwrap();
            if buf[0] != a_t[0] {
                continue;
            }
            let f = predictor.score(&coords, &buf).unwrap();
            for _ in 0..masses[code] {
                completions.push_row(&buf);
                weights.push(f);
            }
        }

        let estimate = estimate_guided_rate(&space, &completions, &weights, &a_t, tp).unwrap();
        let exact = exact_guided_rate(&prior, &predictor, &a_t, tp).unwrap();
        for (e, x) in estimate.rates().iter().zip(exact.iter()) {
            assert!((e - x).abs() < 1e-12, "estimate {e} vs exact {x}");
        }
    }

    // The worked example from the enumeration oracle, fed as frequencies:
    // posterior {AA: 1/3, AB: 2/3} with weights f(AA)=1, f(AB)=3.
    let space = StateSpaceSpec::new(2, 3, 1, 2).unwrap();
    let mut completions = Completions::empty(2);
    completions.push_row(&[0, 0]);
    completions.push_row(&[0, 1]);
    completions.push_row(&[0, 1]);
    let weights = vec![1.0, 3.0, 3.0];
    let estimate =
        estimate_guided_rate(&space, &completions, &weights, &[0, 2], t(0.5)).unwrap();
    assert!((estimate.rate(1, 1) - 12.0 / 7.0).abs() < 1e-14);
    assert!((estimate.rate(1, 0) - 2.0 / 7.0).abs() < 1e-14);
}

#[test]
fn importance_sampling_identity_on_randomized_instances() {
    let space = StateSpaceSpec::new(3, 4, 1, 3).unwrap();
    for seed in 0..25u64 {
        let (prior, predictor) = random_instance(seed, space);
        let a_t = random_masked_state(seed, space);
        let tv = 0.1 + 0.8 * (seed as f64 / 25.0);
        let gap =
            importance_sampling_identity_check(&prior, &predictor, &a_t, t(tv)).unwrap();
        assert!(gap <= 1e-10, "seed {seed}: discrepancy {gap}");
    }
}

// Monte Carlo concentration: the estimator run with genuine posterior draws
// approaches the enumerated rate as K grows, comparing worst-case error
// between K and 16K.
#[test]
fn estimator_error_shrinks_with_more_completions() {
    let space = StateSpaceSpec::new(2, 4, 1, 3).unwrap();
    let (prior, predictor) = random_instance(77, space);
    let a_t = [3 as Symbol, 3];
    let tp = t(0.5);
    let exact = exact_guided_rate(&prior, &predictor, &a_t, tp).unwrap();
    let coords = Array2::<f64>::zeros((1, 2));

    let mut sup_errors = Vec::new();
    for (stream, k) in [(0u64, 32usize), (1, 512)] {
        let mut worst_of_medians = Vec::new();
        for trial in 0..31u64 {
            let mut rng = derive_rng(123, &[stream, trial]);
            let posterior =
                flowguide_core::models::tabular_posterior(&prior, &a_t, tp).unwrap();
            let mut comps = Completions::empty(2);
            comps.reset(k, space.mask_symbol);
            let mut weights = Vec::with_capacity(k);
            for idx in 0..k {
                let code = posterior.sample_joint_index(&mut rng);
                space.symbols_of_index(code, comps.row_mut(idx)).unwrap();
                weights.push(predictor.score(&coords, comps.row(idx)).unwrap());
            }
            let est = estimate_guided_rate(&space, &comps, &weights, &a_t, tp).unwrap();
            let sup = est
                .rates()
                .iter()
                .zip(exact.iter())
                .map(|(e, x)| (e - x).abs())
                .fold(0.0f64, f64::max);
            worst_of_medians.push(sup);
        }
        worst_of_medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sup_errors.push(worst_of_medians[15]);
    }
    assert!(
        sup_errors[1] < sup_errors[0],
        "median sup error did not shrink: K=32 -> {}, K=512 -> {}",
        sup_errors[0],
        sup_errors[1]
    );
}

// With unit scores the guided sampler must reproduce the plain flow sampler
// bit for bit, trajectory by trajectory.
#[test]
fn guidance_free_reduction_is_bitwise() {
    let space = StateSpaceSpec::new(3, 3, 2, 2).unwrap();
    let (prior, _) = random_instance(5, space);
    let oracle = TabularOracle::new(prior);
    let unit = ConstantScore::<f64>::unit();
    let config = GuidanceConfig::<f64> {
        k: 24,
        n_iter: 3,
        rho: 0.0,
        steps: 40,
        seed: 2024,
        ..GuidanceConfig::default()
    };
    for trajectory in 0..25u64 {
        let guided = run_guided_sampler(&oracle, &unit, &config, trajectory).unwrap();
        let unguided = run_unguided_sampler(&oracle, &config, trajectory).unwrap();
        assert_eq!(guided, unguided, "trajectory {trajectory} diverged");
    }
}
