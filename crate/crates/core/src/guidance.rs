//! The guided sampling loop: self-normalized Monte Carlo estimation of the
//! guided rate matrix, clamped-Euler CTMC stepping, projected gradient
//! guidance of the coordinates, and the end-to-end sampler.
//!
//! One step at time t does, in order: predict the clean coordinates; draw K
//! joint symbol completions from the posterior model; weight each completion
//! by the target predictor; estimate the per-site guided rates as the
//! weighted average of conditional rates over completions; advance the
//! symbols one Euler step of the CTMC; pick one completion with probability
//! proportional to its weight and run projected gradient ascent of the
//! predictor log-score through the model's coordinate prediction; finally
//! advance the coordinates along the conditional velocity toward the
//! (re-predicted) clean coordinates and re-project.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{Completions, PosteriorModel};
use crate::predictors::{TargetPredictor, FD_STEP};
use crate::rng::{step_rng, Purpose};
use crate::scalar::Scalar;
use crate::state::{
    project_to_simplex, project_to_simplex_in_place, MultimodalState, StateSpaceSpec, Symbol,
    TimePoint,
};

/// Hyperparameters of the guided sampler. The defaults are the constants
/// used throughout: K = 512 completions, 4 gradient iterations, strength
/// 0.02, temperature 10, 100 Euler steps.
///
/// `tau` is consumed when the target predictor is constructed (tempered
/// softmax or tempered energy); the sampling loop itself never re-applies
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig<T: Scalar> {
    /// Monte Carlo completions per step.
    pub k: usize,
    /// Projected gradient-ascent iterations per step.
    pub n_iter: usize,
    /// Guidance strength (constant schedule).
    pub rho: T,
    /// Predictor temperature (constant schedule).
    pub tau: T,
    /// Euler step count W; dt = 1/W.
    pub steps: usize,
    /// Root seed; every stream the sampler uses derives from it.
    pub seed: u64,
    /// Re-predict the clean coordinates per completion when weighting,
    /// instead of reusing the single prediction at the current state.
    pub repredict_x1_per_completion: bool,
}

impl<T: Scalar> Default for GuidanceConfig<T> {
    fn default() -> Self {
        Self {
            k: 512,
            n_iter: 4,
            rho: T::from_f64_c(0.02),
            tau: T::from_f64_c(10.0),
            steps: 100,
            seed: 0,
            repredict_x1_per_completion: false,
        }
    }
}

impl<T: Scalar> GuidanceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidArgument("step count must be at least 2".into()));
        }
        if !self.rho.is_finite() || self.rho < T::zero() {
            return Err(Error::InvalidArgument(
                "guidance strength must be finite and nonnegative".into(),
            ));
        }
        if !self.tau.is_finite() || self.tau <= T::zero() {
            return Err(Error::InvalidArgument(
                "temperature must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Estimated guided rate matrix at one step: one row per site, one column
/// per symbol. Rows of unmasked sites are zero, as is the mask column.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedRateEstimate<T: Scalar> {
    rates: Array2<T>,
}

impl<T: Scalar> GuidedRateEstimate<T> {
    pub fn rate(&self, site: usize, target: Symbol) -> T {
        self.rates[[site, usize::from(target)]]
    }

    pub fn rates(&self) -> &Array2<T> {
        &self.rates
    }

    /// Total jump intensity out of a site's current symbol.
    pub fn total_outflow(&self, site: usize) -> T {
        self.rates.row(site).iter().copied().sum()
    }
}

/// Self-normalized estimator of the guided rate matrix from K weighted
/// completions: for each masked site i and symbol b,
/// `R(i, b) = sum_k w_k R_cond(mask, b | a1_k[i]) / sum_k w_k`
/// with the masking conditional rate `1/(1-t)` toward the completion's
/// symbol. Computed in one pass over the completions.
pub fn estimate_guided_rate<T: Scalar>(
    space: &StateSpaceSpec,
    completions: &Completions,
    weights: &[T],
    a_t: &[Symbol],
    t: TimePoint<T>,
) -> Result<GuidedRateEstimate<T>> {
    let rem = t.remaining_before_one()?;
    if completions.is_empty() {
        return Err(Error::InvalidArgument(
            "estimator needs at least one completion".into(),
        ));
    }
    if completions.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} completions but {} weights",
            completions.len(),
            weights.len()
        )));
    }
    if completions.n_sites() != space.n_sites || a_t.len() != space.n_sites {
        return Err(Error::InvalidState(
            "completion width does not match the state space".into(),
        ));
    }
    let mut denom = T::zero();
    for &w in weights {
        if !w.is_finite() || w <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "completion weights must be positive and finite, got {w}"
            )));
        }
        denom += w;
    }

    let mut rates = Array2::zeros((space.n_sites, space.alphabet_size));
    for (row, &w) in completions.rows().zip(weights.iter()) {
        for (i, &a1) in row.iter().enumerate() {
            if a1 == space.mask_symbol || usize::from(a1) >= space.alphabet_size {
                return Err(Error::InvalidArgument(format!(
                    "completion carries invalid symbol {a1} at site {i}"
                )));
            }
            if a_t[i] == space.mask_symbol {
                rates[[i, usize::from(a1)]] += w;
            }
        }
    }
    let scale = T::one() / (denom * rem);
    rates.mapv_inplace(|v| v * scale);
    Ok(GuidedRateEstimate { rates })
}

/// One clamped Euler step of the CTMC: each site independently jumps to
/// symbol b with probability `rate * dt`, staying put with the remaining
/// probability. When the total jump mass exceeds 1 the jump probabilities
/// are renormalized to sum to 1 (the stay probability clamps at 0).
pub fn ctmc_euler_step_into<T: Scalar, R: Rng + ?Sized>(
    a_t: &[Symbol],
    rate: &GuidedRateEstimate<T>,
    dt: T,
    rng: &mut R,
    out: &mut Vec<Symbol>,
) {
    debug_assert!(dt > T::zero());
    out.clear();
    for (i, &current) in a_t.iter().enumerate() {
        let total = rate.total_outflow(i);
        if total <= T::zero() {
            out.push(current);
            continue;
        }
        let mass = total * dt;
        let u = T::unit_uniform(rng);
        let next = if mass <= T::one() {
            let stay = T::one() - mass;
            if u < stay {
                current
            } else {
                pick_jump_target(rate, i, (u - stay) / dt, current)
            }
        } else {
            // Renormalized jump distribution proportional to the rates.
            pick_jump_target(rate, i, u * total, current)
        };
        out.push(next);
    }
}

/// Allocating variant of [`ctmc_euler_step_into`].
pub fn ctmc_euler_step<T: Scalar, R: Rng + ?Sized>(
    a_t: &[Symbol],
    rate: &GuidedRateEstimate<T>,
    dt: T,
    rng: &mut R,
) -> Vec<Symbol> {
    let mut out = Vec::with_capacity(a_t.len());
    ctmc_euler_step_into(a_t, rate, dt, rng, &mut out);
    out
}

// Walk the site's rate row and return the first symbol whose cumulative
// rate passes `threshold`; falls back to the last positive entry so
// rounding in the cumulative sum cannot leave the walk empty-handed.
fn pick_jump_target<T: Scalar>(
    rate: &GuidedRateEstimate<T>,
    site: usize,
    threshold: T,
    current: Symbol,
) -> Symbol {
    let row = rate.rates().row(site);
    let mut acc = T::zero();
    let mut last_positive = current;
    for (b, &r) in row.iter().enumerate() {
        if r > T::zero() {
            last_positive = b as Symbol;
            acc += r;
            if threshold < acc {
                return b as Symbol;
            }
        }
    }
    last_positive
}

/// Final-step transition: every masked site must jump, with target
/// probabilities proportional to its estimated rates. This is the clamped
/// Euler step at `dt = 1 - t` in exact arithmetic, where the total jump
/// mass is exactly 1; doing it explicitly keeps floating-point dust from
/// leaving a mask behind.
pub fn ctmc_forced_unmask_into<T: Scalar, R: Rng + ?Sized>(
    space: &StateSpaceSpec,
    a_t: &[Symbol],
    rate: &GuidedRateEstimate<T>,
    rng: &mut R,
    out: &mut Vec<Symbol>,
) -> Result<()> {
    out.clear();
    for (i, &current) in a_t.iter().enumerate() {
        if current != space.mask_symbol {
            out.push(current);
            continue;
        }
        let total = rate.total_outflow(i);
        if total <= T::zero() {
            return Err(Error::ResidualMask { site: i });
        }
        let u = T::unit_uniform(rng);
        out.push(pick_jump_target(rate, i, u * total, current));
    }
    Ok(())
}

/// Draw the index of one completion with probability proportional to its
/// weight.
pub fn sample_weighted_index<T: Scalar, R: Rng + ?Sized>(
    weights: &[T],
    rng: &mut R,
) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no weights to sample from".into()));
    }
    let mut total = T::zero();
    for &w in weights {
        if !w.is_finite() || w <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "selection weights must be positive and finite, got {w}"
            )));
        }
        total += w;
    }
    let u = T::unit_uniform(rng) * total;
    let mut acc = T::zero();
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(weights.len() - 1)
}

/// Draw one completion with probability proportional to its weight.
pub fn sample_weighted_completion<'a, T: Scalar, R: Rng + ?Sized>(
    completions: &'a Completions,
    weights: &[T],
    rng: &mut R,
) -> Result<&'a [Symbol]> {
    if completions.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} completions but {} weights",
            completions.len(),
            weights.len()
        )));
    }
    Ok(completions.row(sample_weighted_index(weights, rng)?))
}

/// Run `n_iter` projected gradient-ascent iterations of the predictor
/// log-score through the model's coordinate prediction:
/// `X <- Project(X + rho * grad_X log f(E[X1 | X, a_t], a1))`.
///
/// Uses the model's vector-Jacobian product when available, otherwise a
/// central finite difference of the composite. With `n_iter = 0` or
/// `rho = 0` this reduces to the projection alone.
pub fn continuous_guidance<T: Scalar, M, P>(
    coords: &Array2<T>,
    a_t: &[Symbol],
    a1_sample: &[Symbol],
    model: &M,
    predictor: &P,
    rho: T,
    n_iter: usize,
    t: TimePoint<T>,
) -> Result<Array2<T>>
where
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    t.remaining_before_one()?;
    let space = model.space();
    let mut x = project_to_simplex(coords)?;
    if n_iter == 0 || rho == T::zero() {
        return Ok(x);
    }
    for iteration in 0..n_iter {
        let state = MultimodalState::new(space, x.clone(), a_t.to_vec())?;
        let mean = model.predict_x1_mean(&state, t)?;
        let cotangent = predictor.grad_x_log_score(&mean, a1_sample)?;
        let grad = match model.x1_mean_vjp(&state, t, &cotangent)? {
            Some(g) => g,
            None => composite_grad_fd(model, predictor, &state, a1_sample, t)?,
        };
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration });
        }
        x = x + grad * rho;
        project_to_simplex_in_place(&mut x);
    }
    Ok(x)
}

// Central finite difference of X -> log f(E[X1 | X, a_t], a1) for models
// without an analytic vector-Jacobian product.
fn composite_grad_fd<T: Scalar, M, P>(
    model: &M,
    predictor: &P,
    state: &MultimodalState<T>,
    a1_sample: &[Symbol],
    t: TimePoint<T>,
) -> Result<Array2<T>>
where
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    let space = state.space();
    let coords = state.coords();
    let mut grad = Array2::zeros(coords.dim());
    let mut work = coords.clone();
    let two = T::from_f64_c(2.0);
    for idx in ndarray::indices(coords.dim()) {
        let x = coords[(idx.0, idx.1)];
        let h = T::from_f64_c(FD_STEP) * (T::one() + x.abs());
        for (sign, slot) in [(T::one(), 0usize), (-T::one(), 1usize)] {
            work[(idx.0, idx.1)] = x + sign * h;
            let st = MultimodalState::new(space, work.clone(), state.symbols().to_vec())?;
            let mean = model.predict_x1_mean(&st, t)?;
            let value = predictor.log_score(&mean, a1_sample)?;
            if slot == 0 {
                grad[(idx.0, idx.1)] = value;
            } else {
                grad[(idx.0, idx.1)] = (grad[(idx.0, idx.1)] - value) / (two * h);
            }
        }
        work[(idx.0, idx.1)] = x;
    }
    Ok(grad)
}

/// Observer callback: step index (0 is the initial state) and the state
/// after that step.
pub type StepObserver<'a, T> = &'a mut dyn FnMut(usize, &MultimodalState<T>);

/// Run one guided trajectory from fresh noise.
pub fn run_guided_sampler<T, M, P>(
    model: &M,
    predictor: &P,
    config: &GuidanceConfig<T>,
    trajectory: u64,
) -> Result<MultimodalState<T>>
where
    T: Scalar,
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    run_guided_core(model, predictor, config, trajectory, None, None)
}

/// Run one guided trajectory from the given initial coordinates (projected
/// before use). The discrete part still starts fully masked.
pub fn run_guided_sampler_from<T, M, P>(
    model: &M,
    predictor: &P,
    config: &GuidanceConfig<T>,
    trajectory: u64,
    initial_coords: Array2<T>,
) -> Result<MultimodalState<T>>
where
    T: Scalar,
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    run_guided_core(model, predictor, config, trajectory, Some(initial_coords), None)
}

/// Run one guided trajectory, reporting every intermediate state.
pub fn run_guided_sampler_observed<T, M, P>(
    model: &M,
    predictor: &P,
    config: &GuidanceConfig<T>,
    trajectory: u64,
    initial_coords: Option<Array2<T>>,
    observer: StepObserver<'_, T>,
) -> Result<MultimodalState<T>>
where
    T: Scalar,
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    run_guided_core(model, predictor, config, trajectory, initial_coords, Some(observer))
}

fn run_guided_core<T, M, P>(
    model: &M,
    predictor: &P,
    config: &GuidanceConfig<T>,
    trajectory: u64,
    initial_coords: Option<Array2<T>>,
    mut observer: Option<StepObserver<'_, T>>,
) -> Result<MultimodalState<T>>
where
    T: Scalar,
    M: PosteriorModel<T> + ?Sized,
    P: TargetPredictor<T> + ?Sized,
{
    config.validate()?;
    let space = model.space();
    let total_steps = config.steps;
    let dt = T::one() / T::from_usize(total_steps).unwrap();

    let mut coords = initial_noise(space, config.seed, trajectory, initial_coords)?;
    let mut symbols = vec![space.mask_symbol; space.n_sites];
    let mut next_symbols: Vec<Symbol> = Vec::with_capacity(space.n_sites);
    let mut completions = Completions::empty(space.n_sites);
    let mut weights: Vec<T> = Vec::with_capacity(config.k);

    if let Some(obs) = observer.as_mut() {
        let state = MultimodalState::new(space, coords.clone(), symbols.clone())?;
        obs(0, &state);
    }

    for w in 0..total_steps {
        let t = TimePoint::of_step(w, total_steps);
        let final_step = w + 1 == total_steps;
        let state = MultimodalState::new(space, coords.clone(), symbols.clone())?;
        let x1_pred = model.predict_x1_mean(&state, t)?;

        // Discrete guidance: weighted completions -> estimated rates -> jump.
        let mut rng = step_rng(config.seed, trajectory, w as u64, Purpose::Completions);
        model.sample_a1_into(&state, t, config.k, &mut completions, &mut rng)?;
        weights.clear();
        if config.repredict_x1_per_completion {
            for row in completions.rows() {
                let st = MultimodalState::new(space, coords.clone(), row.to_vec())?;
                let mean = model.predict_x1_mean(&st, t)?;
                weights.push(predictor.score(&mean, row)?);
            }
        } else {
            for row in completions.rows() {
                weights.push(predictor.score(&x1_pred, row)?);
            }
        }
        let rate = estimate_guided_rate(&space, &completions, &weights, &symbols, t)?;
        let mut rng = step_rng(config.seed, trajectory, w as u64, Purpose::Jumps);
        if final_step {
            ctmc_forced_unmask_into(&space, &symbols, &rate, &mut rng, &mut next_symbols)?;
        } else {
            ctmc_euler_step_into(&symbols, &rate, dt, &mut rng, &mut next_symbols);
        }

        // Continuous guidance on the pre-jump symbols.
        let mut rng = step_rng(config.seed, trajectory, w as u64, Purpose::Selection);
        let selected = sample_weighted_completion(&completions, &weights, &mut rng)?.to_vec();
        coords = continuous_guidance(
            &coords,
            &symbols,
            &selected,
            model,
            predictor,
            config.rho,
            config.n_iter,
            t,
        )?;

        // Euler step along the conditional velocity toward the re-predicted
        // clean coordinates. The last step spans exactly the remaining time,
        // landing on the prediction.
        let state = MultimodalState::new(space, coords.clone(), symbols.clone())?;
        let x1_repredicted = model.predict_x1_mean(&state, t)?;
        if final_step {
            coords = x1_repredicted;
        } else {
            let rem = t.remaining_before_one()?;
            let step_fraction = dt / rem;
            coords = &coords + &((&x1_repredicted - &coords) * step_fraction);
        }
        project_to_simplex_in_place(&mut coords);

        std::mem::swap(&mut symbols, &mut next_symbols);

        if let Some(obs) = observer.as_mut() {
            let state = MultimodalState::new(space, coords.clone(), symbols.clone())?;
            obs(w + 1, &state);
        }
    }

    if let Some(site) = symbols.iter().position(|&s| s == space.mask_symbol) {
        return Err(Error::ResidualMask { site });
    }
    MultimodalState::new(space, coords, symbols)
}

/// The plain (unguided) multimodal flow sampler: rates are the unweighted
/// Monte Carlo average of conditional rates, the velocity comes straight
/// from the model prediction, and no gradient guidance runs. Reference path
/// for the guidance-free reduction.
pub fn run_unguided_sampler<T, M>(
    model: &M,
    config: &GuidanceConfig<T>,
    trajectory: u64,
) -> Result<MultimodalState<T>>
where
    T: Scalar,
    M: PosteriorModel<T> + ?Sized,
{
    config.validate()?;
    let space = model.space();
    let total_steps = config.steps;
    let dt = T::one() / T::from_usize(total_steps).unwrap();

    let mut coords = initial_noise(space, config.seed, trajectory, None)?;
    let mut symbols = vec![space.mask_symbol; space.n_sites];
    let mut next_symbols: Vec<Symbol> = Vec::with_capacity(space.n_sites);
    let mut completions = Completions::empty(space.n_sites);
    let unit_weights = vec![T::one(); config.k];

    for w in 0..total_steps {
        let t = TimePoint::of_step(w, total_steps);
        let final_step = w + 1 == total_steps;
        let state = MultimodalState::new(space, coords.clone(), symbols.clone())?;

        let mut rng = step_rng(config.seed, trajectory, w as u64, Purpose::Completions);
        model.sample_a1_into(&state, t, config.k, &mut completions, &mut rng)?;
        let rate = estimate_guided_rate(&space, &completions, &unit_weights, &symbols, t)?;
        let mut rng = step_rng(config.seed, trajectory, w as u64, Purpose::Jumps);
        if final_step {
            ctmc_forced_unmask_into(&space, &symbols, &rate, &mut rng, &mut next_symbols)?;
        } else {
            ctmc_euler_step_into(&symbols, &rate, dt, &mut rng, &mut next_symbols);
        }

        let x1_pred = model.predict_x1_mean(&state, t)?;
        if final_step {
            coords = x1_pred;
        } else {
            let rem = t.remaining_before_one()?;
            let step_fraction = dt / rem;
            coords = &coords + &((&x1_pred - &coords) * step_fraction);
        }
        project_to_simplex_in_place(&mut coords);
        std::mem::swap(&mut symbols, &mut next_symbols);
    }

    if let Some(site) = symbols.iter().position(|&s| s == space.mask_symbol) {
        return Err(Error::ResidualMask { site });
    }
    MultimodalState::new(space, coords, symbols)
}

fn initial_noise<T: Scalar>(
    space: StateSpaceSpec,
    seed: u64,
    trajectory: u64,
    provided: Option<Array2<T>>,
) -> Result<Array2<T>> {
    let mut coords = match provided {
        Some(x0) => {
            if x0.dim() != (space.cont_dim, space.n_sites) {
                return Err(Error::InvalidState(format!(
                    "initial coordinates have shape {:?}, expected ({}, {})",
                    x0.dim(),
                    space.cont_dim,
                    space.n_sites
                )));
            }
            x0
        }
        None => {
            let mut rng = step_rng(seed, trajectory, 0, Purpose::InitCoords);
            Array2::from_shape_fn((space.cont_dim, space.n_sites), |_| {
                T::standard_normal(&mut rng)
            })
        }
    };
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(
            "initial coordinates contain a non-finite entry".into(),
        ));
    }
    project_to_simplex_in_place(&mut coords);
    Ok(coords)
}

/// Run many guided trajectories in parallel. Each trajectory is a pure
/// function of (model, predictor, config, index), so the result is
/// independent of the thread count.
pub fn run_trajectories<T, M, P>(
    model: &M,
    predictor: &P,
    config: &GuidanceConfig<T>,
    count: usize,
) -> Result<Vec<MultimodalState<T>>>
where
    T: Scalar,
    M: PosteriorModel<T> + Sync + ?Sized,
    P: TargetPredictor<T> + Sync + ?Sized,
{
    (0..count)
        .into_par_iter()
        .map(|i| run_guided_sampler(model, predictor, config, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{conditional_rate, ConditionalRateQuery};
    use crate::models::{
        GaussianMixtureLabeledPrior, GmComponent, GmOracle, TabularDiscretePrior, TabularOracle,
    };
    use crate::predictors::{ConstantScore, EnergyTarget, Property, TabularScore};
    use crate::rng::derive_rng;
    use crate::state::max_abs_row_mean;
    use ndarray::array;

    fn t(v: f64) -> TimePoint<f64> {
        TimePoint::new(v).unwrap()
    }

    fn space_2x3() -> StateSpaceSpec {
        StateSpaceSpec::new(2, 3, 1, 2).unwrap()
    }

    fn completions_from(space: &StateSpaceSpec, rows: &[&[Symbol]]) -> Completions {
        let mut c = Completions::empty(space.n_sites);
        for row in rows {
            c.push_row(row);
        }
        c
    }

    #[test]
    fn uniform_weights_reduce_to_the_plain_average() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[0, 0], &[0, 1], &[1, 1], &[0, 1]]);
        let tp = t(0.5);
        let a_t = [space.mask_symbol, space.mask_symbol];
        let weighted =
            estimate_guided_rate(&space, &comps, &[3.0, 3.0, 3.0, 3.0], &a_t, tp).unwrap();
        let unweighted =
            estimate_guided_rate(&space, &comps, &[1.0, 1.0, 1.0, 1.0], &a_t, tp).unwrap();
        for (a, b) in weighted.rates().iter().zip(unweighted.rates().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        // Plain average: site 0 sees A three times out of four.
        assert!((unweighted.rate(0, 0) - 0.75 * 2.0).abs() < 1e-14);
        assert!((unweighted.rate(0, 1) - 0.25 * 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_completion_recovers_the_conditional_rate() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[1, 0]]);
        let tp = t(0.75);
        let a_t = [space.mask_symbol, 0];
        let est = estimate_guided_rate(&space, &comps, &[2.5], &a_t, tp).unwrap();
        for b in 0..space.alphabet_size as Symbol {
            let expected = conditional_rate(
                &space,
                ConditionalRateQuery {
                    current_symbol: space.mask_symbol,
                    target_symbol: b,
                    clean_symbol: 1,
                    t: tp,
                },
            )
            .unwrap();
            assert_eq!(est.rate(0, b), expected);
            // Unmasked site: all rates zero.
            assert_eq!(est.rate(1, b), 0.0);
        }
    }

    #[test]
    fn estimator_rejects_bad_inputs() {
        let space = space_2x3();
        let empty = Completions::empty(2);
        assert!(estimate_guided_rate(&space, &empty, &[], &[2, 2], t(0.5)).is_err());
        let comps = completions_from(&space, &[&[0, 0]]);
        assert!(estimate_guided_rate(&space, &comps, &[1.0], &[2, 2], t(1.0)).is_err());
        assert!(estimate_guided_rate(&space, &comps, &[0.0], &[2, 2], t(0.5)).is_err());
        assert!(estimate_guided_rate(&space, &comps, &[1.0, 2.0], &[2, 2], t(0.5)).is_err());
    }

    #[test]
    fn estimated_rates_never_exceed_the_conditional_bound() {
        let space = space_2x3();
        let mut rng = derive_rng(41, &[0]);
        for _ in 0..50 {
            let k = 1 + (f64::unit_uniform(&mut rng) * 16.0) as usize;
            let mut comps = Completions::empty(2);
            for _ in 0..k {
                let row = [
                    if f64::unit_uniform(&mut rng) < 0.5 { 0 } else { 1 },
                    if f64::unit_uniform(&mut rng) < 0.5 { 0 } else { 1 },
                ];
                comps.push_row(&row);
            }
            let weights: Vec<f64> = (0..k)
                .map(|_| 1e-6 + f64::unit_uniform(&mut rng))
                .collect();
            let tv = 0.9 * f64::unit_uniform(&mut rng);
            let est =
                estimate_guided_rate(&space, &comps, &weights, &[2, 2], t(tv)).unwrap();
            let bound = 1.0 / (1.0 - tv) + 1e-9;
            assert!(est.rates().iter().all(|&r| (0.0..=bound).contains(&r)));
        }
    }

    #[test]
    fn euler_step_identity_when_rates_vanish() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[0, 1]]);
        let est = estimate_guided_rate(&space, &comps, &[1.0], &[0, 1], t(0.5)).unwrap();
        let mut rng = derive_rng(42, &[0]);
        let next = ctmc_euler_step(&[0, 1], &est, 0.01, &mut rng);
        assert_eq!(next, vec![0, 1]);
    }

    #[test]
    fn euler_step_forces_jump_at_unit_mass() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[1, 0]]);
        let tp = t(0.5);
        let est =
            estimate_guided_rate(&space, &comps, &[1.0], &[space.mask_symbol, 0], tp).unwrap();
        // Rate toward symbol 1 is 2.0; dt = 0.5 makes the jump certain.
        let mut rng = derive_rng(43, &[0]);
        for _ in 0..200 {
            let next = ctmc_euler_step(&[space.mask_symbol, 0], &est, 0.5, &mut rng);
            assert_eq!(next, vec![1, 0]);
        }
    }

    #[test]
    fn euler_step_jump_frequency_matches_mass() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[1, 0]]);
        let tp = t(0.5);
        let est =
            estimate_guided_rate(&space, &comps, &[1.0], &[space.mask_symbol, 0], tp).unwrap();
        // Rate 2.0 toward symbol 1; dt = 0.15 gives jump probability 0.3.
        let mut rng = derive_rng(44, &[0]);
        let n = 100_000usize;
        let mut jumps = 0usize;
        let mut out = Vec::new();
        for _ in 0..n {
            ctmc_euler_step_into(&[space.mask_symbol, 0], &est, 0.15, &mut rng, &mut out);
            if out[0] == 1 {
                jumps += 1;
            }
        }
        let freq = jumps as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.01, "jump frequency {freq}");
    }

    #[test]
    fn forced_unmask_leaves_no_masks_and_follows_rates() {
        let space = space_2x3();
        let comps = completions_from(&space, &[&[0, 0], &[1, 0], &[1, 0], &[1, 0]]);
        let tp = t(0.99);
        let a_t = [space.mask_symbol, 0];
        let est = estimate_guided_rate(&space, &comps, &[1.0; 4], &a_t, tp).unwrap();
        let mut rng = derive_rng(45, &[0]);
        let mut out = Vec::new();
        let n = 40_000usize;
        let mut ones = 0usize;
        for _ in 0..n {
            ctmc_forced_unmask_into(&space, &a_t, &est, &mut rng, &mut out).unwrap();
            assert_ne!(out[0], space.mask_symbol);
            assert_eq!(out[1], 0);
            if out[0] == 1 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "forced target frequency {freq}");
    }

    #[test]
    fn weighted_selection_favors_dominant_weight() {
        let weights = [1e12, 1.0, 1.0, 1.0];
        let mut rng = derive_rng(46, &[0]);
        let mut hits = 0usize;
        for _ in 0..10_000 {
            if sample_weighted_index(&weights, &mut rng).unwrap() == 0 {
                hits += 1;
            }
        }
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn weighted_selection_is_uniform_for_equal_weights() {
        let weights = [1.0; 4];
        let mut rng = derive_rng(47, &[0]);
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_weighted_index(&weights, &mut rng).unwrap()] += 1;
        }
        // Chi-square with 3 degrees of freedom, alpha = 0.01.
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 11.345, "chi-square {chi2}");
    }

    #[test]
    fn weighted_selection_single_weight() {
        let mut rng = derive_rng(48, &[0]);
        assert_eq!(sample_weighted_index(&[5.0], &mut rng).unwrap(), 0);
    }

    fn single_component_oracle() -> GmOracle<f64> {
        let space = StateSpaceSpec::new(2, 2, 1, 1).unwrap();
        GmOracle::new(
            GaussianMixtureLabeledPrior::new(
                space,
                vec![GmComponent {
                    weight: 1.0,
                    mean: array![0.0],
                    std: 1.0,
                }],
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_strength_guidance_is_the_projection() {
        let oracle = single_component_oracle();
        let pred = EnergyTarget::new(vec![Property::SquaredRadius], vec![0.5], 1.0, 1.0).unwrap();
        let coords = array![[1.0, 3.0]];
        let out = continuous_guidance(
            &coords,
            &[1, 1],
            &[0, 0],
            &oracle,
            &pred,
            0.0,
            4,
            t(0.5),
        )
        .unwrap();
        assert_eq!(out, array![[-1.0, 1.0]]);
        let out =
            continuous_guidance(&coords, &[1, 1], &[0, 0], &oracle, &pred, 0.1, 0, t(0.5))
                .unwrap();
        assert_eq!(out, array![[-1.0, 1.0]]);
    }

    #[test]
    fn guidance_ascends_the_log_score() {
        // Single-component mixture with an energy target on the squared
        // radius: the composite log-score is concave enough near the start
        // that small steps must increase it monotonically.
        let oracle = single_component_oracle();
        let space = oracle.space();
        let pred = EnergyTarget::new(vec![Property::SquaredRadius], vec![2.0], 1.0, 1.0).unwrap();
        let tp = t(0.5);
        let a_t = vec![space.mask_symbol; 2];
        let a1 = vec![0 as Symbol, 0];
        let mut coords = project_to_simplex(&array![[0.3, -0.3]]).unwrap();
        let mut last = {
            let st = MultimodalState::new(space, coords.clone(), a_t.clone()).unwrap();
            let mean = oracle.predict_x1_mean(&st, tp).unwrap();
            pred.log_score(&mean, &a1).unwrap()
        };
        for _ in 0..20 {
            coords =
                continuous_guidance(&coords, &a_t, &a1, &oracle, &pred, 0.01, 1, tp).unwrap();
            let st = MultimodalState::new(space, coords.clone(), a_t.clone()).unwrap();
            let mean = oracle.predict_x1_mean(&st, tp).unwrap();
            let score = pred.log_score(&mean, &a1).unwrap();
            assert!(
                score > last - 1e-12,
                "log-score decreased: {last} -> {score}"
            );
            last = score;
        }
    }

    fn toy_tabular_oracle(seed: u64) -> (TabularOracle<f64>, TabularScore<f64>) {
        let space = StateSpaceSpec::new(2, 3, 1, 2).unwrap();
        let mut rng = derive_rng(seed, &[0]);
        let mut probs: Vec<f64> = (0..4).map(|_| 0.1 + f64::unit_uniform(&mut rng)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let prior = TabularDiscretePrior::new(space, probs).unwrap();
        let scores: Vec<f64> = (0..4).map(|_| 0.25 + 2.0 * f64::unit_uniform(&mut rng)).collect();
        (TabularOracle::new(prior), TabularScore::new(space, scores).unwrap())
    }

    #[test]
    fn sampler_is_deterministic_per_seed_and_trajectory() {
        let (oracle, pred) = toy_tabular_oracle(51);
        let config = GuidanceConfig::<f64> {
            k: 16,
            n_iter: 0,
            rho: 0.0,
            steps: 25,
            seed: 99,
            ..GuidanceConfig::default()
        };
        let a = run_guided_sampler(&oracle, &pred, &config, 7).unwrap();
        let b = run_guided_sampler(&oracle, &pred, &config, 7).unwrap();
        assert_eq!(a, b);
        let c = run_guided_sampler(&oracle, &pred, &config, 8).unwrap();
        assert_ne!(a.symbols(), c.symbols());

        // Parallel runner returns the same trajectories in index order.
        let batch = run_trajectories(&oracle, &pred, &config, 9).unwrap();
        assert_eq!(batch[7], a);
    }

    #[test]
    fn guided_sampler_with_unit_scores_reduces_to_the_unguided_path() {
        let (oracle, _) = toy_tabular_oracle(52);
        let unit = ConstantScore::<f64>::unit();
        let config = GuidanceConfig::<f64> {
            k: 32,
            n_iter: 4,
            rho: 0.0,
            steps: 20,
            seed: 5,
            ..GuidanceConfig::default()
        };
        for trajectory in 0..20 {
            let guided = run_guided_sampler(&oracle, &unit, &config, trajectory).unwrap();
            let unguided = run_unguided_sampler(&oracle, &config, trajectory).unwrap();
            assert_eq!(guided, unguided);
        }
    }

    #[test]
    fn sampler_keeps_coordinates_zero_mean_and_unmasks_everything() {
        let space = StateSpaceSpec::new(3, 3, 2, 2).unwrap();
        let prior = GaussianMixtureLabeledPrior::new(
            space,
            vec![
                GmComponent {
                    weight: 0.6,
                    mean: array![0.5, -0.5],
                    std: 0.7,
                },
                GmComponent {
                    weight: 0.4,
                    mean: array![-1.0, 1.0],
                    std: 0.4,
                },
            ],
        )
        .unwrap();
        let oracle = GmOracle::new(prior);
        let pred = EnergyTarget::new(vec![Property::SquaredRadius], vec![1.0], 1.0, 10.0).unwrap();
        let config = GuidanceConfig::<f64> {
            k: 32,
            n_iter: 2,
            rho: 0.02,
            steps: 30,
            seed: 17,
            ..GuidanceConfig::default()
        };
        let mut worst: f64 = 0.0;
        let mut observer = |_step: usize, state: &MultimodalState<f64>| {
            worst = worst.max(max_abs_row_mean(state.coords()));
        };
        let out =
            run_guided_sampler_observed(&oracle, &pred, &config, 0, None, &mut observer).unwrap();
        assert!(worst < 1e-10, "max |row mean| {worst}");
        assert!(out.is_fully_unmasked());
    }
}
