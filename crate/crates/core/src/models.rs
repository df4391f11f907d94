//! Posterior ("denoiser") model interface and exact oracle implementations
//! on enumerable toy spaces.
//!
//! A posterior model answers two questions about the clean data given a
//! noisy state: the expectation of the clean coordinates, and joint samples
//! of the clean symbol vector. The oracles here compute both exactly by
//! Bayes' rule under the masking/rectified kernels, standing in for a
//! trained network; anything implementing [`PosteriorModel`] can be dropped
//! into the guided sampler.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{MultimodalState, StateSpaceSpec, Symbol, TimePoint};

/// Sum tolerance for probability tables.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A batch of K mask-free symbol vectors stored flat, row per completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completions {
    n_sites: usize,
    data: Vec<Symbol>,
}

impl Completions {
    pub fn empty(n_sites: usize) -> Self {
        Self {
            n_sites,
            data: Vec::new(),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Number of completions held.
    pub fn len(&self) -> usize {
        if self.n_sites == 0 {
            0
        } else {
            self.data.len() / self.n_sites
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[Symbol] {
        &self.data[k * self.n_sites..(k + 1) * self.n_sites]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Symbol]> {
        self.data.chunks_exact(self.n_sites)
    }

    pub fn push_row(&mut self, row: &[Symbol]) {
        debug_assert_eq!(row.len(), self.n_sites);
        self.data.extend_from_slice(row);
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    /// Reset to `count` rows of the given fill symbol, ready for in-place
    /// writing via [`row_mut`](Self::row_mut).
    pub fn reset(&mut self, count: usize, fill: Symbol) {
        self.data.clear();
        self.data.resize(count * self.n_sites, fill);
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Symbol] {
        &mut self.data[k * self.n_sites..(k + 1) * self.n_sites]
    }
}

/// The flow model seen by the guided sampler: expectation of the clean
/// coordinates and joint samples of the clean symbols, both conditioned on
/// the current noisy state.
pub trait PosteriorModel<T: Scalar>: Send + Sync {
    fn space(&self) -> StateSpaceSpec;

    /// `E[X1 | G_t]`, shape `cont_dim x n_sites`.
    fn predict_x1_mean(&self, state: &MultimodalState<T>, t: TimePoint<T>) -> Result<Array2<T>>;

    /// Draw `count` i.i.d. joint samples of the clean symbol vector into
    /// `out`. Samples contain no masks, and any unmasked site of the input
    /// keeps its symbol in every sample.
    fn sample_a1_into(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        count: usize,
        out: &mut Completions,
        rng: &mut dyn RngCore,
    ) -> Result<()>;

    fn sample_a1(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Completions> {
        let mut out = Completions::empty(self.space().n_sites);
        self.sample_a1_into(state, t, count, &mut out, rng)?;
        Ok(out)
    }

    /// Vector-Jacobian product of [`predict_x1_mean`](Self::predict_x1_mean)
    /// with respect to the coordinates. `Ok(None)` means the capability is
    /// absent and callers should fall back to finite differences.
    fn x1_mean_vjp(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        cotangent: &Array2<T>,
    ) -> Result<Option<Array2<T>>> {
        let _ = (state, t, cotangent);
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Tabular discrete prior
// ---------------------------------------------------------------------------

/// Explicit probability table over the mask-free joint symbol space, indexed
/// by the mixed-radix code of [`StateSpaceSpec::joint_index`].
#[derive(Debug, Clone)]
pub struct TabularDiscretePrior<T: Scalar> {
    space: StateSpaceSpec,
    probs: Vec<T>,
}

impl<T: Scalar> TabularDiscretePrior<T> {
    pub fn new(space: StateSpaceSpec, probs: Vec<T>) -> Result<Self> {
        let size = space.joint_size()?;
        if probs.len() != size {
            return Err(Error::SchemaMismatch(format!(
                "probability table has {} entries, joint space has {}",
                probs.len(),
                size
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::from_f64_c(PROB_SUM_TOL) {
            return Err(Error::InvalidArgument(format!(
                "probability table sums to {total}, not 1"
            )));
        }
        Ok(Self { space, probs })
    }

    /// Uniform table, handy as an uninformative toy prior.
    pub fn uniform(space: StateSpaceSpec) -> Result<Self> {
        let size = space.joint_size()?;
        let p = T::one() / T::from_usize(size).unwrap();
        Self::new(space, vec![p; size])
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob_at(&self, joint_index: usize) -> T {
        self.probs[joint_index]
    }

    pub fn prob_of(&self, symbols: &[Symbol]) -> Result<T> {
        Ok(self.probs[self.space.joint_index(symbols)?])
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

/// Normalized posterior over joint completions compatible with a partially
/// masked symbol vector.
#[derive(Debug, Clone)]
pub struct DiscretePosterior<T: Scalar> {
    support: Vec<usize>,
    probs: Vec<T>,
    cumulative: Vec<T>,
}

impl<T: Scalar> DiscretePosterior<T> {
    fn from_unnormalized(support: Vec<usize>, mut masses: Vec<T>) -> Result<Self> {
        let total: T = masses.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::DegeneratePosterior);
        }
        for m in &mut masses {
            *m = *m / total;
        }
        let mut cumulative = Vec::with_capacity(masses.len());
        let mut acc = T::zero();
        for &p in &masses {
            acc += p;
            cumulative.push(acc);
        }
        if let Some(last) = cumulative.last_mut() {
            *last = T::one();
        }
        Ok(Self {
            support,
            probs: masses,
            cumulative,
        })
    }

    /// Pairs of (joint index, posterior probability).
    pub fn entries(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    /// One inverse-CDF draw returning the joint index of a completion.
    pub fn sample_joint_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::unit_uniform(rng);
        let pos = self.cumulative.partition_point(|&c| c <= u);
        self.support[pos.min(self.support.len() - 1)]
    }
}

/// Exact Bayes under the masking kernel: the posterior over clean symbol
/// vectors given a partially masked `a_t` keeps exactly the completions
/// that agree on every unmasked site, reweighted by the prior. The masking
/// time factors are constant across compatible completions and cancel, so
/// `t` only needs to be in `[0, 1)`.
pub fn tabular_posterior<T: Scalar>(
    prior: &TabularDiscretePrior<T>,
    a_t: &[Symbol],
    t: TimePoint<T>,
) -> Result<DiscretePosterior<T>> {
    t.remaining_before_one()?;
    let space = prior.space();
    if a_t.len() != space.n_sites {
        return Err(Error::InvalidState(format!(
            "conditioning vector length {} != n_sites {}",
            a_t.len(),
            space.n_sites
        )));
    }
    for &s in a_t {
        space.check_symbol(s)?;
    }
    let mut support = Vec::new();
    let mut masses = Vec::new();
    let mut buf = vec![0 as Symbol; space.n_sites];
    for code in 0..prior.support_size() {
        space.symbols_of_index(code, &mut buf)?;
        let compatible = a_t
            .iter()
            .zip(buf.iter())
            .all(|(&at, &a1)| at == space.mask_symbol || at == a1);
        if compatible {
            let p = prior.prob_at(code);
            if p > T::zero() {
                support.push(code);
                masses.push(p);
            }
        }
    }
    DiscretePosterior::from_unnormalized(support, masses)
}

// ---------------------------------------------------------------------------
// Labeled Gaussian mixture prior
// ---------------------------------------------------------------------------

/// One mixture component: an isotropic Gaussian with a discrete label.
#[derive(Debug, Clone)]
pub struct GmComponent<T: Scalar> {
    pub weight: T,
    pub mean: Array1<T>,
    pub std: T,
}

/// Multimodal toy prior: each site independently carries a component label
/// (its symbol) and coordinates drawn from that component. The alphabet is
/// one symbol per component plus the mask.
#[derive(Debug, Clone)]
pub struct GaussianMixtureLabeledPrior<T: Scalar> {
    space: StateSpaceSpec,
    components: Vec<GmComponent<T>>,
}

impl<T: Scalar> GaussianMixtureLabeledPrior<T> {
    pub fn new(space: StateSpaceSpec, components: Vec<GmComponent<T>>) -> Result<Self> {
        if components.len() != space.n_real_symbols() {
            return Err(Error::SchemaMismatch(format!(
                "{} components but {} real symbols",
                components.len(),
                space.n_real_symbols()
            )));
        }
        let total: T = components.iter().map(|c| c.weight).sum();
        if (total - T::one()).abs() > T::from_f64_c(PROB_SUM_TOL) {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {total}, not 1"
            )));
        }
        for (k, c) in components.iter().enumerate() {
            if !(c.std > T::zero()) || !c.std.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "component {k} has non-positive std"
                )));
            }
            if c.weight < T::zero() || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "component {k} has invalid weight"
                )));
            }
            if c.mean.len() != space.cont_dim {
                return Err(Error::SchemaMismatch(format!(
                    "component {k} mean has dim {}, space has {}",
                    c.mean.len(),
                    space.cont_dim
                )));
            }
        }
        Ok(Self { space, components })
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    pub fn components(&self) -> &[GmComponent<T>] {
        &self.components
    }

    /// True when every component is centered at the origin, which makes the
    /// induced posterior model rotation-equivariant.
    pub fn is_zero_centered(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.mean.iter().all(|&m| m == T::zero()))
    }
}

/// Posterior component probabilities for one site. Hard evidence (an
/// unmasked label) gives a point mass; otherwise the noisy coordinates are
/// scored under each component's time-t marginal
/// `N(t mu_k, (t^2 sigma_k^2 + (1-t)^2) I)`.
pub fn gm_responsibilities<T: Scalar>(
    prior: &GaussianMixtureLabeledPrior<T>,
    x_t: ArrayView1<T>,
    a_t: Symbol,
    t: TimePoint<T>,
) -> Result<Vec<T>> {
    t.remaining_before_one()?;
    let space = prior.space();
    let k = prior.components.len();
    if x_t.len() != space.cont_dim {
        return Err(Error::InvalidState(format!(
            "site coordinates have dim {}, space has {}",
            x_t.len(),
            space.cont_dim
        )));
    }
    if a_t != space.mask_symbol {
        let rank = space.rank_of(a_t)?;
        let mut w = vec![T::zero(); k];
        w[rank] = T::one();
        return Ok(w);
    }
    let tv = t.value();
    let rem = T::one() - tv;
    let mut log_w = Vec::with_capacity(k);
    for c in &prior.components {
        let var = tv * tv * c.std * c.std + rem * rem;
        let mut sq = T::zero();
        for (i, &x) in x_t.iter().enumerate() {
            let diff = x - tv * c.mean[i];
            sq += diff * diff;
        }
        let d = T::from_usize(space.cont_dim).unwrap();
        let two = T::from_f64_c(2.0);
        let log_density = -d / two * (two * T::PI() * var).ln() - sq / (two * var);
        log_w.push(c.weight.ln() + log_density);
    }
    let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
    let mut w: Vec<T> = log_w.iter().map(|&lw| (lw - max).exp()).collect();
    let total: T = w.iter().copied().sum();
    for v in &mut w {
        *v = *v / total;
    }
    Ok(w)
}

/// Posterior mean of the clean coordinates for one site given its component
/// label: the precision-weighted combination of the component prior
/// `N(mu, sigma^2 I)` and the interpolant likelihood
/// `x_t | x1 ~ N(t x1, (1-t)^2 I)`.
pub fn gm_x1_mean<T: Scalar>(
    prior: &GaussianMixtureLabeledPrior<T>,
    x_t: ArrayView1<T>,
    a1: Symbol,
    t: TimePoint<T>,
) -> Result<Array1<T>> {
    let rem = t.remaining_before_one()?;
    let space = prior.space();
    let rank = space.rank_of(a1)?;
    let c = &prior.components[rank];
    let tv = t.value();
    let lik_precision = tv * tv / (rem * rem);
    let prior_precision = T::one() / (c.std * c.std);
    let denom = lik_precision + prior_precision;
    Ok(Array1::from_shape_fn(space.cont_dim, |i| {
        (tv * x_t[i] / (rem * rem) + c.mean[i] * prior_precision) / denom
    }))
}

// ---------------------------------------------------------------------------
// Oracle posterior models
// ---------------------------------------------------------------------------

/// Exact posterior model for a tabular discrete prior. The continuous part
/// of this toy is degenerate at the origin, so the coordinate prediction is
/// identically zero (which is its exact conditional expectation).
#[derive(Debug, Clone)]
pub struct TabularOracle<T: Scalar> {
    prior: TabularDiscretePrior<T>,
}

impl<T: Scalar> TabularOracle<T> {
    pub fn new(prior: TabularDiscretePrior<T>) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &TabularDiscretePrior<T> {
        &self.prior
    }
}

impl<T: Scalar> PosteriorModel<T> for TabularOracle<T> {
    fn space(&self) -> StateSpaceSpec {
        self.prior.space()
    }

    fn predict_x1_mean(&self, state: &MultimodalState<T>, t: TimePoint<T>) -> Result<Array2<T>> {
        t.remaining_before_one()?;
        let space = self.space();
        let _ = state;
        Ok(Array2::zeros((space.cont_dim, space.n_sites)))
    }

    fn sample_a1_into(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        count: usize,
        out: &mut Completions,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let space = self.space();
        let posterior = tabular_posterior(&self.prior, state.symbols(), t)?;
        out.reset(count, space.mask_symbol);
        for k in 0..count {
            let code = posterior.sample_joint_index(rng);
            space.symbols_of_index(code, out.row_mut(k))?;
        }
        Ok(())
    }

    fn x1_mean_vjp(
        &self,
        _state: &MultimodalState<T>,
        t: TimePoint<T>,
        cotangent: &Array2<T>,
    ) -> Result<Option<Array2<T>>> {
        t.remaining_before_one()?;
        // Constant prediction: the Jacobian is zero.
        Ok(Some(Array2::zeros(cotangent.dim())))
    }
}

/// Exact posterior model for the labeled Gaussian mixture prior. Sites are
/// independent, so predictions and samples factorize per site.
#[derive(Debug, Clone)]
pub struct GmOracle<T: Scalar> {
    prior: GaussianMixtureLabeledPrior<T>,
}

impl<T: Scalar> GmOracle<T> {
    pub fn new(prior: GaussianMixtureLabeledPrior<T>) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &GaussianMixtureLabeledPrior<T> {
        &self.prior
    }

    fn site_mean(
        &self,
        x_t: ArrayView1<T>,
        a_t: Symbol,
        t: TimePoint<T>,
        resp: &[T],
    ) -> Result<Array1<T>> {
        let space = self.prior.space();
        let mut mean = Array1::zeros(space.cont_dim);
        for (rank, &w) in resp.iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            let label = space.symbol_of_rank(rank)?;
            let m = gm_x1_mean(&self.prior, x_t, label, t)?;
            mean = mean + m * w;
        }
        let _ = a_t;
        Ok(mean)
    }
}

impl<T: Scalar> PosteriorModel<T> for GmOracle<T> {
    fn space(&self) -> StateSpaceSpec {
        self.prior.space()
    }

    fn predict_x1_mean(&self, state: &MultimodalState<T>, t: TimePoint<T>) -> Result<Array2<T>> {
        let space = self.space();
        let mut out = Array2::zeros((space.cont_dim, space.n_sites));
        for i in 0..space.n_sites {
            let col = state.coords().column(i);
            let resp = gm_responsibilities(&self.prior, col, state.symbols()[i], t)?;
            let mean = self.site_mean(col, state.symbols()[i], t, &resp)?;
            out.column_mut(i).assign(&mean);
        }
        Ok(out)
    }

    fn sample_a1_into(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        count: usize,
        out: &mut Completions,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let space = self.space();
        // Per-site cumulative responsibilities, computed once.
        let mut cumulative = Vec::with_capacity(space.n_sites);
        for i in 0..space.n_sites {
            let resp = gm_responsibilities(
                &self.prior,
                state.coords().column(i),
                state.symbols()[i],
                t,
            )?;
            let mut acc = T::zero();
            let mut cum: Vec<T> = resp
                .iter()
                .map(|&w| {
                    acc += w;
                    acc
                })
                .collect();
            if let Some(last) = cum.last_mut() {
                *last = T::one();
            }
            cumulative.push(cum);
        }
        out.reset(count, space.mask_symbol);
        for k in 0..count {
            let row = out.row_mut(k);
            for (i, slot) in row.iter_mut().enumerate() {
                if state.symbols()[i] != space.mask_symbol {
                    *slot = state.symbols()[i];
                } else {
                    let u = T::unit_uniform(rng);
                    let cum = &cumulative[i];
                    let pos = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
                    *slot = space.symbol_of_rank(pos)?;
                }
            }
        }
        Ok(())
    }

    fn x1_mean_vjp(
        &self,
        state: &MultimodalState<T>,
        t: TimePoint<T>,
        cotangent: &Array2<T>,
    ) -> Result<Option<Array2<T>>> {
        let rem = t.remaining_before_one()?;
        let space = self.space();
        if cotangent.dim() != (space.cont_dim, space.n_sites) {
            return Err(Error::InvalidState(format!(
                "cotangent shape {:?} != ({}, {})",
                cotangent.dim(),
                space.cont_dim,
                space.n_sites
            )));
        }
        let tv = t.value();
        let lik_precision = tv * tv / (rem * rem);
        let mut out = Array2::zeros((space.cont_dim, space.n_sites));
        for i in 0..space.n_sites {
            let x = state.coords().column(i);
            let u = cotangent.column(i);
            let a_t = state.symbols()[i];
            let resp = gm_responsibilities(&self.prior, x, a_t, t)?;

            // Mean-path term: each component's posterior mean depends on x
            // through the factor (t/(1-t)^2) / c_k.
            let mut diag = T::zero();
            for (rank, c) in self.prior.components.iter().enumerate() {
                let ck = lik_precision + T::one() / (c.std * c.std);
                diag += resp[rank] * (tv / (rem * rem)) / ck;
            }
            let mut col = Array1::from_shape_fn(space.cont_dim, |d| diag * u[d]);

            // Responsibility term: only present under soft evidence.
            if a_t == space.mask_symbol {
                // score_k = grad_x log N(x; t mu_k, s_k^2 I)
                let scores: Vec<Array1<T>> = self
                    .prior
                    .components
                    .iter()
                    .map(|c| {
                        let var = tv * tv * c.std * c.std + rem * rem;
                        Array1::from_shape_fn(space.cont_dim, |d| (tv * c.mean[d] - x[d]) / var)
                    })
                    .collect();
                let mut mean_score = Array1::zeros(space.cont_dim);
                for (rank, s) in scores.iter().enumerate() {
                    mean_score = mean_score + s * resp[rank];
                }
                for (rank, _) in self.prior.components.iter().enumerate() {
                    let label = space.symbol_of_rank(rank)?;
                    let m = gm_x1_mean(&self.prior, x, label, t)?;
                    let u_dot_m: T = (0..space.cont_dim).map(|d| u[d] * m[d]).sum();
                    for d in 0..space.cont_dim {
                        let g = resp[rank] * (scores[rank][d] - mean_score[d]);
                        col[d] += u_dot_m * g;
                    }
                }
            }
            out.column_mut(i).assign(&col);
        }
        Ok(Some(out))
    }
}
