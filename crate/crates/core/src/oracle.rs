//! Brute-force oracles and statistical metrics: exact guided rate matrices
//! and target distributions by full enumeration, the importance-sampling
//! identity check, total-variation distance, and the estimator convergence
//! study.
//!
//! Everything here is the O(|A|^n) computation the Monte Carlo estimator
//! exists to avoid; at desk scale the enumeration is cheap and serves as
//! ground truth.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::estimate_guided_rate;
use crate::kernels::sample_at_given_a1;
use crate::models::{tabular_posterior, Completions, TabularDiscretePrior};
use crate::predictors::TargetPredictor;
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::state::{Symbol, TimePoint};

/// Total-variation comparison between an empirical count table and an exact
/// probability table over the same support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TVReport {
    /// Half the L1 distance, in `[0, 1]`.
    pub tv: f64,
    pub sample_count: u64,
    pub support_size: usize,
}

/// `TV = 1/2 sum |empirical/N - exact|`, including support points with zero
/// empirical count.
pub fn tv_distance<T: Scalar>(counts: &[u64], exact: &[T]) -> Result<TVReport> {
    if counts.len() != exact.len() {
        return Err(Error::SchemaMismatch(format!(
            "count table has {} entries, probability table has {}",
            counts.len(),
            exact.len()
        )));
    }
    if counts.is_empty() {
        return Err(Error::SchemaMismatch("empty support".into()));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no samples counted".into()));
    }
    let n = total as f64;
    let l1: f64 = counts
        .iter()
        .zip(exact.iter())
        .map(|(&c, &p)| (c as f64 / n - p.to_f64_c()).abs())
        .sum();
    Ok(TVReport {
        tv: 0.5 * l1,
        sample_count: total,
        support_size: counts.len(),
    })
}

/// Exact guided rate matrix by enumeration: the expectation of the
/// conditional rate under the f-reweighted posterior over compatible
/// completions. Scores are evaluated at the tabular toy's coordinate
/// prediction (the zero matrix).
pub fn exact_guided_rate<T: Scalar, P>(
    prior: &TabularDiscretePrior<T>,
    predictor: &P,
    a_t: &[Symbol],
    t: TimePoint<T>,
) -> Result<Array2<T>>
where
    P: TargetPredictor<T> + ?Sized,
{
    let rem = t.remaining_before_one()?;
    let space = prior.space();
    let posterior = tabular_posterior(prior, a_t, t)?;
    let coords = Array2::zeros((space.cont_dim, space.n_sites));
    let mut buf = vec![0 as Symbol; space.n_sites];

    let mut numerators = Array2::zeros((space.n_sites, space.alphabet_size));
    let mut denominator = T::zero();
    for (code, p) in posterior.entries() {
        space.symbols_of_index(code, &mut buf)?;
        let f = predictor.score(&coords, &buf)?;
        let mass = p * f;
        denominator += mass;
        for (i, &a1) in buf.iter().enumerate() {
            if a_t[i] == space.mask_symbol {
                numerators[[i, usize::from(a1)]] += mass;
            }
        }
    }
    if denominator <= T::zero() {
        return Err(Error::DegeneratePosterior);
    }
    let scale = T::one() / (denominator * rem);
    numerators.mapv_inplace(|v| v * scale);
    Ok(numerators)
}

/// Exact guided target distribution: `p(a1 | c)` proportional to
/// `p_data(a1) * f_c(a1)` over the whole support. This is the distribution
/// the guided sampler must reproduce at t = 1.
pub fn exact_guided_target<T: Scalar, P>(
    prior: &TabularDiscretePrior<T>,
    predictor: &P,
) -> Result<Vec<T>>
where
    P: TargetPredictor<T> + ?Sized,
{
    let space = prior.space();
    let coords = Array2::zeros((space.cont_dim, space.n_sites));
    let mut buf = vec![0 as Symbol; space.n_sites];
    let mut table = Vec::with_capacity(prior.support_size());
    let mut total = T::zero();
    for code in 0..prior.support_size() {
        space.symbols_of_index(code, &mut buf)?;
        let mass = prior.prob_at(code) * predictor.score(&coords, &buf)?;
        total += mass;
        table.push(mass);
    }
    if total <= T::zero() {
        return Err(Error::DegeneratePosterior);
    }
    for v in &mut table {
        *v = *v / total;
    }
    Ok(table)
}

/// Compute the guided rate matrix two algebraically identical ways — the
/// ratio-of-expectations form and the importance-weighted form with the
/// normalizer `p(c | G_t)` enumerated separately — and return the largest
/// absolute discrepancy over all (site, symbol) entries.
pub fn importance_sampling_identity_check<T: Scalar, P>(
    prior: &TabularDiscretePrior<T>,
    predictor: &P,
    a_t: &[Symbol],
    t: TimePoint<T>,
) -> Result<T>
where
    P: TargetPredictor<T> + ?Sized,
{
    let rem = t.remaining_before_one()?;
    let space = prior.space();
    let ratio_form = exact_guided_rate(prior, predictor, a_t, t)?;

    let posterior = tabular_posterior(prior, a_t, t)?;
    let coords = Array2::zeros((space.cont_dim, space.n_sites));
    let mut buf = vec![0 as Symbol; space.n_sites];

    // p(c | G_t) = E_{p(a1|a_t)}[f_c(a1)], enumerated first.
    let mut normalizer = T::zero();
    for (code, p) in posterior.entries() {
        space.symbols_of_index(code, &mut buf)?;
        normalizer += p * predictor.score(&coords, &buf)?;
    }
    if normalizer <= T::zero() {
        return Err(Error::DegeneratePosterior);
    }

    // E[(f / p(c|G_t)) * R_cond] with the importance weight applied per
    // completion before summation.
    let mut is_form = Array2::zeros((space.n_sites, space.alphabet_size));
    for (code, p) in posterior.entries() {
        space.symbols_of_index(code, &mut buf)?;
        let weight = predictor.score(&coords, &buf)? / normalizer;
        for (i, &a1) in buf.iter().enumerate() {
            if a_t[i] == space.mask_symbol {
                is_form[[i, usize::from(a1)]] += p * weight / rem;
            }
        }
    }

    let mut max_abs = T::zero();
    for (a, b) in ratio_form.iter().zip(is_form.iter()) {
        let d = (*a - *b).abs();
        if d > max_abs {
            max_abs = d;
        }
    }
    Ok(max_abs)
}

/// One raw observation of the convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub t: f64,
    pub k: usize,
    pub trial: usize,
    pub sup_err: f64,
}

/// Median and quartiles of the sup-norm error for one (t, K) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceSummary {
    pub t: f64,
    pub k: usize,
    pub median_err: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Raw rows plus per-cell summaries of the estimator convergence study.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub summaries: Vec<ConvergenceSummary>,
}

impl ConvergenceStudy {
    /// `t,K,trial,sup_err` rows in deterministic order.
    pub fn write_raw_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,K,trial,sup_err")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_float(r.t),
                r.k,
                r.trial,
                fmt_float(r.sup_err)
            )?;
        }
        Ok(())
    }

    /// `t,K,median_err,q25,q75` rows in deterministic order.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,K,median_err,q25,q75")?;
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt_float(s.t),
                s.k,
                fmt_float(s.median_err),
                fmt_float(s.q25),
                fmt_float(s.q75)
            )?;
        }
        Ok(())
    }

    /// Median errors for one t, ordered like `k_grid`.
    pub fn medians_at(&self, t: f64) -> Vec<(usize, f64)> {
        self.summaries
            .iter()
            .filter(|s| s.t == t)
            .map(|s| (s.k, s.median_err))
            .collect()
    }
}

/// Full 17-significant-digit float formatting used by every CSV artifact.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// For each (t, K) cell, repeatedly: draw clean data from the prior, noise
/// it with the masking kernel at t, draw K genuine posterior completions,
/// run the self-normalized estimator, and record the sup-norm error against
/// the enumerated exact guided rate. Cells run in parallel under derived
/// seeds, so results are reproducible at any thread count.
pub fn estimator_convergence_study<T: Scalar, P>(
    prior: &TabularDiscretePrior<T>,
    predictor: &P,
    t_grid: &[T],
    k_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ConvergenceStudy>
where
    P: TargetPredictor<T> + Sync + ?Sized,
{
    if t_grid.is_empty() || k_grid.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument(
            "convergence study needs nonempty grids and at least one trial".into(),
        ));
    }
    let space = prior.space();
    let mut cells = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        for (ki, &k) in k_grid.iter().enumerate() {
            for trial in 0..trials {
                cells.push((ti, t, ki, k, trial));
            }
        }
    }

    let rows: Result<Vec<ConvergenceRow>> = cells
        .into_par_iter()
        .map(|(ti, t, ki, k, trial)| {
            let t = TimePoint::new(t)?;
            let mut rng = derive_rng(seed, &[ti as u64, ki as u64, trial as u64]);

            // Clean data, then its masked noising at time t. The estimator
            // only acts on masked sites, so redraw until one exists (at
            // large t most draws are already fully revealed); after enough
            // failures mask one site directly, which is itself a positive-
            // probability kernel outcome.
            let clean_code = sample_from_table(prior.probs(), &mut rng);
            let mut clean = vec![0 as Symbol; space.n_sites];
            space.symbols_of_index(clean_code, &mut clean)?;
            let mut a_t = vec![0 as Symbol; space.n_sites];
            for attempt in 0..64 {
                for (slot, &c) in a_t.iter_mut().zip(clean.iter()) {
                    *slot = sample_at_given_a1(&space, c, t, &mut rng)?;
                }
                if a_t.iter().any(|&s| s == space.mask_symbol) {
                    break;
                }
                if attempt == 63 {
                    let site = (T::unit_uniform(&mut rng).to_f64_c()
                        * space.n_sites as f64) as usize;
                    a_t[site.min(space.n_sites - 1)] = space.mask_symbol;
                }
            }

            // K genuine posterior draws, weighted by the predictor.
            let posterior = tabular_posterior(prior, &a_t, t)?;
            let coords = Array2::zeros((space.cont_dim, space.n_sites));
            let mut completions = Completions::empty(space.n_sites);
            completions.reset(k, space.mask_symbol);
            let mut weights = Vec::with_capacity(k);
            for idx in 0..k {
                let code = posterior.sample_joint_index(&mut rng);
                space.symbols_of_index(code, completions.row_mut(idx))?;
                weights.push(predictor.score(&coords, completions.row(idx))?);
            }
            let estimate = estimate_guided_rate(&space, &completions, &weights, &a_t, t)?;
            let exact = exact_guided_rate(prior, predictor, &a_t, t)?;

            let mut sup = 0.0f64;
            for (e, x) in estimate.rates().iter().zip(exact.iter()) {
                let d = (e.to_f64_c() - x.to_f64_c()).abs();
                if d > sup {
                    sup = d;
                }
            }
            Ok(ConvergenceRow {
                t: t.value().to_f64_c(),
                k,
                trial,
                sup_err: sup,
            })
        })
        .collect();
    let rows = rows?;

    let mut summaries = Vec::new();
    for &t in t_grid {
        let t = t.to_f64_c();
        for &k in k_grid {
            let mut errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.t == t && r.k == k)
                .map(|r| r.sup_err)
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            summaries.push(ConvergenceSummary {
                t,
                k,
                median_err: quantile(&errs, 0.5),
                q25: quantile(&errs, 0.25),
                q75: quantile(&errs, 0.75),
            });
        }
    }
    Ok(ConvergenceStudy { rows, summaries })
}

fn sample_from_table<T: Scalar, R: rand::Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = T::unit_uniform(rng);
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Linearly interpolated quantile of sorted values (same convention as
/// numpy's default).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(ly.iter()).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
