//! Experiment implementations and their CSV artifacts.
//!
//! Every run writes `config.echo` (the resolved configuration) and
//! `run.meta` (seed, wall time, version) next to the experiment-specific
//! CSVs. All CSV bytes are a pure function of (config, seed): trajectories
//! and study cells are indexed, computed in parallel, and written by a
//! single writer in index order.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use rayon::prelude::*;

use flowguide_core::guidance::{run_guided_sampler, run_guided_sampler_from, GuidanceConfig};
use flowguide_core::models::{PosteriorModel, TabularDiscretePrior};
use flowguide_core::oracle::{
    estimator_convergence_study, exact_guided_target, fmt_float,
    importance_sampling_identity_check, log_log_slope, tv_distance,
};
use flowguide_core::predictors::{TabularScore, TargetPredictor};
use flowguide_core::rng::derive_rng;
use flowguide_core::scalar::Scalar;
use flowguide_core::state::{
    random_rotation, rotate_state, MultimodalState, Symbol,
};
use flowguide_core::Error as CoreError;

use crate::config::{ExperimentConfig, ExperimentKind, PredictorSpec, PriorSpec};

/// Mean absolute error of property values against a target.
pub fn mae_summary(values: &[f64], target: f64) -> f64 {
    assert!(!values.is_empty());
    values.iter().map(|v| (v - target).abs()).sum::<f64>() / values.len() as f64
}

pub fn run(config: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    write_file(out_dir, "config.echo", config.echo()?.as_bytes())?;

    let started = Instant::now();
    match config.experiment {
        ExperimentKind::DiscreteToy => discrete_toy(config, out_dir)?,
        ExperimentKind::MultimodalToy => multimodal_toy(config, out_dir)?,
        ExperimentKind::ConvergenceStudy => convergence_study(config, out_dir)?,
        ExperimentKind::EstimatorIdentity => estimator_identity(config, out_dir)?,
        ExperimentKind::EquivarianceCheck => equivariance_check(config, out_dir)?,
        ExperimentKind::AblationSweep => ablation_sweep(config, out_dir)?,
    }

    let meta = format!(
        "experiment = \"{}\"\nseed = {}\nthreads = {}\nwall_ms = {}\nversion = \"{}\"\n",
        config.experiment.name(),
        config.seed,
        threads,
        started.elapsed().as_millis(),
        env!("CARGO_PKG_VERSION"),
    );
    write_file(out_dir, "run.meta", meta.as_bytes())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn symbols_string(symbols: &[Symbol]) -> String {
    symbols
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

fn require_tabular<'a>(config: &'a ExperimentConfig) -> Result<&'a Vec<f64>> {
    match &config.prior {
        PriorSpec::Tabular { probs } => Ok(probs),
        PriorSpec::GaussianMixture { .. } => {
            bail!("this experiment needs a tabular prior (enumerable target)")
        }
    }
}

fn run_batch(
    model: &dyn PosteriorModel<f64>,
    predictor: &dyn TargetPredictor<f64>,
    guidance: &GuidanceConfig<f64>,
    count: usize,
) -> Result<Vec<MultimodalState<f64>>> {
    let states: std::result::Result<Vec<_>, CoreError> = (0..count)
        .into_par_iter()
        .map(|i| run_guided_sampler(model, predictor, guidance, i as u64))
        .collect();
    Ok(states?)
}

// Guided sampling on the tabular toy, reported against the enumerated
// guided target distribution.
fn discrete_toy(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let probs = require_tabular(config)?;
    let space = config.build_space()?;
    let prior = TabularDiscretePrior::new(space, probs.clone())?;
    let model = config.build_model()?;
    let predictor = config.build_predictor()?;
    let guidance = config.build_guidance();

    let samples = run_batch(model.as_ref(), predictor.as_ref(), &guidance, config.trajectories)?;
    let target = exact_guided_target(&prior, predictor.as_ref())?;

    let mut counts = vec![0u64; prior.support_size()];
    let mut sample_rows = String::from("trajectory,symbols,score\n");
    for (i, state) in samples.iter().enumerate() {
        counts[space.joint_index(state.symbols())?] += 1;
        let score = predictor.score(state.coords(), state.symbols())?;
        sample_rows.push_str(&format!(
            "{},{},{}\n",
            i,
            symbols_string(state.symbols()),
            fmt_float(score)
        ));
    }
    write_file(out_dir, "samples.csv", sample_rows.as_bytes())?;

    let mut dist = String::from("index,symbols,p_exact,p_empirical\n");
    let mut buf = vec![0 as Symbol; space.n_sites];
    let n = samples.len() as f64;
    for (code, &p) in target.iter().enumerate() {
        space.symbols_of_index(code, &mut buf)?;
        dist.push_str(&format!(
            "{},{},{},{}\n",
            code,
            symbols_string(&buf),
            fmt_float(p),
            fmt_float(counts[code] as f64 / n)
        ));
    }
    write_file(out_dir, "distribution.csv", dist.as_bytes())?;

    let report = tv_distance(&counts, &target)?;
    let tv_csv = format!(
        "support_size,sample_count,tv\n{},{},{}\n",
        report.support_size,
        report.sample_count,
        fmt_float(report.tv)
    );
    write_file(out_dir, "tv_report.csv", tv_csv.as_bytes())
}

// Guided sampling on a continuous+discrete toy, reported as per-property
// MAE and the in-support validity proxy.
fn multimodal_toy(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let space = config.build_space()?;
    let model = config.build_model()?;
    let predictor = config.build_predictor()?;
    let guidance = config.build_guidance();
    let energy_targets = config.predictor.energy_targets();
    let support = config.support_flags()?;

    let samples = run_batch(model.as_ref(), predictor.as_ref(), &guidance, config.trajectories)?;

    let mut header = String::from("trajectory,labels,score");
    for i in 0..energy_targets.len() {
        header.push_str(&format!(",property_{i}"));
    }
    header.push('\n');
    let mut rows = header;
    let mut property_values: Vec<Vec<f64>> = vec![Vec::new(); energy_targets.len()];
    let mut in_support = 0usize;
    for (i, state) in samples.iter().enumerate() {
        let score = predictor.score(state.coords(), state.symbols())?;
        if support[space.joint_index(state.symbols())?] {
            in_support += 1;
        }
        rows.push_str(&format!(
            "{},{},{}",
            i,
            symbols_string(state.symbols()),
            fmt_float(score)
        ));
        for (slot, (prop, _)) in energy_targets.iter().enumerate() {
            let value = prop.build().eval(state.coords(), state.symbols());
            property_values[slot].push(value);
            rows.push_str(&format!(",{}", fmt_float(value)));
        }
        rows.push('\n');
    }
    write_file(out_dir, "samples.csv", rows.as_bytes())?;

    let validity = in_support as f64 / samples.len() as f64;
    let mut mae_csv = String::from("property_index,target,samples,mae,validity_proxy\n");
    for (slot, (_, target)) in energy_targets.iter().enumerate() {
        mae_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            slot,
            fmt_float(*target),
            samples.len(),
            fmt_float(mae_summary(&property_values[slot], *target)),
            fmt_float(validity)
        ));
    }
    write_file(out_dir, "mae_summary.csv", mae_csv.as_bytes())
}

// Estimator error against the enumerated rate across (t, K) cells.
fn convergence_study(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let probs = require_tabular(config)?;
    let space = config.build_space()?;
    let prior = TabularDiscretePrior::new(space, probs.clone())?;
    let predictor = config.build_predictor()?;

    let study = estimator_convergence_study(
        &prior,
        predictor.as_ref(),
        &config.study.t_grid,
        &config.study.k_grid,
        config.study.trials,
        config.seed,
    )?;

    let mut raw = Vec::new();
    study.write_raw_csv(&mut raw)?;
    write_file(out_dir, "convergence_raw.csv", &raw)?;
    let mut summary = Vec::new();
    study.write_summary_csv(&mut summary)?;
    write_file(out_dir, "convergence_summary.csv", &summary)?;

    let mut slopes = String::from("t,slope\n");
    for &t in &config.study.t_grid {
        let medians = study.medians_at(t);
        let ks: Vec<f64> = medians.iter().map(|&(k, _)| k as f64).collect();
        let errs: Vec<f64> = medians.iter().map(|&(_, e)| e).collect();
        slopes.push_str(&format!("{},{}\n", fmt_float(t), fmt_float(log_log_slope(&ks, &errs))));
    }
    write_file(out_dir, "slopes.csv", slopes.as_bytes())
}

// Randomized instances of the two algebraically identical guided-rate
// forms; reports the max discrepancy per instance.
fn estimator_identity(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let space = config.build_space()?;
    let size = space.joint_size()?;
    let rows: std::result::Result<Vec<String>, CoreError> = (0..config.identity.instances)
        .into_par_iter()
        .map(|instance| {
            let mut rng = derive_rng(config.seed, &[instance as u64]);
            let mut probs: Vec<f64> = (0..size)
                .map(|_| 0.05 + f64::unit_uniform(&mut rng))
                .collect();
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            let prior = TabularDiscretePrior::new(space, probs)?;
            let scores: Vec<f64> = (0..size)
                .map(|_| 0.1 + 4.0 * f64::unit_uniform(&mut rng))
                .collect();
            let predictor = TabularScore::new(space, scores)?;
            let a_t: Vec<Symbol> = (0..space.n_sites)
                .map(|i| {
                    if i == 0 || f64::unit_uniform(&mut rng) < 0.5 {
                        space.mask_symbol
                    } else {
                        (f64::unit_uniform(&mut rng) * space.n_real_symbols() as f64) as Symbol
                    }
                })
                .collect();
            let t = flowguide_core::state::TimePoint::new(
                0.05 + 0.9 * f64::unit_uniform(&mut rng),
            )?;
            let gap = importance_sampling_identity_check(&prior, &predictor, &a_t, t)?;
            Ok(format!("{},{}\n", instance, fmt_float(gap)))
        })
        .collect();

    let mut csv = String::from("instance,max_discrepancy\n");
    for row in rows? {
        csv.push_str(&row);
    }
    write_file(out_dir, "identity.csv", csv.as_bytes())
}

// Matched-stream rotation test: the run started from rotated noise must
// land on the rotation of the baseline run.
fn equivariance_check(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    match &config.prior {
        PriorSpec::GaussianMixture { components } => {
            if components.iter().any(|c| c.mean.iter().any(|&m| m != 0.0)) {
                bail!("equivariance check needs a zero-centered mixture (equivariant model)");
            }
        }
        PriorSpec::Tabular { .. } => {
            bail!("equivariance check needs a gaussian-mixture prior")
        }
    }
    if !config.predictor.is_rotation_invariant() {
        bail!("equivariance check needs a rotation-invariant predictor");
    }
    let space = config.build_space()?;
    let model = config.build_model()?;
    let predictor = config.build_predictor()?;
    let guidance = config.build_guidance();

    let mut csv = String::from("rotation,max_abs_deviation,symbols_match\n");
    for rotation in 0..config.equivariance.rotations {
        let mut rng = derive_rng(config.seed, &[rotation as u64, 0xE0]);
        let x0 = Array2::from_shape_fn((space.cont_dim, space.n_sites), |_| {
            f64::standard_normal(&mut rng)
        });
        let rot = random_rotation::<f64, _>(space.cont_dim, &mut rng);
        let baseline = run_guided_sampler_from(
            model.as_ref(),
            predictor.as_ref(),
            &guidance,
            rotation as u64,
            x0.clone(),
        )?;
        let rotated = run_guided_sampler_from(
            model.as_ref(),
            predictor.as_ref(),
            &guidance,
            rotation as u64,
            rotate_state(&x0, &rot)?,
        )?;
        let expected = rotate_state(baseline.coords(), &rot)?;
        let deviation = rotated
            .coords()
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let symbols_match = rotated.symbols() == baseline.symbols();
        csv.push_str(&format!(
            "{},{},{}\n",
            rotation,
            fmt_float(deviation),
            symbols_match
        ));
    }
    write_file(out_dir, "equivariance.csv", csv.as_bytes())
}

// Strip per-predictor temperatures so the sweep's cell temperature wins.
fn clear_tau(spec: &PredictorSpec) -> PredictorSpec {
    match spec.clone() {
        PredictorSpec::Energy {
            properties,
            target,
            scale,
            ..
        } => PredictorSpec::Energy {
            properties,
            target,
            scale,
            tau: None,
        },
        PredictorSpec::TemperedClassifier {
            class_properties,
            class_index,
            ..
        } => PredictorSpec::TemperedClassifier {
            class_properties,
            class_index,
            tau: None,
        },
        PredictorSpec::Product { parts, weights } => PredictorSpec::Product {
            parts: parts.iter().map(clear_tau).collect(),
            weights,
        },
        other => other,
    }
}

// Grid sweep over (rho, tau): per-cell MAE on the first energy target and
// the in-support validity proxy. Trajectories that leave the prior's
// support mid-run (degenerate posterior) count as invalid samples.
fn ablation_sweep(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let space = config.build_space()?;
    let model = config.build_model()?;
    let base_predictor = clear_tau(&config.predictor);
    let energy_targets = config.predictor.energy_targets();
    let Some(&(ref mae_property, mae_target)) = energy_targets.first() else {
        bail!("ablation sweep needs an energy predictor (it reports MAE against its target)");
    };
    let mae_property = mae_property.build();
    let support = config.support_flags()?;

    let mut csv = String::from("rho,tau,n_samples,n_degenerate,mae,validity_proxy\n");
    for &rho in &config.sweep.rho_grid {
        for &tau in &config.sweep.tau_grid {
            let predictor = base_predictor.build(space, tau)?;
            let mut guidance = config.build_guidance();
            guidance.rho = rho;
            guidance.tau = tau;

            let outcomes: std::result::Result<Vec<Option<MultimodalState<f64>>>, CoreError> =
                (0..config.trajectories)
                    .into_par_iter()
                    .map(|i| {
                        match run_guided_sampler(
                            model.as_ref(),
                            predictor.as_ref(),
                            &guidance,
                            i as u64,
                        ) {
                            Ok(state) => Ok(Some(state)),
                            Err(CoreError::DegeneratePosterior) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect();
            let outcomes = outcomes?;

            let mut values = Vec::new();
            let mut in_support = 0usize;
            let mut degenerate = 0usize;
            for outcome in &outcomes {
                match outcome {
                    Some(state) => {
                        values.push(mae_property.eval(state.coords(), state.symbols()));
                        if support[space.joint_index(state.symbols())?] {
                            in_support += 1;
                        }
                    }
                    None => degenerate += 1,
                }
            }
            let mae = if values.is_empty() {
                f64::NAN
            } else {
                mae_summary(&values, mae_target)
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_float(rho),
                fmt_float(tau),
                values.len(),
                degenerate,
                fmt_float(mae),
                fmt_float(in_support as f64 / config.trajectories as f64)
            ));
        }
    }
    write_file(out_dir, "sweep.csv", csv.as_bytes())
}
