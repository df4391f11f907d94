//! Experiment configuration: TOML schema, resolution of defaults and
//! command-line overrides, and construction of the model/predictor pair.

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use flowguide_core::guidance::GuidanceConfig;
use flowguide_core::models::{
    GaussianMixtureLabeledPrior, GmComponent, GmOracle, PosteriorModel, TabularDiscretePrior,
    TabularOracle,
};
use flowguide_core::predictors::{
    ConstantScore, EnergyTarget, Property, TabularScore, TargetPredictor, WeightedProduct,
};
use flowguide_core::state::{StateSpaceSpec, Symbol};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DiscreteToy,
    MultimodalToy,
    ConvergenceStudy,
    EstimatorIdentity,
    EquivarianceCheck,
    AblationSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::DiscreteToy => "discrete-toy",
            Self::MultimodalToy => "multimodal-toy",
            Self::ConvergenceStudy => "convergence-study",
            Self::EstimatorIdentity => "estimator-identity",
            Self::EquivarianceCheck => "equivariance-check",
            Self::AblationSweep => "ablation-sweep",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "discrete-toy" => Ok(Self::DiscreteToy),
            "multimodal-toy" => Ok(Self::MultimodalToy),
            "convergence-study" => Ok(Self::ConvergenceStudy),
            "estimator-identity" => Ok(Self::EstimatorIdentity),
            "equivariance-check" => Ok(Self::EquivarianceCheck),
            "ablation-sweep" => Ok(Self::AblationSweep),
            other => bail!("unknown experiment {other:?}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub n_sites: usize,
    pub alphabet_size: usize,
    pub cont_dim: usize,
    pub mask_symbol: Symbol,
}

impl SpaceSpec {
    pub fn build(&self) -> Result<StateSpaceSpec> {
        Ok(StateSpaceSpec::new(
            self.n_sites,
            self.alphabet_size,
            self.cont_dim,
            self.mask_symbol,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    Tabular {
        probs: Vec<f64>,
    },
    GaussianMixture {
        components: Vec<ComponentSpec>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PropertySpec {
    CoordinateSum,
    SquaredRadius,
    PairwiseDistanceSum,
    SymbolCount { symbol: Symbol },
    LabelFraction { symbol: Symbol },
}

impl PropertySpec {
    pub fn build(&self) -> Property {
        match *self {
            PropertySpec::CoordinateSum => Property::CoordinateSum,
            PropertySpec::SquaredRadius => Property::SquaredRadius,
            PropertySpec::PairwiseDistanceSum => Property::PairwiseDistanceSum,
            PropertySpec::SymbolCount { symbol } => Property::SymbolCount { symbol },
            PropertySpec::LabelFraction { symbol } => Property::LabelFraction { symbol },
        }
    }

    pub fn is_rotation_invariant(&self) -> bool {
        !matches!(self, PropertySpec::CoordinateSum)
    }
}

fn default_scale() -> f64 {
    1.0
}

fn default_value() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PredictorSpec {
    /// exp(-scale * ||E(G) - target||^2 / tau).
    Energy {
        properties: Vec<PropertySpec>,
        target: Vec<f64>,
        #[serde(default = "default_scale")]
        scale: f64,
        /// Defaults to the guidance temperature.
        tau: Option<f64>,
    },
    /// softmax(logits / tau)[class_index].
    TemperedClassifier {
        class_properties: Vec<PropertySpec>,
        class_index: usize,
        tau: Option<f64>,
    },
    /// Score table over the mask-free joint symbol space.
    Table { table: Vec<f64> },
    /// Constant score: unguided sampling.
    Constant {
        #[serde(default = "default_value")]
        value: f64,
    },
    /// Weighted geometric product of predictors (equal weights when omitted).
    Product {
        parts: Vec<PredictorSpec>,
        weights: Option<Vec<f64>>,
    },
}

impl PredictorSpec {
    /// Build with the resolved temperature (predictor-level `tau` wins over
    /// the guidance-level one).
    pub fn build(
        &self,
        space: StateSpaceSpec,
        guidance_tau: f64,
    ) -> Result<Box<dyn TargetPredictor<f64>>> {
        Ok(match self {
            PredictorSpec::Energy {
                properties,
                target,
                scale,
                tau,
            } => Box::new(EnergyTarget::new(
                properties.iter().map(PropertySpec::build).collect(),
                target.clone(),
                *scale,
                tau.unwrap_or(guidance_tau),
            )?),
            PredictorSpec::TemperedClassifier {
                class_properties,
                class_index,
                tau,
            } => Box::new(TemperedClassifier::build(
                class_properties,
                *class_index,
                tau.unwrap_or(guidance_tau),
            )?),
            PredictorSpec::Table { table } => {
                Box::new(TabularScore::new(space, table.clone())?)
            }
            PredictorSpec::Constant { value } => Box::new(ConstantScore::new(*value)?),
            PredictorSpec::Product { parts, weights } => {
                let built: Vec<Box<dyn TargetPredictor<f64>>> = parts
                    .iter()
                    .map(|p| p.build(space, guidance_tau))
                    .collect::<Result<_>>()?;
                match weights {
                    None => Box::new(WeightedProduct::equal(built)?),
                    Some(ws) => {
                        if ws.len() != built.len() {
                            bail!("{} product parts but {} weights", built.len(), ws.len());
                        }
                        Box::new(WeightedProduct::new(
                            built.into_iter().zip(ws.iter().copied()).collect(),
                        )?)
                    }
                }
            }
        })
    }

    pub fn is_rotation_invariant(&self) -> bool {
        match self {
            PredictorSpec::Energy { properties, .. } => {
                properties.iter().all(PropertySpec::is_rotation_invariant)
            }
            PredictorSpec::TemperedClassifier {
                class_properties, ..
            } => class_properties.iter().all(PropertySpec::is_rotation_invariant),
            PredictorSpec::Table { .. } | PredictorSpec::Constant { .. } => true,
            PredictorSpec::Product { parts, .. } => {
                parts.iter().all(PredictorSpec::is_rotation_invariant)
            }
        }
    }

    /// Energy property/target pairs used for MAE summaries.
    pub fn energy_targets(&self) -> Vec<(PropertySpec, f64)> {
        match self {
            PredictorSpec::Energy {
                properties, target, ..
            } => properties
                .iter()
                .cloned()
                .zip(target.iter().copied())
                .collect(),
            PredictorSpec::Product { parts, .. } => {
                parts.iter().flat_map(PredictorSpec::energy_targets).collect()
            }
            _ => Vec::new(),
        }
    }
}

// Small shim so the classifier path reads like the others above.
struct TemperedClassifier;

impl TemperedClassifier {
    fn build(
        class_properties: &[PropertySpec],
        class_index: usize,
        tau: f64,
    ) -> Result<flowguide_core::predictors::TemperedClassifier<f64>> {
        Ok(flowguide_core::predictors::TemperedClassifier::new(
            class_properties.iter().map(PropertySpec::build).collect(),
            class_index,
            tau,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    #[serde(default = "GuidanceSpec::default_k")]
    pub k: usize,
    #[serde(default = "GuidanceSpec::default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "GuidanceSpec::default_rho")]
    pub rho: f64,
    #[serde(default = "GuidanceSpec::default_tau")]
    pub tau: f64,
    #[serde(default = "GuidanceSpec::default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub repredict_x1_per_completion: bool,
}

impl GuidanceSpec {
    fn default_k() -> usize {
        512
    }
    fn default_n_iter() -> usize {
        4
    }
    fn default_rho() -> f64 {
        0.02
    }
    fn default_tau() -> f64 {
        10.0
    }
    fn default_steps() -> usize {
        100
    }

    pub fn build(&self, seed: u64) -> GuidanceConfig<f64> {
        GuidanceConfig {
            k: self.k,
            n_iter: self.n_iter,
            rho: self.rho,
            tau: self.tau,
            steps: self.steps,
            seed,
            repredict_x1_per_completion: self.repredict_x1_per_completion,
        }
    }
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            k: Self::default_k(),
            n_iter: Self::default_n_iter(),
            rho: Self::default_rho(),
            tau: Self::default_tau(),
            steps: Self::default_steps(),
            repredict_x1_per_completion: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub t_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub trials: usize,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            t_grid: vec![0.25, 0.5, 0.75],
            k_grid: vec![4, 16, 64, 256, 1024],
            trials: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySpec {
    pub instances: usize,
}

impl Default for IdentitySpec {
    fn default() -> Self {
        Self { instances: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivarianceSpec {
    pub rotations: usize,
}

impl Default for EquivarianceSpec {
    fn default() -> Self {
        Self { rotations: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub rho_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            rho_grid: vec![0.01, 0.02, 0.04, 0.08],
            tau_grid: vec![10.0, 20.0, 40.0, 80.0],
        }
    }
}

/// The experiment configuration as written by the user and echoed back
/// after resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub space: SpaceSpec,
    pub prior: PriorSpec,
    pub predictor: PredictorSpec,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub study: StudySpec,
    #[serde(default)]
    pub identity: IdentitySpec,
    #[serde(default)]
    pub equivariance: EquivarianceSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_trajectories() -> usize {
    1000
}

fn default_output_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).context("could not parse configuration")?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads {})",
                config.schema_version,
                SCHEMA_VERSION
            );
        }
        if config.trajectories == 0 {
            bail!("trajectories must be positive");
        }
        Ok(config)
    }

    /// Serialized form written to `config.echo`; re-running on the echo
    /// reproduces the run.
    pub fn echo(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn build_space(&self) -> Result<StateSpaceSpec> {
        self.space.build()
    }

    /// Instantiate the posterior model for this prior.
    pub fn build_model(&self) -> Result<Box<dyn PosteriorModel<f64>>> {
        let space = self.build_space()?;
        Ok(match &self.prior {
            PriorSpec::Tabular { probs } => Box::new(TabularOracle::new(
                TabularDiscretePrior::new(space, probs.clone())?,
            )),
            PriorSpec::GaussianMixture { components } => {
                let comps = components
                    .iter()
                    .map(|c| GmComponent {
                        weight: c.weight,
                        mean: Array1::from_vec(c.mean.clone()),
                        std: c.std,
                    })
                    .collect();
                Box::new(GmOracle::new(GaussianMixtureLabeledPrior::new(space, comps)?))
            }
        })
    }

    pub fn build_predictor(&self) -> Result<Box<dyn TargetPredictor<f64>>> {
        self.predictor.build(self.build_space()?, self.guidance.tau)
    }

    pub fn build_guidance(&self) -> GuidanceConfig<f64> {
        self.guidance.build(self.seed)
    }

    /// Per-joint-code support flags for the validity proxy: a sample counts
    /// as valid when its symbol vector has positive prior probability.
    pub fn support_flags(&self) -> Result<Vec<bool>> {
        let space = self.build_space()?;
        let size = space.joint_size()?;
        Ok(match &self.prior {
            PriorSpec::Tabular { probs } => probs.iter().map(|&p| p > 0.0).collect(),
            PriorSpec::GaussianMixture { .. } => vec![true; size],
        })
    }
}
