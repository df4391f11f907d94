//! Target predictors: strictly positive scores over clean states, with
//! analytic or finite-difference log-score gradients.
//!
//! Scores are floored at [`SCORE_FLOOR`] so the self-normalized estimator's
//! denominator can never vanish and the error bound's positive-infimum
//! assumption holds by construction. Below the floor the log-score is flat,
//! so its gradient is defined as zero there.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{StateSpaceSpec, Symbol};

/// Lower bound enforced on every score.
pub const SCORE_FLOOR: f64 = 1e-12;

/// Step scale for the finite-difference gradient fallback.
pub const FD_STEP: f64 = 1e-5;

/// A strictly positive, deterministic score over clean states, read as an
/// unnormalized likelihood of the guidance target.
pub trait TargetPredictor<T: Scalar>: Send + Sync {
    /// Score in `[SCORE_FLOOR, inf)`.
    fn score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T>;

    fn log_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        Ok(self.score(coords, symbols)?.ln())
    }

    /// Gradient of the log-score with respect to the coordinates. The
    /// default is a central finite difference of [`log_score`]
    /// (step `FD_STEP * (1 + |x|)` per component); implementations with
    /// analytic gradients override it.
    fn grad_x_log_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Array2<T>> {
        let floor = T::from_f64_c(SCORE_FLOOR);
        if self.score(coords, symbols)? <= floor {
            return Ok(Array2::zeros(coords.dim()));
        }
        let mut grad = Array2::zeros(coords.dim());
        let mut work = coords.clone();
        let two = T::from_f64_c(2.0);
        for idx in ndarray::indices(coords.dim()) {
            let x = coords[(idx.0, idx.1)];
            let h = T::from_f64_c(FD_STEP) * (T::one() + x.abs());
            work[(idx.0, idx.1)] = x + h;
            let plus = self.log_score(&work, symbols)?;
            work[(idx.0, idx.1)] = x - h;
            let minus = self.log_score(&work, symbols)?;
            work[(idx.0, idx.1)] = x;
            grad[(idx.0, idx.1)] = (plus - minus) / (two * h);
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// Property functions
// ---------------------------------------------------------------------------

/// Built-in scalar property functions, selectable by name in experiment
/// configurations. Vector-valued targets are lists of these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Property {
    /// Sum of every coordinate entry.
    CoordinateSum,
    /// Sum of squared site norms (rotation-invariant).
    SquaredRadius,
    /// Sum of pairwise site distances (rotation-invariant).
    PairwiseDistanceSum,
    /// Number of sites carrying a given symbol.
    SymbolCount { symbol: Symbol },
    /// Fraction of sites carrying a given component label.
    LabelFraction { symbol: Symbol },
}

impl Property {
    pub fn eval<T: Scalar>(&self, coords: &Array2<T>, symbols: &[Symbol]) -> T {
        match self {
            Property::CoordinateSum => coords.iter().copied().sum(),
            Property::SquaredRadius => coords.iter().map(|&x| x * x).sum(),
            Property::PairwiseDistanceSum => {
                let n = coords.ncols();
                let mut total = T::zero();
                for i in 0..n {
                    for j in i + 1..n {
                        let mut sq = T::zero();
                        for d in 0..coords.nrows() {
                            let diff = coords[[d, i]] - coords[[d, j]];
                            sq += diff * diff;
                        }
                        total += sq.sqrt();
                    }
                }
                total
            }
            Property::SymbolCount { symbol } => {
                T::from_usize(symbols.iter().filter(|&&s| s == *symbol).count()).unwrap()
            }
            Property::LabelFraction { symbol } => {
                let count = symbols.iter().filter(|&&s| s == *symbol).count();
                T::from_usize(count).unwrap() / T::from_usize(symbols.len().max(1)).unwrap()
            }
        }
    }

    /// Accumulate `weight * grad_X property` into `out`. Discrete-only
    /// properties contribute nothing.
    pub fn accumulate_grad<T: Scalar>(
        &self,
        coords: &Array2<T>,
        _symbols: &[Symbol],
        weight: T,
        out: &mut Array2<T>,
    ) {
        match self {
            Property::CoordinateSum => {
                out.mapv_inplace(|v| v + weight);
            }
            Property::SquaredRadius => {
                let two = T::from_f64_c(2.0);
                for (o, &x) in out.iter_mut().zip(coords.iter()) {
                    *o += two * weight * x;
                }
            }
            Property::PairwiseDistanceSum => {
                let n = coords.ncols();
                let d = coords.nrows();
                for i in 0..n {
                    for j in i + 1..n {
                        let mut sq = T::zero();
                        for r in 0..d {
                            let diff = coords[[r, i]] - coords[[r, j]];
                            sq += diff * diff;
                        }
                        let dist = sq.sqrt();
                        // Coincident sites: the distance is not
                        // differentiable there, use 0.
                        if dist <= T::from_f64_c(1e-300) {
                            continue;
                        }
                        for r in 0..d {
                            let g = weight * (coords[[r, i]] - coords[[r, j]]) / dist;
                            out[[r, i]] += g;
                            out[[r, j]] -= g;
                        }
                    }
                }
            }
            Property::SymbolCount { .. } | Property::LabelFraction { .. } => {}
        }
    }
}

fn check_finite<T: Scalar>(value: T, what: &str) -> Result<T> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::PredictorEvaluation(format!(
            "{what} evaluated to {value}"
        )))
    }
}

fn floor_score<T: Scalar>(raw: T) -> T {
    raw.max(T::from_f64_c(SCORE_FLOOR))
}

// ---------------------------------------------------------------------------
// Energy target
// ---------------------------------------------------------------------------

/// `exp(-scale * ||E(G) - c||^2 / tau)`: a Gaussian-shaped reward around a
/// target property vector, tempered by `tau`.
#[derive(Debug, Clone)]
pub struct EnergyTarget<T: Scalar> {
    properties: Vec<Property>,
    target: Vec<T>,
    scale: T,
    temperature: T,
}

impl<T: Scalar> EnergyTarget<T> {
    pub fn new(properties: Vec<Property>, target: Vec<T>, scale: T, temperature: T) -> Result<Self> {
        if properties.is_empty() || properties.len() != target.len() {
            return Err(Error::InvalidArgument(format!(
                "{} properties but {} target values",
                properties.len(),
                target.len()
            )));
        }
        if !(scale > T::zero()) || !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(
                "scale and temperature must be positive".into(),
            ));
        }
        Ok(Self {
            properties,
            target,
            scale,
            temperature,
        })
    }

    pub fn target(&self) -> &[T] {
        &self.target
    }

    pub fn properties(&self) -> &[Property] {
        &self.properties
    }

    fn residuals(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Vec<T>> {
        self.properties
            .iter()
            .zip(self.target.iter())
            .map(|(p, &c)| Ok(check_finite(p.eval(coords, symbols), "property")? - c))
            .collect()
    }

    fn raw_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        let sq: T = self.residuals(coords, symbols)?.iter().map(|&r| r * r).sum();
        Ok((-self.scale * sq / self.temperature).exp())
    }
}

impl<T: Scalar> TargetPredictor<T> for EnergyTarget<T> {
    fn score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        Ok(floor_score(self.raw_score(coords, symbols)?))
    }

    fn grad_x_log_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Array2<T>> {
        let mut grad = Array2::zeros(coords.dim());
        if self.raw_score(coords, symbols)? <= T::from_f64_c(SCORE_FLOOR) {
            return Ok(grad);
        }
        let residuals = self.residuals(coords, symbols)?;
        let two = T::from_f64_c(2.0);
        for (p, &r) in self.properties.iter().zip(residuals.iter()) {
            let w = -two * self.scale * r / self.temperature;
            p.accumulate_grad(coords, symbols, w, &mut grad);
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// Tempered classifier
// ---------------------------------------------------------------------------

/// Tempered softmax over per-class logit properties:
/// `softmax(logits / tau)[class_index]`.
#[derive(Debug, Clone)]
pub struct TemperedClassifier<T: Scalar> {
    class_logits: Vec<Property>,
    class_index: usize,
    temperature: T,
}

impl<T: Scalar> TemperedClassifier<T> {
    pub fn new(class_logits: Vec<Property>, class_index: usize, temperature: T) -> Result<Self> {
        if class_logits.len() < 2 {
            return Err(Error::InvalidArgument(
                "classifier needs at least two classes".into(),
            ));
        }
        if class_index >= class_logits.len() {
            return Err(Error::InvalidArgument(format!(
                "class index {class_index} out of range for {} classes",
                class_logits.len()
            )));
        }
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(Self {
            class_logits,
            class_index,
            temperature,
        })
    }

    fn probabilities(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Vec<T>> {
        let logits: Vec<T> = self
            .class_logits
            .iter()
            .map(|p| check_finite(p.eval(coords, symbols), "logit"))
            .collect::<Result<_>>()?;
        let max = logits
            .iter()
            .map(|&l| l / self.temperature)
            .fold(T::neg_infinity(), T::max);
        let mut probs: Vec<T> = logits
            .iter()
            .map(|&l| (l / self.temperature - max).exp())
            .collect();
        let total: T = probs.iter().copied().sum();
        for p in &mut probs {
            *p = *p / total;
        }
        Ok(probs)
    }
}

impl<T: Scalar> TargetPredictor<T> for TemperedClassifier<T> {
    fn score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        Ok(floor_score(
            self.probabilities(coords, symbols)?[self.class_index],
        ))
    }

    fn grad_x_log_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Array2<T>> {
        let probs = self.probabilities(coords, symbols)?;
        let mut grad = Array2::zeros(coords.dim());
        if probs[self.class_index] <= T::from_f64_c(SCORE_FLOOR) {
            return Ok(grad);
        }
        let inv_tau = T::one() / self.temperature;
        for (j, p) in self.class_logits.iter().enumerate() {
            let w = if j == self.class_index {
                inv_tau * (T::one() - probs[j])
            } else {
                -inv_tau * probs[j]
            };
            p.accumulate_grad(coords, symbols, w, &mut grad);
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// Combinators and table scores
// ---------------------------------------------------------------------------

/// Weighted geometric product of predictors: the product of exp-energies is
/// the exp of the weighted sum, so log-scores and gradients add.
pub struct WeightedProduct<T: Scalar> {
    parts: Vec<(Box<dyn TargetPredictor<T>>, T)>,
}

impl<T: Scalar> WeightedProduct<T> {
    pub fn new(parts: Vec<(Box<dyn TargetPredictor<T>>, T)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty predictor product".into()));
        }
        if parts.iter().any(|(_, w)| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite combinator weight".into()));
        }
        Ok(Self { parts })
    }

    /// Equal-weight product.
    pub fn equal(parts: Vec<Box<dyn TargetPredictor<T>>>) -> Result<Self> {
        let n = parts.len();
        let w = T::one() / T::from_usize(n.max(1)).unwrap();
        Self::new(parts.into_iter().map(|p| (p, w)).collect())
    }
}

impl<T: Scalar> TargetPredictor<T> for WeightedProduct<T> {
    fn score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        let mut log_total = T::zero();
        for (p, w) in &self.parts {
            log_total += *w * p.score(coords, symbols)?.ln();
        }
        Ok(floor_score(log_total.exp()))
    }

    fn grad_x_log_score(&self, coords: &Array2<T>, symbols: &[Symbol]) -> Result<Array2<T>> {
        let mut grad = Array2::zeros(coords.dim());
        for (p, w) in &self.parts {
            let g = p.grad_x_log_score(coords, symbols)?;
            grad = grad + g * *w;
        }
        Ok(grad)
    }
}

/// Constant score: the "no guidance" predictor.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScore<T: Scalar> {
    value: T,
}

impl<T: Scalar> ConstantScore<T> {
    pub fn new(value: T) -> Result<Self> {
        if !value.is_finite() || value < T::from_f64_c(SCORE_FLOOR) {
            return Err(Error::InvalidArgument(
                "constant score must be finite and at least the floor".into(),
            ));
        }
        Ok(Self { value })
    }

    pub fn unit() -> Self {
        Self { value: T::one() }
    }
}

impl<T: Scalar> TargetPredictor<T> for ConstantScore<T> {
    fn score(&self, _coords: &Array2<T>, _symbols: &[Symbol]) -> Result<T> {
        Ok(self.value)
    }

    fn grad_x_log_score(&self, coords: &Array2<T>, _symbols: &[Symbol]) -> Result<Array2<T>> {
        Ok(Array2::zeros(coords.dim()))
    }
}

/// Score table over the mask-free joint symbol space; coordinates are
/// ignored. The natural guidance signal for tabular toys.
#[derive(Debug, Clone)]
pub struct TabularScore<T: Scalar> {
    space: StateSpaceSpec,
    table: Vec<T>,
}

impl<T: Scalar> TabularScore<T> {
    pub fn new(space: StateSpaceSpec, table: Vec<T>) -> Result<Self> {
        let size = space.joint_size()?;
        if table.len() != size {
            return Err(Error::SchemaMismatch(format!(
                "score table has {} entries, joint space has {}",
                table.len(),
                size
            )));
        }
        if table.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidArgument(
                "scores must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { space, table })
    }

    pub fn table(&self) -> &[T] {
        &self.table
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }
}

impl<T: Scalar> TargetPredictor<T> for TabularScore<T> {
    fn score(&self, _coords: &Array2<T>, symbols: &[Symbol]) -> Result<T> {
        Ok(floor_score(self.table[self.space.joint_index(symbols)?]))
    }

    fn grad_x_log_score(&self, coords: &Array2<T>, _symbols: &[Symbol]) -> Result<Array2<T>> {
        Ok(Array2::zeros(coords.dim()))
    }
}
