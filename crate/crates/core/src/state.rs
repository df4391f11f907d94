//! Multimodal states, the state-space description, and the zero-mean
//! projection applied after every continuous update.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Discrete symbol index. The mask symbol is an ordinary index singled out
/// by [`StateSpaceSpec::mask_symbol`], so alphabet iteration includes it.
pub type Symbol = u16;

/// Absolute tolerance for checks on quantities that are exact arithmetic
/// (projection row means, linearity). Roughly 100x f64 epsilon at unit
/// magnitude; it only absorbs rounding.
pub const PROJECTION_TOL: f64 = 1e-12;

/// Tolerance for validating that a matrix is a rotation.
pub const ROTATION_TOL: f64 = 1e-9;

/// Largest joint discrete space any exact enumeration may touch.
pub const ENUMERATION_CAP: usize = 100_000;

/// Dimensions of the multimodal space: `n_sites` sites, each carrying a
/// point in `R^cont_dim` and a symbol from an alphabet that includes the
/// mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpaceSpec {
    pub n_sites: usize,
    pub alphabet_size: usize,
    pub cont_dim: usize,
    pub mask_symbol: Symbol,
}

impl StateSpaceSpec {
    pub fn new(
        n_sites: usize,
        alphabet_size: usize,
        cont_dim: usize,
        mask_symbol: Symbol,
    ) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::InvalidArgument("n_sites must be positive".into()));
        }
        if cont_dim == 0 {
            return Err(Error::InvalidArgument("cont_dim must be positive".into()));
        }
        if alphabet_size < 2 {
            return Err(Error::InvalidArgument(
                "alphabet_size must be at least 2 (one real symbol plus mask)".into(),
            ));
        }
        if alphabet_size > usize::from(Symbol::MAX) + 1 {
            return Err(Error::InvalidArgument(format!(
                "alphabet_size {alphabet_size} exceeds symbol storage"
            )));
        }
        if usize::from(mask_symbol) >= alphabet_size {
            return Err(Error::InvalidArgument(format!(
                "mask_symbol {mask_symbol} not below alphabet_size {alphabet_size}"
            )));
        }
        Ok(Self {
            n_sites,
            alphabet_size,
            cont_dim,
            mask_symbol,
        })
    }

    /// Number of non-mask symbols.
    pub fn n_real_symbols(&self) -> usize {
        self.alphabet_size - 1
    }

    /// Iterate the non-mask symbols in ascending order.
    pub fn real_symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        (0..self.alphabet_size as Symbol).filter(move |&s| s != self.mask_symbol)
    }

    /// Rank of a real symbol among the non-mask symbols (mask skipped).
    pub fn rank_of(&self, symbol: Symbol) -> Result<usize> {
        self.check_symbol(symbol)?;
        if symbol == self.mask_symbol {
            return Err(Error::InvalidArgument(
                "mask symbol has no rank among real symbols".into(),
            ));
        }
        Ok(if symbol < self.mask_symbol {
            usize::from(symbol)
        } else {
            usize::from(symbol) - 1
        })
    }

    /// Inverse of [`rank_of`](Self::rank_of).
    pub fn symbol_of_rank(&self, rank: usize) -> Result<Symbol> {
        if rank >= self.n_real_symbols() {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} out of range for {} real symbols",
                self.n_real_symbols()
            )));
        }
        let rank = rank as Symbol;
        Ok(if rank < self.mask_symbol { rank } else { rank + 1 })
    }

    pub fn check_symbol(&self, symbol: Symbol) -> Result<()> {
        if usize::from(symbol) >= self.alphabet_size {
            return Err(Error::InvalidArgument(format!(
                "symbol {symbol} outside alphabet of size {}",
                self.alphabet_size
            )));
        }
        Ok(())
    }

    /// Size of the mask-free joint space `(|A| - 1)^n`, capped at
    /// [`ENUMERATION_CAP`].
    pub fn joint_size(&self) -> Result<usize> {
        let base = self.n_real_symbols() as u128;
        let mut size: u128 = 1;
        for _ in 0..self.n_sites {
            size = size.saturating_mul(base);
            if size > ENUMERATION_CAP as u128 {
                return Err(Error::CapacityExceeded {
                    required: base.saturating_pow(self.n_sites as u32),
                    cap: ENUMERATION_CAP,
                });
            }
        }
        Ok(size as usize)
    }

    /// Mixed-radix code of a mask-free symbol vector; site 0 is the least
    /// significant digit.
    pub fn joint_index(&self, symbols: &[Symbol]) -> Result<usize> {
        if symbols.len() != self.n_sites {
            return Err(Error::InvalidState(format!(
                "symbol vector length {} != n_sites {}",
                symbols.len(),
                self.n_sites
            )));
        }
        let base = self.n_real_symbols();
        let mut code = 0usize;
        for (i, &s) in symbols.iter().enumerate() {
            if s == self.mask_symbol {
                return Err(Error::InvalidArgument(format!(
                    "site {i} is masked; joint index is defined on mask-free vectors"
                )));
            }
            code += self.rank_of(s)? * base.pow(i as u32);
        }
        Ok(code)
    }

    /// Decode a mixed-radix code into the provided buffer.
    pub fn symbols_of_index(&self, mut code: usize, out: &mut [Symbol]) -> Result<()> {
        if out.len() != self.n_sites {
            return Err(Error::InvalidState(format!(
                "output length {} != n_sites {}",
                out.len(),
                self.n_sites
            )));
        }
        let base = self.n_real_symbols();
        for slot in out.iter_mut() {
            *slot = self.symbol_of_rank(code % base)?;
            code /= base;
        }
        if code != 0 {
            return Err(Error::InvalidArgument(
                "joint code out of range for this space".into(),
            ));
        }
        Ok(())
    }
}

/// One multimodal state: a `cont_dim x n_sites` coordinate matrix (sites as
/// columns) and one symbol per site.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalState<T: Scalar> {
    space: StateSpaceSpec,
    coords: Array2<T>,
    symbols: Vec<Symbol>,
}

impl<T: Scalar> MultimodalState<T> {
    pub fn new(space: StateSpaceSpec, coords: Array2<T>, symbols: Vec<Symbol>) -> Result<Self> {
        if coords.dim() != (space.cont_dim, space.n_sites) {
            return Err(Error::InvalidState(format!(
                "coordinate shape {:?} != ({}, {})",
                coords.dim(),
                space.cont_dim,
                space.n_sites
            )));
        }
        if symbols.len() != space.n_sites {
            return Err(Error::InvalidState(format!(
                "symbol vector length {} != n_sites {}",
                symbols.len(),
                space.n_sites
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(
                "coordinate matrix contains a non-finite entry".into(),
            ));
        }
        for &s in &symbols {
            space.check_symbol(s)?;
        }
        Ok(Self {
            space,
            coords,
            symbols,
        })
    }

    /// All-mask state with the given coordinates (the sampler's t = 0 shape).
    pub fn masked(space: StateSpaceSpec, coords: Array2<T>) -> Result<Self> {
        let symbols = vec![space.mask_symbol; space.n_sites];
        Self::new(space, coords, symbols)
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    pub fn coords(&self) -> &Array2<T> {
        &self.coords
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn into_parts(self) -> (Array2<T>, Vec<Symbol>) {
        (self.coords, self.symbols)
    }

    pub fn is_fully_unmasked(&self) -> bool {
        self.symbols.iter().all(|&s| s != self.space.mask_symbol)
    }
}

/// Time parameter of the flow, constrained to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint<T: Scalar> {
    t: T,
}

impl<T: Scalar> TimePoint<T> {
    pub fn new(t: T) -> Result<Self> {
        if !t.is_finite() || t < T::zero() || t > T::one() {
            return Err(Error::InvalidArgument(format!(
                "time point {t} outside [0, 1]"
            )));
        }
        Ok(Self { t })
    }

    /// `w / total` on the uniform grid used by the samplers.
    pub fn of_step(step: usize, total: usize) -> Self {
        debug_assert!(step <= total && total > 0);
        let t = T::from_usize(step).unwrap() / T::from_usize(total).unwrap();
        Self { t }
    }

    pub fn value(self) -> T {
        self.t
    }

    /// `1 - t`, with a singularity error at `t >= 1` for operations that
    /// divide by it.
    pub fn remaining_before_one(self) -> Result<T> {
        let rem = T::one() - self.t;
        if rem <= T::zero() {
            return Err(Error::Singularity(self.t.to_f64_c()));
        }
        Ok(rem)
    }
}

/// Subtract the per-axis site mean: the zero-mean (translation-removing)
/// projection applied to every coordinate matrix the samplers touch.
pub fn project_to_simplex<T: Scalar>(coords: &Array2<T>) -> Result<Array2<T>> {
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(
            "cannot project a matrix with non-finite entries".into(),
        ));
    }
    let mut out = coords.clone();
    project_to_simplex_in_place(&mut out);
    Ok(out)
}

/// In-place variant for the sampler hot loop. Assumes finite input.
pub fn project_to_simplex_in_place<T: Scalar>(coords: &mut Array2<T>) {
    let n = T::from_usize(coords.ncols()).unwrap();
    for mut row in coords.rows_mut() {
        let mean = row.iter().copied().sum::<T>() / n;
        row.mapv_inplace(|v| v - mean);
    }
}

/// Apply a rotation `S` (orthogonal, det +1, validated to [`ROTATION_TOL`])
/// to every site: returns `S X`.
pub fn rotate_state<T: Scalar>(coords: &Array2<T>, rotation: &Array2<T>) -> Result<Array2<T>> {
    check_rotation(rotation)?;
    if rotation.ncols() != coords.nrows() {
        return Err(Error::InvalidArgument(format!(
            "rotation is {}x{} but coordinates have {} rows",
            rotation.nrows(),
            rotation.ncols(),
            coords.nrows()
        )));
    }
    Ok(rotation.dot(coords))
}

/// Validate orthogonality and unit positive determinant.
pub fn check_rotation<T: Scalar>(rotation: &Array2<T>) -> Result<()> {
    let (r, c) = rotation.dim();
    if r != c {
        return Err(Error::InvalidArgument(format!(
            "rotation must be square, got {r}x{c}"
        )));
    }
    let tol = T::from_f64_c(ROTATION_TOL);
    let gram = rotation.t().dot(rotation);
    for i in 0..r {
        for j in 0..r {
            let expected = if i == j { T::one() } else { T::zero() };
            if (gram[[i, j]] - expected).abs() > tol {
                return Err(Error::InvalidArgument(
                    "matrix is not orthogonal within tolerance".into(),
                ));
            }
        }
    }
    let det = determinant_lu(rotation);
    if (det - T::one()).abs() > tol {
        return Err(Error::InvalidArgument(format!(
            "matrix has determinant {det}, not +1"
        )));
    }
    Ok(())
}

/// Draw a uniformly random rotation by Gram-Schmidt on a Gaussian matrix,
/// flipping one column if needed to land in the det +1 component.
pub fn random_rotation<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array2<T> {
    loop {
        let gauss = Array2::from_shape_fn((dim, dim), |_| T::standard_normal(rng));
        if let Some(mut q) = gram_schmidt(&gauss) {
            let det: T = determinant_lu(&q);
            if det < T::zero() {
                for i in 0..dim {
                    q[[i, dim - 1]] = -q[[i, dim - 1]];
                }
            }
            return q;
        }
        // Degenerate draw (numerically dependent columns); redraw.
    }
}

fn gram_schmidt<T: Scalar>(matrix: &Array2<T>) -> Option<Array2<T>> {
    let dim = matrix.nrows();
    let mut q = matrix.clone();
    for j in 0..dim {
        for k in 0..j {
            let proj: T = (0..dim).map(|i| q[[i, j]] * q[[i, k]]).sum();
            for i in 0..dim {
                let adj = proj * q[[i, k]];
                q[[i, j]] = q[[i, j]] - adj;
            }
        }
        let norm: T = (0..dim).map(|i| q[[i, j]] * q[[i, j]]).sum::<T>().sqrt();
        if norm < T::from_f64_c(1e-8) {
            return None;
        }
        for i in 0..dim {
            q[[i, j]] = q[[i, j]] / norm;
        }
    }
    Some(q)
}

// Determinant via LU with partial pivoting; rotation checks only see small d.
fn determinant_lu<T: Scalar>(matrix: &Array2<T>) -> T {
    let n = matrix.nrows();
    let mut lu = matrix.clone();
    let mut det = T::one();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if lu[[row, col]].abs() > lu[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if lu[[pivot, col]] == T::zero() {
            return T::zero();
        }
        if pivot != col {
            for j in 0..n {
                let tmp = lu[[col, j]];
                lu[[col, j]] = lu[[pivot, j]];
                lu[[pivot, j]] = tmp;
            }
            det = -det;
        }
        det = det * lu[[col, col]];
        for row in col + 1..n {
            let factor = lu[[row, col]] / lu[[col, col]];
            for j in col..n {
                let adj = factor * lu[[col, j]];
                lu[[row, j]] = lu[[row, j]] - adj;
            }
        }
    }
    det
}

/// Largest absolute per-axis site mean; zero (to rounding) after projection.
pub fn max_abs_row_mean<T: Scalar>(coords: &Array2<T>) -> T {
    coords
        .mean_axis(Axis(1))
        .map(|means| {
            means
                .iter()
                .fold(T::zero(), |acc, &m| if m.abs() > acc { m.abs() } else { acc })
        })
        .unwrap_or_else(T::zero)
}

/// Convenience constructor for a column vector used in per-site operations.
pub fn column<T: Scalar>(values: &[T]) -> Array1<T> {
    Array1::from_vec(values.to_vec())
}
