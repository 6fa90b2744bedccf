//! Mixture value types and the unary operations on them: validation,
//! density evaluation, moments, Gaussian fallback, affine maps and the
//! parameter count.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::numeric::{log_sum_exp, symmetrize, CholeskyFactor, CompensatedArray, CompensatedSum};

/// Relative Frobenius asymmetry tolerated before symmetrization.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Absolute tolerance on `Σ π_i = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// One weighted multivariate normal component.
///
/// The covariance is stored symmetrized together with its Cholesky factor,
/// so density evaluation never refactors.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.mean == other.mean && self.covariance == other.covariance
    }
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(GmmError::InvalidArgument("component dimension must be positive".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(GmmError::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(GmmError::InvalidParams(vec![Violation::NegativeWeight {
                index: 0,
                weight,
            }]));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidParams(vec![Violation::NonFinite { index: 0 }]));
        }
        if asymmetry(&covariance) > SYMMETRY_TOL {
            return Err(GmmError::InvalidParams(vec![Violation::Asymmetric { index: 0 }]));
        }
        let covariance = symmetrize(&covariance);
        let factor = CholeskyFactor::new(&covariance)?;
        Ok(Self {
            weight,
            mean,
            covariance,
            factor,
        })
    }

    /// Scalar convenience constructor: `N(mean, variance)` with the given weight.
    pub fn univariate(weight: f64, mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            weight,
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub(crate) fn with_weight(&self, weight: f64) -> Self {
        Self {
            weight,
            ..self.clone()
        }
    }

    /// `log N(x | m, Σ)` (the weight is not included).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim()];
        self.factor
            .log_normal_density(x, self.mean.as_slice(), &mut scratch)
    }
}

/// A problem found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoComponents,
    ZeroDimension,
    DimensionMismatch { index: usize, expected: usize, found: usize },
    NegativeWeight { index: usize, weight: f64 },
    NonFinite { index: usize },
    WeightSum { sum: f64 },
    Asymmetric { index: usize },
    NotPositiveDefinite { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoComponents => write!(f, "mixture has no components"),
            Violation::ZeroDimension => write!(f, "dimension must be positive"),
            Violation::DimensionMismatch {
                index,
                expected,
                found,
            } => write!(
                f,
                "component {index}: dimension {found} does not match {expected}"
            ),
            Violation::NegativeWeight { index, weight } => {
                write!(f, "component {index}: weight {weight} is negative")
            }
            Violation::NonFinite { index } => {
                write!(f, "component {index}: non-finite parameter")
            }
            Violation::WeightSum { sum } => write!(f, "weights sum to {sum}"),
            Violation::Asymmetric { index } => {
                write!(f, "component {index}: covariance not symmetric")
            }
            Violation::NotPositiveDefinite { index } => {
                write!(f, "component {index}: covariance not positive definite")
            }
        }
    }
}

/// Mixture parameters as read from an untrusted source, before any checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

/// Lists every invariant the raw parameters violate. An empty list means
/// [`GmmParams::from_raw`] will succeed.
pub fn validate(raw: &RawMixture) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = raw.weights.len();
    if k == 0 || raw.means.is_empty() {
        out.push(Violation::NoComponents);
        return out;
    }
    if raw.means.len() != k || raw.covariances.len() != k {
        out.push(Violation::DimensionMismatch {
            index: raw.means.len().min(raw.covariances.len()),
            expected: k,
            found: raw.means.len().min(raw.covariances.len()),
        });
        return out;
    }
    let d = raw.means[0].len();
    if d == 0 {
        out.push(Violation::ZeroDimension);
        return out;
    }
    for (i, (&w, (m, c))) in raw
        .weights
        .iter()
        .zip(raw.means.iter().zip(&raw.covariances))
        .enumerate()
    {
        if !w.is_finite() || m.iter().any(|v| !v.is_finite()) || c.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite { index: i });
            continue;
        }
        if w < 0.0 {
            out.push(Violation::NegativeWeight {
                index: i,
                weight: w,
            });
        }
        if m.len() != d {
            out.push(Violation::DimensionMismatch {
                index: i,
                expected: d,
                found: m.len(),
            });
            continue;
        }
        if c.nrows() != d || c.ncols() != d {
            out.push(Violation::DimensionMismatch {
                index: i,
                expected: d,
                found: c.nrows(),
            });
            continue;
        }
        if asymmetry(c) > SYMMETRY_TOL {
            out.push(Violation::Asymmetric { index: i });
            continue;
        }
        if CholeskyFactor::new(&symmetrize(c)).is_err() {
            out.push(Violation::NotPositiveDefinite { index: i });
        }
    }
    let sum: f64 = raw.weights.iter().sum();
    if sum.is_finite() && (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        out.push(Violation::WeightSum { sum });
    }
    out
}

/// A validated Gaussian mixture `g = (K, {π_i, m_i, Σ_i})`.
///
/// Construction drops zero-weight components, renormalizes weights whose sum
/// is within [`WEIGHT_SUM_TOL`] of one, and symmetrizes covariances. Values are
/// immutable; every operation returns a new mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    dim: usize,
    components: Vec<GaussianComponent>,
}

impl GmmParams {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let dim = match components.first() {
            Some(c) => c.dim(),
            None => return Err(GmmError::InvalidParams(vec![Violation::NoComponents])),
        };
        let mut violations = Vec::new();
        for (i, c) in components.iter().enumerate() {
            if c.dim() != dim {
                violations.push(Violation::DimensionMismatch {
                    index: i,
                    expected: dim,
                    found: c.dim(),
                });
            }
        }
        let sum = weight_sum(components.iter().map(|c| c.weight));
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            violations.push(Violation::WeightSum { sum });
        }
        if !violations.is_empty() {
            return Err(GmmError::InvalidParams(violations));
        }
        let mut components: Vec<_> = components.into_iter().filter(|c| c.weight > 0.0).collect();
        // Renormalize only when the sum is off by more than rounding noise, so
        // that construction is idempotent bit for bit.
        if (sum - 1.0).abs() > components.len() as f64 * f64::EPSILON {
            for c in &mut components {
                c.weight /= sum;
            }
        }
        Ok(Self { dim, components })
    }

    /// Builds a mixture from parts that have been combined internally and are
    /// known to be consistent; weights are normalized by their sum.
    pub(crate) fn from_unnormalized(components: Vec<GaussianComponent>) -> Result<Self> {
        let sum = weight_sum(components.iter().map(|c| c.weight));
        if !(sum > 0.0) {
            return Err(GmmError::ZeroWeight);
        }
        let comps = components
            .into_iter()
            .map(|c| {
                let w = c.weight / sum;
                c.with_weight(w)
            })
            .collect();
        Self::new(comps)
    }

    pub fn from_raw(raw: &RawMixture) -> Result<Self> {
        let violations = validate(raw);
        if !violations.is_empty() {
            return Err(GmmError::InvalidParams(violations));
        }
        let comps = raw
            .weights
            .iter()
            .zip(raw.means.iter().zip(&raw.covariances))
            .map(|(&w, (m, c))| GaussianComponent::new(w, m.clone(), c.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    /// A single Gaussian `N(mean, covariance)`.
    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, covariance)?])
    }

    /// One-dimensional mixture from `(weight, mean, variance)` triples.
    pub fn univariate(parts: &[(f64, f64, f64)]) -> Result<Self> {
        let comps = parts
            .iter()
            .map(|&(w, m, v)| GaussianComponent::univariate(w, m, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of components `K`.
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn to_raw(&self) -> RawMixture {
        RawMixture {
            weights: self.weights(),
            means: self.components.iter().map(|c| c.mean.clone()).collect(),
            covariances: self.components.iter().map(|c| c.covariance.clone()).collect(),
        }
    }

    /// Re-runs [`validate`] on this value's parameters.
    pub fn violations(&self) -> Vec<Violation> {
        validate(&self.to_raw())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        GmmError::check_dim(self.dim, x.len())
    }

    /// `Σ_i π_i N(x | m_i, Σ_i)`.
    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut scratch = vec![0.0; self.dim];
        let mut acc = CompensatedSum::new();
        for c in &self.components {
            let lp = c
                .factor
                .log_normal_density(x, c.mean.as_slice(), &mut scratch);
            acc.add(c.weight * lp.exp());
        }
        Ok(acc.value())
    }

    /// `log pdf(x)`, evaluated by log-sum-exp so that it stays finite far in
    /// the tails.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut scratch = vec![0.0; self.dim];
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                c.weight.ln()
                    + c.factor
                        .log_normal_density(x, c.mean.as_slice(), &mut scratch)
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Mixture CDF for one-dimensional mixtures.
    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        GmmError::check_dim(1, self.dim)?;
        let mut acc = CompensatedSum::new();
        for c in &self.components {
            let sd = c.covariance[(0, 0)].sqrt();
            acc.add(c.weight * crate::stats::normal_cdf((x - c.mean[0]) / sd));
        }
        Ok(acc.value().clamp(0.0, 1.0))
    }

    /// Mean and covariance of the mixture.
    pub fn moments(&self) -> MomentSummary {
        let d = self.dim;
        let mut mean_acc = CompensatedArray::zeros(d);
        for c in &self.components {
            mean_acc.add_scaled(c.weight, c.mean.as_slice());
        }
        let mean = DVector::from_vec(mean_acc.values());
        // Σ π_i (Σ_i + (m_i − m)(m_i − m)ᵀ) equals the textbook
        // Σ π_i (Σ_i + m_i m_iᵀ) − m mᵀ exactly when Σ π_i = 1, and avoids the
        // cancellation of the raw second moment.
        let mut cov_acc = CompensatedArray::zeros(d * d);
        for c in &self.components {
            let dm = &c.mean - &mean;
            let second = &c.covariance + &dm * dm.transpose();
            cov_acc.add_scaled(c.weight, second.as_slice());
        }
        let covariance = symmetrize(&DMatrix::from_vec(d, d, cov_acc.values()));
        MomentSummary { mean, covariance }
    }

    /// Single Gaussian with the mixture's mean and covariance.
    pub fn gaussian_fallback(&self) -> Result<GmmParams> {
        if self.len() == 1 {
            return GmmParams::gaussian(
                self.components[0].mean.clone(),
                self.components[0].covariance.clone(),
            );
        }
        let m = self.moments();
        GmmParams::gaussian(m.mean, m.covariance)
    }

    /// Pushes the mixture through `x ↦ A x + b`. `A` must have full row rank.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<GmmParams> {
        GmmError::check_dim(self.dim, a.ncols())?;
        let rows = a.nrows();
        GmmError::check_dim(rows, b.len())?;
        if rows == 0 {
            return Err(GmmError::InvalidArgument("transform has no rows".into()));
        }
        let rank = full_rank(a);
        if rank < rows {
            return Err(GmmError::RankDeficient { rank, rows });
        }
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mean = a * &c.mean + b;
                let cov = symmetrize(&(a * &c.covariance * a.transpose()));
                GaussianComponent::new(c.weight, mean, cov).map_err(|e| match e {
                    GmmError::NotPositiveDefinite => GmmError::RankDeficient { rank, rows },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GmmParams::new(comps)
    }

    /// `X ↦ −X`: means negated, weights and covariances unchanged.
    pub fn negate(&self) -> GmmParams {
        let components = self
            .components
            .iter()
            .map(|c| GaussianComponent {
                mean: -&c.mean,
                ..c.clone()
            })
            .collect();
        GmmParams {
            dim: self.dim,
            components,
        }
    }
}

fn weight_sum<I: IntoIterator<Item = f64>>(ws: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for w in ws {
        acc.add(w);
    }
    acc.value()
}

/// Numerical rank of `a` from its singular values.
fn full_rank(a: &DMatrix<f64>) -> usize {
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Mean vector and covariance matrix of a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Number of free floating-point parameters of a `K`-component mixture in
/// `d` dimensions: `K − 1` weights, `K d` mean entries and `K d (d+1)/2`
/// covariance entries.
pub fn param_count(k: usize, d: usize) -> usize {
    assert!(k >= 1 && d >= 1, "param_count needs K ≥ 1 and d ≥ 1");
    k - 1 + k * d + k * d * (d + 1) / 2
}

/// Which side of a [`BlockIndex`] an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    X,
    Y,
}

/// A partition of the dimensions `{0..d−1}` into an X block and a Y block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    x_dims: Vec<usize>,
    y_dims: Vec<usize>,
}

impl BlockIndex {
    pub fn new(x_dims: Vec<usize>, y_dims: Vec<usize>, dim: usize) -> Result<Self> {
        if x_dims.is_empty() || y_dims.is_empty() {
            return Err(GmmError::InvalidBlocks("both blocks must be nonempty".into()));
        }
        let mut seen = vec![false; dim];
        for &i in x_dims.iter().chain(&y_dims) {
            if i >= dim {
                return Err(GmmError::InvalidBlocks(format!(
                    "index {i} out of range for dimension {dim}"
                )));
            }
            if seen[i] {
                return Err(GmmError::InvalidBlocks(format!("index {i} appears twice")));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GmmError::InvalidBlocks(format!("index {missing} is not covered")));
        }
        Ok(Self { x_dims, y_dims })
    }

    /// X block as given; Y block is the complement in ascending order.
    pub fn with_x(x_dims: Vec<usize>, dim: usize) -> Result<Self> {
        let y: Vec<usize> = (0..dim).filter(|i| !x_dims.contains(i)).collect();
        Self::new(x_dims, y, dim)
    }

    pub fn x_dims(&self) -> &[usize] {
        &self.x_dims
    }

    pub fn y_dims(&self) -> &[usize] {
        &self.y_dims
    }

    pub fn dims(&self, block: Block) -> &[usize] {
        match block {
            Block::X => &self.x_dims,
            Block::Y => &self.y_dims,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_dims.len() + self.y_dims.len()
    }
}

pub(crate) fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}
