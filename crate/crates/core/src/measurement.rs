//! Measurement-system modeling on top of joint mixtures over a measurand `x`
//! and an observable `y`.
//!
//! A device is described by a forward curve `y = f(x) + w` with Gaussian noise
//! `w`. Simulated or recorded pairs are fitted by EM into a joint mixture; the
//! measurement result for a reading `y*` is the conditional `p(x | y*)`.

use std::fmt;
use std::sync::Arc;

use crate::algebra::condition;
use crate::error::{GmmError, Result};
use crate::fitting::{em_fit, select_model, Criterion, Dataset, EmConfig, FitReport};
use crate::gmm::{BlockIndex, GmmParams};
use crate::sampling::{GmmSampler, SeededStream};
use crate::stats::normal_cdf;

/// Number of grid points used by [`validation_norms`].
pub const VALIDATION_GRID: usize = 201;

/// Grid points farther than this many standard deviations from every
/// component's measurand marginal are flagged.
const SUPPORT_SIGMAS: f64 = 6.0;

type Curve = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar forward curve on a finite range with additive Gaussian noise.
#[derive(Clone)]
pub struct CurveSpec {
    f: Curve,
    lo: f64,
    hi: f64,
    noise_var: f64,
}

impl fmt::Debug for CurveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CurveSpec")
            .field("range", &(self.lo, self.hi))
            .field("noise_var", &self.noise_var)
            .finish_non_exhaustive()
    }
}

impl CurveSpec {
    pub fn new<F>(f: F, lo: f64, hi: f64, noise_var: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(GmmError::InvalidArgument(format!("invalid range [{lo}, {hi}]")));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(GmmError::InvalidArgument(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        Ok(Self {
            f: Arc::new(f),
            lo,
            hi,
            noise_var,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// `VALIDATION_GRID` equally spaced points covering the range.
    pub fn grid(&self) -> Vec<f64> {
        linspace(self.lo, self.hi, VALIDATION_GRID)
    }
}

/// `n` evenly spaced points from `lo` to `hi`, both ends exact.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + i as f64 * step })
        .collect()
}

/// Joint mixture over stacked `(x, y)` with its block split and fit
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub joint: GmmParams,
    /// X block = measurand dimensions, Y block = observable dimensions.
    pub blocks: BlockIndex,
    pub fit: FitReport,
}

/// Membership test for an arbitrary region.
pub type RegionPredicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Acceptable region for a quality-control probability.
#[derive(Clone)]
pub enum QualityRegion {
    /// Closed per-dimension intervals; infinite bounds are allowed.
    Rectangle { lo: Vec<f64>, hi: Vec<f64> },
    Predicate { dim: usize, inside: RegionPredicate },
}

impl fmt::Debug for QualityRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rectangle { lo, hi } => f.debug_struct("Rectangle").field("lo", lo).field("hi", hi).finish(),
            Self::Predicate { dim, .. } => f.debug_struct("Predicate").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

impl QualityRegion {
    pub fn rectangle(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        GmmError::check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(GmmError::InvalidArgument("empty rectangle".into()));
        }
        for (i, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if a.is_nan() || b.is_nan() || a > b {
                return Err(GmmError::InvalidArgument(format!(
                    "dimension {i}: bounds [{a}, {b}] are not ordered"
                )));
            }
        }
        Ok(Self::Rectangle { lo, hi })
    }

    /// The whole space in `dim` dimensions.
    pub fn everything(dim: usize) -> Self {
        Self::Rectangle {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    pub fn predicate<F>(dim: usize, inside: F) -> Self
    where
        F: Fn(&[f64]) -> bool + Send + Sync + 'static,
    {
        Self::Predicate {
            dim,
            inside: Arc::new(inside),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Rectangle { lo, .. } => lo.len(),
            Self::Predicate { dim, .. } => *dim,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Self::Rectangle { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b),
            Self::Predicate { inside, .. } => inside(x),
        }
    }
}

/// Draws `n` pairs with `x` uniform on the curve's range and
/// `y = f(x) + σ z`. Each pair consumes one uniform and one Box–Muller pair.
pub fn simulate_device(curve: &CurveSpec, n: usize, stream: &mut SeededStream) -> Result<Dataset> {
    if n == 0 {
        return Err(GmmError::InvalidArgument("n must be at least 1".into()));
    }
    let sigma = curve.noise_var.sqrt();
    let mut values = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x = stream.uniform_range(curve.lo, curve.hi);
        let z = stream.standard_normal();
        values.push(x);
        values.push(curve.eval(x) + sigma * z);
    }
    Dataset::new(2, values)
}

/// How [`fit_device`] chooses the number of components.
#[derive(Debug, Clone, PartialEq)]
pub enum KChoice {
    Fixed(usize),
    Select(Vec<usize>, Criterion),
}

/// Fits the joint mixture over `(x, y)` pairs. `template` supplies every EM
/// setting except `k`.
pub fn fit_device(data: &Dataset, choice: &KChoice, template: &EmConfig) -> Result<MeasurementModel> {
    if data.dim() != 2 {
        return Err(GmmError::DimensionMismatch {
            expected: 2,
            found: data.dim(),
        });
    }
    let fit = match choice {
        KChoice::Fixed(k) => em_fit(data, &template.with_k(*k))?,
        KChoice::Select(candidates, criterion) => {
            let sel = select_model(data, candidates, template)?;
            match sel.best_report(*criterion) {
                Some(r) => r.clone(),
                None => {
                    // Every candidate failed; surface the first failure.
                    let err = sel
                        .rows
                        .into_iter()
                        .find_map(|r| r.outcome.err())
                        .unwrap_or_else(|| GmmError::InvalidArgument("no candidate fitted".into()));
                    return Err(err);
                }
            }
        }
    };
    Ok(MeasurementModel {
        joint: fit.model.clone(),
        blocks: BlockIndex::new(vec![0], vec![1], 2)?,
        fit,
    })
}

/// `E(Y | X = x)` and `V(Y | X = x)` at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalPoint {
    pub x: f64,
    pub mean: f64,
    pub variance: f64,
    /// The point lies outside the fitted support; the moments may be
    /// meaningless (NaN when conditioning underflowed entirely).
    pub flagged: bool,
}

/// Observable moments given the measurand at each grid point, computed by
/// exact conditioning followed by moment matching. Scalar measurand and
/// observable only.
pub fn conditional_stats(model: &MeasurementModel, x_grid: &[f64]) -> Result<Vec<ConditionalPoint>> {
    let (xd, yd) = (model.blocks.x_dims(), model.blocks.y_dims());
    if xd.len() != 1 || yd.len() != 1 {
        return Err(GmmError::InvalidArgument(
            "conditional statistics need a scalar measurand and observable".into(),
        ));
    }
    let given_x = BlockIndex::new(yd.to_vec(), xd.to_vec(), model.joint.dim())?;
    let xi = xd[0];
    x_grid
        .iter()
        .map(|&x| {
            let far = model.joint.components().iter().all(|c| {
                let s = c.covariance()[(xi, xi)].sqrt();
                (x - c.mean()[xi]).abs() > SUPPORT_SIGMAS * s
            });
            match condition(&model.joint, &given_x, &[x]) {
                Ok(cond) => {
                    let m = cond.moments();
                    Ok(ConditionalPoint {
                        x,
                        mean: m.mean[0],
                        variance: m.covariance[(0, 0)],
                        flagged: far,
                    })
                }
                Err(GmmError::OutsideSupport) => Ok(ConditionalPoint {
                    x,
                    mean: f64::NAN,
                    variance: f64::NAN,
                    flagged: true,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Trapezoid-rule `L²` norms over the curve's range of `E(Y|X) − f` and of
/// `V(Y|X) − σ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationNorms {
    pub mean_error: f64,
    pub variance_error: f64,
}

pub fn validation_norms(model: &MeasurementModel, curve: &CurveSpec) -> Result<ValidationNorms> {
    let grid = curve.grid();
    let stats = conditional_stats(model, &grid)?;
    let e: Vec<f64> = stats.iter().map(|p| (p.mean - curve.eval(p.x)).powi(2)).collect();
    let v: Vec<f64> = stats
        .iter()
        .map(|p| (p.variance - curve.noise_var).powi(2))
        .collect();
    Ok(ValidationNorms {
        mean_error: trapezoid(&grid, &e).sqrt(),
        variance_error: trapezoid(&grid, &v).sqrt(),
    })
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// `p(x | y*)`: the measurand-side mixture given an observable reading.
pub fn posterior_from_observation(model: &MeasurementModel, y_star: &[f64]) -> Result<GmmParams> {
    condition(&model.joint, &model.blocks, y_star)
}

/// `n` products `x·y` of independent draws `x ~ gx`, `y ~ gy`, drawn
/// alternately from one stream.
pub fn product_samples(gx: &GmmParams, gy: &GmmParams, n: usize, stream: &mut SeededStream) -> Result<Vec<f64>> {
    for g in [gx, gy] {
        GmmError::check_dim(1, g.dim())?;
    }
    let sx = GmmSampler::new(gx);
    let sy = GmmSampler::new(gy);
    let (mut z, mut a, mut b) = ([0.0], [0.0], [0.0]);
    Ok((0..n)
        .map(|_| {
            sx.sample_into(stream, &mut z, &mut a);
            sy.sample_into(stream, &mut z, &mut b);
            a[0] * b[0]
        })
        .collect())
}

/// Result of [`propagate_product`]: the fit and the Monte Carlo sample it
/// was fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductReport {
    pub fit: FitReport,
    pub samples: Vec<f64>,
}

/// Fits a mixture to the product of two independent scalar mixtures by Monte
/// Carlo sampling followed by EM. `k` defaults to `K_X·K_Y`. The EM seed is
/// the next word of `stream` after sampling; a single run is made.
pub fn propagate_product(
    gx: &GmmParams,
    gy: &GmmParams,
    n_mc: usize,
    k: Option<usize>,
    stream: &mut SeededStream,
) -> Result<ProductReport> {
    let k = k.unwrap_or(gx.len() * gy.len());
    let mut cfg = EmConfig::new(k, 0);
    cfg.restarts = 0;
    propagate_product_with(gx, gy, n_mc, cfg, stream)
}

/// As [`propagate_product`] with explicit EM settings; `cfg.seed` is
/// replaced by a word drawn from `stream`.
pub fn propagate_product_with(
    gx: &GmmParams,
    gy: &GmmParams,
    n_mc: usize,
    mut cfg: EmConfig,
    stream: &mut SeededStream,
) -> Result<ProductReport> {
    if n_mc == 0 {
        return Err(GmmError::InvalidArgument("n_mc must be at least 1".into()));
    }
    let samples = product_samples(gx, gy, n_mc, stream)?;
    cfg.seed = stream.next_u64();
    let data = Dataset::univariate(samples)?;
    let fit = em_fit(&data, &cfg)?;
    Ok(ProductReport {
        fit,
        samples: data.values().to_vec(),
    })
}

/// Monte Carlo quality-control probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcEstimate {
    pub estimate: f64,
    /// Binomial standard error `√(p(1−p)/n)`.
    pub standard_error: f64,
    pub inside: u64,
    pub n: u64,
    /// Exact value for rectangles when every component has a diagonal
    /// covariance.
    pub closed_form: Option<f64>,
}

/// `P(x ∈ Q)` for `x ~ g`, estimated from `n_mc` composition draws.
pub fn qc_probability(g: &GmmParams, q: &QualityRegion, n_mc: usize, stream: &mut SeededStream) -> Result<QcEstimate> {
    GmmError::check_dim(g.dim(), q.dim())?;
    if n_mc == 0 {
        return Err(GmmError::InvalidArgument("n_mc must be at least 1".into()));
    }
    let d = g.dim();
    let sampler = GmmSampler::new(g);
    let (mut z, mut x) = (vec![0.0; d], vec![0.0; d]);
    let mut inside = 0u64;
    for _ in 0..n_mc {
        sampler.sample_into(stream, &mut z, &mut x);
        if q.contains(&x) {
            inside += 1;
        }
    }
    let n = n_mc as u64;
    let p = inside as f64 / n as f64;
    Ok(QcEstimate {
        estimate: p,
        standard_error: (p * (1.0 - p) / n as f64).sqrt(),
        inside,
        n,
        closed_form: rectangle_probability(g, q),
    })
}

/// `Σ_i π_i Π_j (Φ(b_j) − Φ(a_j))` in standardized coordinates, valid when
/// every covariance is diagonal.
pub fn rectangle_probability(g: &GmmParams, q: &QualityRegion) -> Option<f64> {
    let QualityRegion::Rectangle { lo, hi } = q else {
        return None;
    };
    let d = g.dim();
    let diagonal = g.components().iter().all(|c| {
        let s = c.covariance();
        (0..d).all(|i| (0..d).all(|j| i == j || s[(i, j)] == 0.0))
    });
    if !diagonal {
        return None;
    }
    let p = g
        .components()
        .iter()
        .map(|c| {
            c.weight()
                * (0..d)
                    .map(|j| {
                        let m = c.mean()[j];
                        let s = c.covariance()[(j, j)].sqrt();
                        (normal_cdf((hi[j] - m) / s) - normal_cdf((lo[j] - m) / s)).max(0.0)
                    })
                    .product::<f64>()
        })
        .sum::<f64>();
    Some(p.clamp(0.0, 1.0))
}
