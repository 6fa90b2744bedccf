//! Closed-form binary and block operations on mixtures.
//!
//! Product-type operations (`convolve`, `fuse`) enumerate component pairs
//! row-major: the left operand's index is the outer loop.

use nalgebra::DMatrix;

use crate::error::{GmmError, Result};
use crate::gmm::{sub_matrix, sub_vector, Block, BlockIndex, GaussianComponent, GmmParams};
use crate::numeric::{
    log_sum_exp, symmetrize, CholeskyFactor, CompensatedSum, LN_2PI,
};

/// Evidence below this is treated as zero overlap.
pub const MIN_EVIDENCE: f64 = 1e-300;

/// Distribution of `X + Y` for independent `X ~ gx`, `Y ~ gy`.
pub fn convolve(gx: &GmmParams, gy: &GmmParams) -> Result<GmmParams> {
    GmmError::check_dim(gx.dim(), gy.dim())?;
    let mut comps = Vec::with_capacity(gx.len() * gy.len());
    for a in gx.components() {
        for b in gy.components() {
            comps.push(GaussianComponent::new(
                a.weight() * b.weight(),
                a.mean() + b.mean(),
                a.covariance() + b.covariance(),
            )?);
        }
    }
    GmmParams::new(comps)
}

/// Distribution of `−X`.
pub fn negate(g: &GmmParams) -> GmmParams {
    g.negate()
}

/// `log c_uv`, where `c_uv = ∫ N(x|m_u,Σ_u) N(x|m_v,Σ_v) dx = N(m_u | m_v, Σ_u+Σ_v)`.
pub fn log_overlap(u: &GaussianComponent, v: &GaussianComponent) -> Result<f64> {
    GmmError::check_dim(u.dim(), v.dim())?;
    let s = u.covariance() + v.covariance();
    let f = CholeskyFactor::new(&s)?;
    let mut scratch = vec![0.0; u.dim()];
    Ok(f.log_normal_density(u.mean().as_slice(), v.mean().as_slice(), &mut scratch))
}

/// Result of Bayesian fusion: normalized posterior and the evidence
/// `∫ G_a G_b dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub posterior: GmmParams,
    pub evidence: f64,
}

/// Multiplies two densities over the same quantity and normalizes.
pub fn fuse(ga: &GmmParams, gb: &GmmParams) -> Result<FusionResult> {
    GmmError::check_dim(ga.dim(), gb.dim())?;
    let mut parts = Vec::with_capacity(ga.len() * gb.len());
    let mut log_weights = Vec::with_capacity(ga.len() * gb.len());
    let mut scratch = vec![0.0; ga.dim()];
    for a in ga.components() {
        for b in gb.components() {
            let s = a.covariance() + b.covariance();
            let f = CholeskyFactor::new_guarded(&s)?;
            let log_c = f.log_normal_density(a.mean().as_slice(), b.mean().as_slice(), &mut scratch);
            // Σ_ab = Σ_a S⁻¹ Σ_b and m_ab = Σ_b S⁻¹ m_a + Σ_a S⁻¹ m_b with
            // S = Σ_a + Σ_b; algebraically the information-form expressions,
            // without inverting either covariance.
            let cov = symmetrize(&(a.covariance() * f.solve_matrix(b.covariance())));
            let mean = b.covariance() * f.solve(a.mean()) + a.covariance() * f.solve(b.mean());
            log_weights.push(a.weight().ln() + b.weight().ln() + log_c);
            parts.push((mean, cov));
        }
    }
    let log_evidence = log_sum_exp(&log_weights);
    let evidence = log_evidence.exp();
    if !(evidence >= MIN_EVIDENCE) {
        return Err(GmmError::DisjointSupport { evidence });
    }
    let comps = parts
        .into_iter()
        .zip(&log_weights)
        .map(|((m, c), lw)| GaussianComponent::new((lw - log_evidence).exp(), m, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionResult {
        posterior: GmmParams::from_unnormalized(comps)?,
        evidence,
    })
}

/// Probabilities with which each source is active.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceWeights {
    weights: Vec<f64>,
}

impl SourceWeights {
    /// Weights that already sum to one (within `1e-9`).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_shares(&weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > crate::gmm::WEIGHT_SUM_TOL {
            return Err(GmmError::InvalidArgument(format!(
                "source weights sum to {sum}"
            )));
        }
        Ok(Self { weights })
    }

    /// Normalizes raw shares, e.g. delivery percentages `r_A, r_B`, to
    /// `r_j / Σ r`.
    pub fn from_shares(shares: &[f64]) -> Result<Self> {
        check_shares(shares)?;
        let total: f64 = shares.iter().sum();
        if !(total > 0.0) {
            return Err(GmmError::InvalidArgument("source shares sum to zero".into()));
        }
        Ok(Self {
            weights: shares.iter().map(|s| s / total).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check_shares(shares: &[f64]) -> Result<()> {
    if shares.is_empty() {
        return Err(GmmError::InvalidArgument("no source shares".into()));
    }
    if let Some(s) = shares.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(GmmError::InvalidArgument(format!("invalid source share {s}")));
    }
    Ok(())
}

/// Pools sources: concatenates their components in source order with weights
/// scaled by the source weights.
pub fn mix(sources: &[GmmParams], shares: &SourceWeights) -> Result<GmmParams> {
    if sources.is_empty() {
        return Err(GmmError::InvalidArgument("no sources to mix".into()));
    }
    if sources.len() != shares.weights.len() {
        return Err(GmmError::InvalidArgument(format!(
            "{} sources but {} shares",
            sources.len(),
            shares.weights.len()
        )));
    }
    let dim = sources[0].dim();
    let mut comps = Vec::new();
    for (g, &w) in sources.iter().zip(&shares.weights) {
        GmmError::check_dim(dim, g.dim())?;
        for c in g.components() {
            comps.push(c.with_weight(w * c.weight()));
        }
    }
    GmmParams::new(comps)
}

fn check_blocks(g: &GmmParams, blocks: &BlockIndex) -> Result<()> {
    if blocks.dim() != g.dim() {
        return Err(GmmError::InvalidBlocks(format!(
            "blocks cover {} dimensions, mixture has {}",
            blocks.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// Marginal over the `keep` block: sub-blocks of each component, weights
/// unchanged.
pub fn marginalize(g: &GmmParams, blocks: &BlockIndex, keep: Block) -> Result<GmmParams> {
    check_blocks(g, blocks)?;
    let idx = blocks.dims(keep);
    let comps = g
        .components()
        .iter()
        .map(|c| {
            GaussianComponent::new(
                c.weight(),
                sub_vector(c.mean(), idx),
                sub_matrix(c.covariance(), idx, idx),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    GmmParams::new(comps)
}

/// Conditional of the X block given the Y block equals `observed`.
pub fn condition(g: &GmmParams, blocks: &BlockIndex, observed: &[f64]) -> Result<GmmParams> {
    check_blocks(g, blocks)?;
    let xi = blocks.x_dims();
    let yi = blocks.y_dims();
    GmmError::check_dim(yi.len(), observed.len())?;
    let mut scratch = vec![0.0; yi.len()];
    let mut log_weights = Vec::with_capacity(g.len());
    let mut parts = Vec::with_capacity(g.len());
    for c in g.components() {
        let mx = sub_vector(c.mean(), xi);
        let my = sub_vector(c.mean(), yi);
        let sxx = sub_matrix(c.covariance(), xi, xi);
        let sxy = sub_matrix(c.covariance(), xi, yi);
        let syy = sub_matrix(c.covariance(), yi, yi);
        let f = CholeskyFactor::new_guarded(&syy)?;
        let resid = nalgebra::DVector::from_iterator(
            yi.len(),
            observed.iter().zip(my.iter()).map(|(o, m)| o - m),
        );
        let mean = &mx + &sxy * f.solve(&resid);
        let gain_t = f.solve_matrix(&sxy.transpose());
        let cov = symmetrize(&(&sxx - &sxy * gain_t));
        let ll = f.log_normal_density(observed, my.as_slice(), &mut scratch);
        log_weights.push(c.weight().ln() + ll);
        parts.push((mean, cov));
    }
    let total = log_sum_exp(&log_weights);
    if !total.is_finite() {
        return Err(GmmError::OutsideSupport);
    }
    let comps = parts
        .into_iter()
        .zip(&log_weights)
        .map(|((m, c), lw)| GaussianComponent::new((lw - total).exp(), m, c))
        .collect::<Result<Vec<_>>>()?;
    GmmParams::from_unnormalized(comps)
}

/// `∫ G_a G_b dx = Σ_ij π_ai π_bj c_ij`.
pub fn inner_product(ga: &GmmParams, gb: &GmmParams) -> Result<f64> {
    GmmError::check_dim(ga.dim(), gb.dim())?;
    let mut acc = CompensatedSum::new();
    for a in ga.components() {
        for b in gb.components() {
            acc.add(a.weight() * b.weight() * log_overlap(a, b)?.exp());
        }
    }
    Ok(acc.value())
}

/// `‖G_a − G_b‖²_{L²}`, unclamped.
pub fn l2_distance_squared(ga: &GmmParams, gb: &GmmParams) -> Result<f64> {
    let aa = inner_product(ga, ga)?;
    let ab = inner_product(ga, gb)?;
    let bb = inner_product(gb, gb)?;
    Ok(aa - 2.0 * ab + bb)
}

/// Closed-form `L²` distance between two mixture densities.
pub fn l2_distance(ga: &GmmParams, gb: &GmmParams) -> Result<f64> {
    Ok(l2_distance_squared(ga, gb)?.max(0.0).sqrt())
}

/// `‖G‖_{L²}`.
pub fn l2_norm(g: &GmmParams) -> f64 {
    inner_product(g, g).expect("same dimension").sqrt()
}

/// `log N(x | m, Σ)` for a full covariance, without building a component.
pub fn log_gaussian(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let f = CholeskyFactor::new(cov)?;
    let d = mean.len();
    GmmError::check_dim(d, x.len())?;
    let mut scratch = vec![0.0; d];
    let q = f.mahalanobis_sq(
        &x.iter().zip(mean).map(|(a, b)| a - b).collect::<Vec<_>>(),
        &mut scratch,
    );
    Ok(-0.5 * (q + f.log_det() + d as f64 * LN_2PI))
}
