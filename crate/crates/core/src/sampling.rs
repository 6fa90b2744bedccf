//! Seeded sampling: xoshiro256** uniforms, Box–Muller normals, Cholesky
//! colouring and composition sampling from mixtures.
//!
//! All randomness flows through [`SeededStream`]. The generator is
//! xoshiro256** seeded through SplitMix64 (`Xoshiro256StarStar::seed_from_u64`),
//! so a seed pins the exact output sequence on every platform.

use nalgebra::{DMatrix, DVector};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{GmmError, Result};
use crate::gmm::GmmParams;
use crate::numeric::CholeskyFactor;

/// A single-owner stream of uniforms with a draw counter.
#[derive(Debug, Clone)]
pub struct SeededStream {
    seed: u64,
    position: u64,
    rng: Xoshiro256StarStar,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream number `index`: the generator for `seed`
    /// advanced by `index + 1` jumps of 2^128 draws. Sub-streams never overlap
    /// each other or the parent stream's first 2^128 draws.
    pub fn split(seed: u64, index: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        for _ in 0..=index {
            rng.jump();
        }
        Self {
            seed,
            position: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1)`: an exact zero is replaced by the smallest
    /// positive normal double.
    pub fn uniform_open(&mut self) -> f64 {
        let u = self.uniform();
        if u == 0.0 {
            f64::MIN_POSITIVE
        } else {
            u
        }
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// A pair of independent standard normals; consumes two uniforms.
    pub fn box_muller(&mut self) -> (f64, f64) {
        let u = self.uniform_open();
        let v = self.uniform();
        box_muller_transform(u, v)
    }

    /// One standard normal (the second Box–Muller output is discarded).
    pub fn standard_normal(&mut self) -> f64 {
        self.box_muller().0
    }
}

/// `(R cos Θ, R sin Θ)` with `R = √(−2 ln u)` and `Θ = 2π v`.
pub fn box_muller_transform(u: f64, v: f64) -> (f64, f64) {
    let r = (-2.0 * u.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * v;
    (r * theta.cos(), r * theta.sin())
}

/// Fills `z` with standard normals, two per Box–Muller call; for odd length
/// the spare is dropped.
pub fn fill_standard_normal(stream: &mut SeededStream, z: &mut [f64]) {
    let mut chunks = z.chunks_mut(2);
    for c in &mut chunks {
        let (a, b) = stream.box_muller();
        c[0] = a;
        if c.len() > 1 {
            c[1] = b;
        }
    }
}

/// Draws from `N(mean, cov)` as `mean + L z` with `L Lᵀ = cov`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: CholeskyFactor,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        GmmError::check_dim(mean.len(), covariance.nrows())?;
        Ok(Self {
            factor: CholeskyFactor::new(covariance)?,
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out`, using `z` (same length) as scratch.
    pub fn sample_into(&self, stream: &mut SeededStream, z: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        fill_standard_normal(stream, &mut z[..d]);
        let l = self.factor.lower();
        for i in 0..d {
            let mut s = self.mean[i];
            for k in 0..=i {
                s += l[(i, k)] * z[k];
            }
            out[i] = s;
        }
    }

    pub fn sample(&self, stream: &mut SeededStream) -> DVector<f64> {
        let d = self.dim();
        let mut z = vec![0.0; d];
        let mut out = vec![0.0; d];
        self.sample_into(stream, &mut z, &mut out);
        DVector::from_vec(out)
    }
}

pub fn sample_gaussian(
    stream: &mut SeededStream,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Ok(GaussianSampler::new(mean.clone(), covariance)?.sample(stream))
}

/// Draws with their component labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Values of coordinate `axis` for every draw.
    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.points().map(|p| p[axis]).collect()
    }
}

/// Cumulative-weight inversion. `u` exactly on an edge selects the higher
/// index; rounding shortfall in the last edge falls to the last component.
pub fn select_component(cumulative: &[f64], u: f64) -> usize {
    let k = cumulative.partition_point(|&c| c <= u);
    k.min(cumulative.len() - 1)
}

/// Composition sampler for a mixture.
#[derive(Debug, Clone)]
pub struct GmmSampler {
    cumulative: Vec<f64>,
    components: Vec<GaussianSampler>,
    dim: usize,
}

impl GmmSampler {
    pub fn new(g: &GmmParams) -> Self {
        let mut acc = 0.0;
        let cumulative = g
            .components()
            .iter()
            .map(|c| {
                acc += c.weight();
                acc
            })
            .collect();
        let components = g
            .components()
            .iter()
            .map(|c| GaussianSampler {
                mean: c.mean().clone(),
                factor: c.factor().clone(),
            })
            .collect();
        Self {
            cumulative,
            components,
            dim: g.dim(),
        }
    }

    /// One draw into `out`; returns the chosen component.
    pub fn sample_into(&self, stream: &mut SeededStream, z: &mut [f64], out: &mut [f64]) -> usize {
        let u = stream.uniform();
        let k = select_component(&self.cumulative, u);
        self.components[k].sample_into(stream, z, out);
        k
    }

    pub fn sample(&self, stream: &mut SeededStream, n: usize) -> SampleBatch {
        let d = self.dim;
        let mut values = vec![0.0; n * d];
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for out in values.chunks_exact_mut(d) {
            labels.push(self.sample_into(stream, &mut z, out));
        }
        SampleBatch {
            dim: d,
            values,
            labels: Some(labels),
        }
    }
}

/// `n` composition draws from `g`.
pub fn sample_gmm(stream: &mut SeededStream, g: &GmmParams, n: usize) -> SampleBatch {
    GmmSampler::new(g).sample(stream, n)
}
