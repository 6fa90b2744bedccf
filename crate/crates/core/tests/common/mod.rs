//! Independent numerical oracles shared by the integration and acceptance
//! tests. Nothing here calls the closed-form routines under test except to
//! evaluate plain mixture densities, and `gradient_ratio`, which only
//! differentiates the library's distance numerically.

#![allow(dead_code)]

use gmix::algebra::l2_distance;
use gmix::{GaussianComponent, GmmParams, SeededStream};
use nalgebra::{DMatrix, DVector};

/// Random valid mixture: weights from `0.1 + U`, means in `[-3, 3]`,
/// covariances `A Aᵀ + 0.2 I` with `A` entries in `[-1, 1]`.
pub fn random_gmm(stream: &mut SeededStream, k: usize, d: usize) -> GmmParams {
    let raw: Vec<f64> = (0..k).map(|_| 0.1 + stream.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .map(|w| {
            let mean = DVector::from_fn(d, |_, _| stream.uniform_range(-3.0, 3.0));
            let a = DMatrix::from_fn(d, d, |_, _| stream.uniform_range(-1.0, 1.0));
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
            GaussianComponent::new(w / total, mean, cov).unwrap()
        })
        .collect();
    GmmParams::new(comps).unwrap()
}

/// Box `[lo, hi]` per dimension covering every component by `sigmas`
/// marginal standard deviations.
pub fn bounds(gs: &[&GmmParams], sigmas: f64) -> (Vec<f64>, Vec<f64>) {
    let d = gs[0].dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for g in gs {
        for c in g.components() {
            for j in 0..d {
                let s = c.covariance()[(j, j)].sqrt();
                lo[j] = lo[j].min(c.mean()[j] - sigmas * s);
                hi[j] = hi[j].max(c.mean()[j] + sigmas * s);
            }
        }
    }
    (lo, hi)
}

/// Smallest marginal standard deviation over all components.
pub fn min_sigma(gs: &[&GmmParams]) -> f64 {
    gs.iter()
        .flat_map(|g| g.components())
        .flat_map(|c| (0..c.dim()).map(move |j| c.covariance()[(j, j)].sqrt()))
        .fold(f64::INFINITY, f64::min)
}

/// Composite trapezoid rule with `n` intervals.
pub fn trapezoid<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

/// Tensor-product trapezoid rule on a rectangle.
pub fn trapezoid_2d<F: FnMut(f64, f64) -> f64>(mut f: F, lo: [f64; 2], hi: [f64; 2], n: usize) -> f64 {
    let hx = (hi[0] - lo[0]) / n as f64;
    let hy = (hi[1] - lo[1]) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let wx = if i == 0 || i == n { 0.5 } else { 1.0 };
        let x = lo[0] + i as f64 * hx;
        for j in 0..=n {
            let wy = if j == 0 || j == n { 0.5 } else { 1.0 };
            s += wx * wy * f(x, lo[1] + j as f64 * hy);
        }
    }
    s * hx * hy
}

/// Number of trapezoid intervals giving at least `per_sigma` points per
/// smallest standard deviation.
pub fn intervals(lo: f64, hi: f64, sigma: f64, per_sigma: f64) -> usize {
    ((hi - lo) / sigma * per_sigma).ceil() as usize
}

/// `∫ f g` over the real line (`d = 1`) or the plane (`d = 2`).
pub fn overlap_integral(a: &GmmParams, b: &GmmParams) -> f64 {
    let (lo, hi) = bounds(&[a, b], 12.0);
    let s = min_sigma(&[a, b]);
    match a.dim() {
        1 => {
            let n = intervals(lo[0], hi[0], s, 8.0);
            trapezoid(|x| a.pdf(&[x]).unwrap() * b.pdf(&[x]).unwrap(), lo[0], hi[0], n)
        }
        2 => {
            let n = intervals(lo[0], hi[0], s, 5.0).max(intervals(lo[1], hi[1], s, 5.0));
            trapezoid_2d(
                |x, y| a.pdf(&[x, y]).unwrap() * b.pdf(&[x, y]).unwrap(),
                [lo[0], lo[1]],
                [hi[0], hi[1]],
                n,
            )
        }
        _ => unimplemented!("quadrature oracle covers d ≤ 2"),
    }
}

/// `‖f − g‖` by quadrature.
pub fn l2_distance_quadrature(a: &GmmParams, b: &GmmParams) -> f64 {
    let (lo, hi) = bounds(&[a, b], 12.0);
    let s = min_sigma(&[a, b]);
    let sq = |v: f64| v * v;
    let v = match a.dim() {
        1 => {
            let n = intervals(lo[0], hi[0], s, 8.0);
            trapezoid(|x| sq(a.pdf(&[x]).unwrap() - b.pdf(&[x]).unwrap()), lo[0], hi[0], n)
        }
        2 => {
            let n = intervals(lo[0], hi[0], s, 5.0).max(intervals(lo[1], hi[1], s, 5.0));
            trapezoid_2d(
                |x, y| sq(a.pdf(&[x, y]).unwrap() - b.pdf(&[x, y]).unwrap()),
                [lo[0], lo[1]],
                [hi[0], hi[1]],
                n,
            )
        }
        _ => unimplemented!("quadrature oracle covers d ≤ 2"),
    };
    v.sqrt()
}

/// Density of the first coordinate of a bivariate mixture at `x`, by
/// integrating out the second.
pub fn marginal_x_quadrature(g: &GmmParams, x: f64) -> f64 {
    let (lo, hi) = bounds(&[g], 12.0);
    let n = intervals(lo[1], hi[1], min_sigma(&[g]), 8.0);
    trapezoid(|y| g.pdf(&[x, y]).unwrap(), lo[1], hi[1], n)
}

/// Smallest standard deviation of the first coordinate given the second,
/// over all components of a bivariate mixture: the narrowest feature of any
/// slice `x ↦ p(x, y)`.
pub fn slice_sigma(g: &GmmParams) -> f64 {
    g.components()
        .iter()
        .map(|c| {
            let s = c.covariance();
            (s[(0, 0)] - s[(0, 1)] * s[(0, 1)] / s[(1, 1)]).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `∫ p(x, y) dx` for a bivariate mixture.
pub fn slice_mass(g: &GmmParams, y: f64) -> f64 {
    let (lo, hi) = bounds(&[g], 12.0);
    let n = intervals(lo[0], hi[0], slice_sigma(g), 8.0);
    trapezoid(|t| g.pdf(&[t, y]).unwrap(), lo[0], hi[0], n)
}

/// `p(x | y)` for a bivariate mixture: the slice `p(x, y)` normalized by
/// quadrature over `x`.
pub fn conditional_x_quadrature(g: &GmmParams, x: f64, y: f64) -> f64 {
    g.pdf(&[x, y]).unwrap() / slice_mass(g, y)
}

/// Bivariate mixture of independent pairs `(a_i, b_j)` with weights
/// `π_i ρ_j`.
pub fn independent_pair(a: &GmmParams, b: &GmmParams) -> GmmParams {
    let mut comps = Vec::new();
    for ca in a.components() {
        for cb in b.components() {
            let mean = DVector::from_vec(vec![ca.mean()[0], cb.mean()[0]]);
            let cov = DMatrix::from_row_slice(
                2,
                2,
                &[ca.covariance()[(0, 0)], 0.0, 0.0, cb.covariance()[(0, 0)]],
            );
            comps.push(GaussianComponent::new(ca.weight() * cb.weight(), mean, cov).unwrap());
        }
    }
    GmmParams::new(comps).unwrap()
}

/// CDF of a scalar mixture by quadrature of its density from far in the
/// left tail, tabulated on a uniform grid and linearly interpolated.
pub struct QuadratureCdf {
    lo: f64,
    h: f64,
    values: Vec<f64>,
}

impl QuadratureCdf {
    pub fn new(g: &GmmParams, points: usize) -> Self {
        let (lo, hi) = bounds(&[g], 12.0);
        let (lo, hi) = (lo[0], hi[0]);
        let h = (hi - lo) / (points - 1) as f64;
        // Each cell is integrated with a 16-interval trapezoid sub-rule.
        let mut values = Vec::with_capacity(points);
        let mut acc = 0.0;
        values.push(0.0);
        for i in 1..points {
            let a = lo + (i - 1) as f64 * h;
            acc += trapezoid(|x| g.pdf(&[x]).unwrap(), a, a + h, 16);
            values.push(acc);
        }
        Self { lo, h, values }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.lo) / self.h;
        if t <= 0.0 {
            return 0.0;
        }
        let i = t.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Relative difference with an absolute floor for values near zero.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// Four overlapping components in the plane: 23 free parameters.
pub fn four_component_2d() -> GmmParams {
    let c = |w: f64, m: [f64; 2], s: [f64; 4]| {
        GaussianComponent::new(w, DVector::from_row_slice(&m), DMatrix::from_row_slice(2, 2, &s)).unwrap()
    };
    GmmParams::new(vec![
        c(0.3, [-2.0, -1.0], [1.0, 0.3, 0.3, 0.8]),
        c(0.2, [-1.2, -0.4], [0.6, -0.1, -0.1, 0.9]),
        c(0.25, [2.0, 1.5], [0.7, 0.2, 0.2, 0.5]),
        c(0.25, [2.8, 0.6], [0.9, 0.0, 0.0, 0.6]),
    ])
    .unwrap()
}

/// Unconstrained coordinates (log-weights, means, Cholesky factors with log
/// diagonals), decoded independently of the library's refinement.
pub fn decode(theta: &[f64], k: usize, d: usize) -> GmmParams {
    let tri = d * (d + 1) / 2;
    let max = theta[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta[..k].iter().map(|l| (l - max).exp()).collect();
    let t: f64 = e.iter().sum();
    let comps = (0..k)
        .map(|c| {
            let mean = DVector::from_column_slice(&theta[k + c * d..k + (c + 1) * d]);
            let mut l = DMatrix::zeros(d, d);
            let mut p = k + k * d + c * tri;
            for i in 0..d {
                for j in 0..=i {
                    l[(i, j)] = if i == j { theta[p].exp() } else { theta[p] };
                    p += 1;
                }
            }
            let cov = &l * l.transpose();
            let cov = (&cov + cov.transpose()) * 0.5;
            GaussianComponent::new(e[c] / t, mean, cov).unwrap()
        })
        .collect();
    GmmParams::new(comps).unwrap()
}

pub fn encode(g: &GmmParams) -> Vec<f64> {
    let d = g.dim();
    let mut theta: Vec<f64> = g.components().iter().map(|c| c.weight().ln()).collect();
    for c in g.components() {
        theta.extend(c.mean().iter());
    }
    for c in g.components() {
        let l = c.covariance().clone().cholesky().unwrap().l();
        for i in 0..d {
            for j in 0..=i {
                theta.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
            }
        }
    }
    theta
}

/// `max_i |∂f/∂θ_i| / f` by central differences, with `f = D²` the squared
/// closed-form distance the reduction minimizes: a stationarity probe.
pub fn gradient_ratio(target: &GmmParams, reduced: &GmmParams) -> f64 {
    let (k, d) = (reduced.len(), reduced.dim());
    let theta = encode(reduced);
    let f = |t: &[f64]| l2_distance(target, &decode(t, k, d)).unwrap().powi(2);
    let base = f(&theta);
    let mut worst: f64 = 0.0;
    let mut t = theta.clone();
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        t[i] = theta[i] + h;
        let up = f(&t);
        t[i] = theta[i] - h;
        let down = f(&t);
        t[i] = theta[i];
        worst = worst.max(((up - down) / (2.0 * h)).abs());
    }
    worst / base
}
