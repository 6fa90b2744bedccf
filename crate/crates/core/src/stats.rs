//! Empirical summaries used to compare Monte Carlo output with closed forms.

use nalgebra::{DMatrix, DVector};

use crate::numeric::CompensatedArray;

/// Standard normal CDF `Φ(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`. `samples` need not
/// be sorted.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    ks_statistic_sorted(&sorted, cdf)
}

pub fn ks_statistic_sorted<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Equal-width histogram bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// `count / (n · width)`, comparable to a density.
    pub density: f64,
}

/// Histogram of `samples` over `[lo, hi]` with `bins` equal bins. Values outside
/// the range are not counted but still enter the density normalization.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramBin> {
    assert!(bins > 0 && hi > lo);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &x in samples {
        if x < lo || x > hi {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count,
            density: count as f64 / (n * width),
        })
        .collect()
}

/// Sample mean and biased (divide by `n`) sample covariance of row-major
/// points with `dim` coordinates each.
pub fn sample_moments(values: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = values.len() / dim;
    assert!(n > 0, "no samples");
    let mut mean_acc = CompensatedArray::zeros(dim);
    for p in values.chunks_exact(dim) {
        mean_acc.add_scaled(1.0, p);
    }
    let mean = DVector::from_vec(mean_acc.values()) / n as f64;
    let mut cov_acc = CompensatedArray::zeros(dim * dim);
    let mut outer = vec![0.0; dim * dim];
    for p in values.chunks_exact(dim) {
        for j in 0..dim {
            for i in 0..dim {
                outer[i + j * dim] = (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
        cov_acc.add_scaled(1.0, &outer);
    }
    let cov = DMatrix::from_vec(dim, dim, cov_acc.values()) / n as f64;
    (mean, cov)
}
