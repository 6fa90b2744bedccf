//! Small numerical kernels shared by the mixture operations: compensated
//! summation, a guarded Cholesky factor, and log-space reductions.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest diagonal jitter (relative to the mean diagonal entry) tried before a
/// matrix is declared not positive definite.
pub const JITTER_BUDGET: f64 = 1e-12;

/// Condition-number ceiling for matrices that get solved against.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Neumaier compensated accumulator. Terms are added in call order, so the
/// result only depends on the sequence of inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

/// Elementwise compensated accumulation of equally sized matrices (or vectors
/// stored column-major).
#[derive(Debug, Clone)]
pub struct CompensatedArray {
    cells: Vec<CompensatedSum>,
}

impl CompensatedArray {
    pub fn zeros(len: usize) -> Self {
        Self {
            cells: vec![CompensatedSum::new(); len],
        }
    }

    /// Adds `scale * values[i]` to each cell.
    pub fn add_scaled(&mut self, scale: f64, values: &[f64]) {
        for (c, v) in self.cells.iter_mut().zip(values) {
            c.add(scale * v);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.cells.iter().map(CompensatedSum::value).collect()
    }
}

/// `log(Σ exp(x_i))` with max subtraction. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = compensated_sum(xs.iter().map(|&x| (x - max).exp()));
    max + s.ln()
}

/// `(Σ + Σᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            0.5 * (m[(i, j)] + m[(j, i)])
        }
    })
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factors a symmetric matrix. A failed attempt is retried once with a
    /// diagonal jitter of `JITTER_BUDGET` times the mean diagonal; if that also
    /// fails the matrix is rejected.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if let Some(l) = cholesky_lower(a) {
            return Ok(Self::from_lower(l));
        }
        let n = a.nrows();
        if n == 0 {
            return Err(GmmError::NotPositiveDefinite);
        }
        let scale = a.diagonal().iter().sum::<f64>() / n as f64;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GmmError::NotPositiveDefinite);
        }
        let mut jittered = a.clone();
        for i in 0..n {
            jittered[(i, i)] += JITTER_BUDGET * scale;
        }
        cholesky_lower(&jittered)
            .map(Self::from_lower)
            .ok_or(GmmError::NotPositiveDefinite)
    }

    /// Like [`CholeskyFactor::new`] but also rejects matrices whose condition
    /// estimate exceeds [`CONDITION_LIMIT`].
    pub fn new_guarded(a: &DMatrix<f64>) -> Result<Self> {
        let f = Self::new(a)?;
        let condition = f.condition_estimate();
        if condition > CONDITION_LIMIT {
            return Err(GmmError::IllConditioned { condition });
        }
        Ok(f)
    }

    fn from_lower(lower: DMatrix<f64>) -> Self {
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Self { lower, log_det }
    }

    /// Builds a factor from an already lower-triangular matrix with positive
    /// diagonal.
    pub fn from_lower_triangular(lower: DMatrix<f64>) -> Result<Self> {
        let n = lower.nrows();
        if lower.ncols() != n || (0..n).any(|i| !(lower[(i, i)] > 0.0)) {
            return Err(GmmError::NotPositiveDefinite);
        }
        Ok(Self::from_lower(lower))
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log det(A)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared ratio of the extreme diagonal entries of `L`; a cheap lower
    /// bound on the 2-norm condition number of `A`.
    pub fn condition_estimate(&self) -> f64 {
        let d = self.lower.diagonal();
        let max = d.iter().copied().fold(0.0, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        (max / min).powi(2)
    }

    /// Solves `L z = v` in place.
    #[inline]
    pub fn forward_in_place(&self, v: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * v[k];
            }
            v[i] = s / self.lower[(i, i)];
        }
    }

    /// Solves `Lᵀ z = v` in place.
    #[inline]
    pub fn backward_in_place(&self, v: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = v[i];
            for k in i + 1..n {
                s -= self.lower[(k, i)] * v[k];
            }
            v[i] = s / self.lower[(i, i)];
        }
    }

    /// `vᵀ A⁻¹ v`, using `scratch` (length ≥ dim) as workspace.
    #[inline]
    pub fn mahalanobis_sq(&self, v: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.dim();
        let z = &mut scratch[..n];
        z.copy_from_slice(&v[..n]);
        self.forward_in_place(z);
        z.iter().map(|x| x * x).sum()
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.forward_in_place(out.as_mut_slice());
        self.backward_in_place(out.as_mut_slice());
        out
    }

    /// `A⁻¹ B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let s = col.as_mut_slice();
            self.forward_in_place(s);
            self.backward_in_place(s);
        }
        out
    }

    /// Log density of `N(x | mean, A)` for `A` this factor's matrix.
    #[inline]
    pub fn log_normal_density(&self, x: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.dim();
        let z = &mut scratch[..n];
        for i in 0..n {
            z[i] = x[i] - mean[i];
        }
        self.forward_in_place(z);
        let q: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (q + self.log_det + n as f64 * LN_2PI)
    }
}

fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}
