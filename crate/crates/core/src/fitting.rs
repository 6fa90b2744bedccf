//! Maximum-likelihood fitting by expectation–maximization, and model
//! selection over the number of components with AIC/BIC.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmmError, Result};
use crate::gmm::{param_count, GaussianComponent, GmmParams};
use crate::numeric::{symmetrize, CholeskyFactor, CompensatedArray, CompensatedSum, LN_2PI};
use crate::sampling::{SampleBatch, SeededStream};
use crate::stats::sample_moments;

/// Points per E-step block. Partial sums are formed per block and reduced in
/// block order, so results do not depend on how blocks are scheduled.
const BLOCK: usize = 4096;

/// Components whose responsibility mass falls below this fraction of `N` are
/// re-seeded.
const EMPTY_MASS: f64 = 1e-10;

/// Component terms this far (in log) below a point's largest term are
/// treated as zero. `e^-41 ≈ 1.6e-18`, so even the sum of 64 such terms
/// stays below half an ulp of the normalizer, which is at least one.
const NEGLIGIBLE_LOG_RATIO: f64 = -41.0;

/// Ordered list of `d`-dimensional observations, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(GmmError::InvalidArgument("dataset dimension must be positive".into()));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(GmmError::InvalidArgument(format!(
                "{} values do not form a nonempty set of {dim}-dimensional points",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self { dim, values })
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.as_ref().len())
            .ok_or_else(|| GmmError::InvalidArgument("empty dataset".into()))?;
        let mut values = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            GmmError::check_dim(dim, p.len())?;
            values.extend_from_slice(p);
        }
        Self::new(dim, values)
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    /// Sample mean and biased sample covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        sample_moments(&self.values, self.dim)
    }
}

impl TryFrom<SampleBatch> for Dataset {
    type Error = GmmError;

    fn try_from(b: SampleBatch) -> Result<Self> {
        Dataset::new(b.dim, b.values)
    }
}

/// EM hyperparameters. `None` fields take data-dependent defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the log-likelihood changes by less than this. Default `1e-8·N`.
    pub loglik_tol: Option<f64>,
    /// Diagonal loading for degenerate components. Default `1e-6` times the
    /// mean per-dimension data variance.
    pub covariance_floor: Option<f64>,
    /// Extra runs from different seedings; the best final likelihood wins.
    pub restarts: usize,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 500,
            loglik_tol: None,
            covariance_floor: None,
            restarts: 4,
            seed,
        }
    }

    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }
}

/// Outcome of [`em_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: GmmParams,
    pub final_loglik: f64,
    /// Log-likelihood of the parameters at the start of each iteration, plus
    /// the final parameters. Non-decreasing except directly after a rescue.
    pub loglik_trace: Vec<f64>,
    pub iterations_used: usize,
    pub aic: f64,
    pub bic: f64,
    pub free_params: usize,
    /// Number of empty-component re-seedings in the winning run.
    pub rescues: usize,
    /// Which run (0 = first) produced the model.
    pub run_index: usize,
}

/// `AIC = −2 log L + 2p`.
pub fn aic(loglik: f64, p: usize) -> f64 {
    -2.0 * loglik + 2.0 * p as f64
}

/// `BIC = −2 log L + p log N`.
pub fn bic(loglik: f64, p: usize, n: usize) -> f64 {
    -2.0 * loglik + p as f64 * (n as f64).ln()
}

/// `Σ_n log G(x_n | g)`. Returns `-inf` if any point has zero density.
pub fn log_likelihood(g: &GmmParams, data: &Dataset) -> Result<f64> {
    GmmError::check_dim(g.dim(), data.dim())?;
    let mut acc = CompensatedSum::new();
    for p in data.points() {
        let lp = g.log_pdf(p)?;
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        acc.add(lp);
    }
    Ok(acc.value())
}

/// Mixture state in flat arrays for the E/M loops.
#[derive(Debug, Clone)]
struct Packed {
    d: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<DMatrix<f64>>,
    lowers: Vec<f64>,
    inv_diag: Vec<f64>,
    log_coefs: Vec<f64>,
}

impl Packed {
    fn k(&self) -> usize {
        self.weights.len()
    }

    fn build(d: usize, weights: Vec<f64>, means: Vec<f64>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        let mut lowers = Vec::with_capacity(k * d * d);
        let mut inv_diag = Vec::with_capacity(k * d);
        let mut log_coefs = Vec::with_capacity(k);
        for (w, c) in weights.iter().zip(&covs) {
            let f = CholeskyFactor::new(c)?;
            for i in 0..d {
                for j in 0..d {
                    lowers.push(f.lower()[(i, j)]);
                }
                inv_diag.push(1.0 / f.lower()[(i, i)]);
            }
            log_coefs.push(w.ln() - 0.5 * (f.log_det() + d as f64 * LN_2PI));
        }
        Ok(Self {
            d,
            weights,
            means,
            covs,
            lowers,
            inv_diag,
            log_coefs,
        })
    }

    /// Per-component `log π_k + log N(x | m_k, Σ_k)` into `out`.
    #[inline]
    fn log_terms(&self, x: &[f64], z: &mut [f64], out: &mut [f64]) {
        let d = self.d;
        if d == 1 {
            let x = x[0];
            for (((o, m), inv), c) in out.iter_mut().zip(&self.means).zip(&self.inv_diag).zip(&self.log_coefs) {
                let zi = (x - m) * inv;
                *o = c - 0.5 * zi * zi;
            }
            return;
        }
        for (k, o) in out.iter_mut().enumerate() {
            let m = &self.means[k * d..(k + 1) * d];
            let l = &self.lowers[k * d * d..(k + 1) * d * d];
            let inv = &self.inv_diag[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let mut s = x[i] - m[i];
                for j in 0..i {
                    s -= l[i * d + j] * z[j];
                }
                let zi = s * inv[i];
                z[i] = zi;
                q += zi * zi;
            }
            *o = self.log_coefs[k] - 0.5 * q;
        }
    }

    fn to_params(&self) -> Result<GmmParams> {
        let d = self.d;
        let comps = (0..self.k())
            .map(|k| {
                GaussianComponent::new(
                    self.weights[k],
                    DVector::from_column_slice(&self.means[k * d..(k + 1) * d]),
                    self.covs[k].clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        GmmParams::from_unnormalized(comps)
    }
}

/// Sufficient statistics of one E-step, with scatter taken about the
/// component means that produced it (to avoid cancellation).
struct Stats {
    loglik: f64,
    mass: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    worst_point: usize,
}

fn e_step(p: &Packed, data: &Dataset) -> Stats {
    let d = p.d;
    let k = p.k();
    let n = data.len();
    let mut ll = CompensatedSum::new();
    let mut mass = CompensatedArray::zeros(k);
    let mut first = CompensatedArray::zeros(k * d);
    let mut second = CompensatedArray::zeros(k * d * d);
    let mut worst = (f64::INFINITY, 0usize);

    let mut terms = vec![0.0; k];
    let mut z = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let mut b_mass = vec![0.0; k];
    let mut b_first = vec![0.0; k * d];
    let mut b_second = vec![0.0; k * d * d];

    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        b_mass.iter_mut().for_each(|v| *v = 0.0);
        b_first.iter_mut().for_each(|v| *v = 0.0);
        b_second.iter_mut().for_each(|v| *v = 0.0);
        let mut b_ll = CompensatedSum::new();
        for idx in start..end {
            let x = data.point(idx);
            p.log_terms(x, &mut z, &mut terms);
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                b_ll.add(max);
                worst = (max, idx);
                continue;
            }
            let mut s = 0.0;
            for t in terms.iter_mut() {
                let v = *t - max;
                *t = if v < NEGLIGIBLE_LOG_RATIO { 0.0 } else { v.exp() };
                s += *t;
            }
            let lse = max + s.ln();
            b_ll.add(lse);
            if lse < worst.0 {
                worst = (lse, idx);
            }
            let inv = 1.0 / s;
            if d == 1 {
                let x = x[0];
                for (c, &t) in terms.iter().enumerate() {
                    if t == 0.0 {
                        continue;
                    }
                    let r = t * inv;
                    let dx = x - p.means[c];
                    b_mass[c] += r;
                    b_first[c] += r * dx;
                    b_second[c] += r * dx * dx;
                }
                continue;
            }
            for (c, &t) in terms.iter().enumerate() {
                let r = t * inv;
                if r == 0.0 {
                    continue;
                }
                b_mass[c] += r;
                let m = &p.means[c * d..(c + 1) * d];
                for i in 0..d {
                    diff[i] = x[i] - m[i];
                    b_first[c * d + i] += r * diff[i];
                }
                let sec = &mut b_second[c * d * d..(c + 1) * d * d];
                for i in 0..d {
                    let ri = r * diff[i];
                    for j in 0..=i {
                        sec[i * d + j] += ri * diff[j];
                    }
                }
            }
        }
        ll.merge(&b_ll);
        mass.add_scaled(1.0, &b_mass);
        first.add_scaled(1.0, &b_first);
        second.add_scaled(1.0, &b_second);
        start = end;
    }
    Stats {
        loglik: ll.value(),
        mass: mass.values(),
        first: first.values(),
        second: second.values(),
        worst_point: worst.1,
    }
}

struct RunContext<'a> {
    data: &'a Dataset,
    data_cov: DMatrix<f64>,
    floor: f64,
    tol: f64,
    max_iters: usize,
}

/// Returns the updated mixture and the number of rescued components.
fn m_step(p: &Packed, st: &Stats, ctx: &RunContext) -> Result<(Packed, usize)> {
    let d = p.d;
    let k = p.k();
    let n = ctx.data.len() as f64;
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k * d);
    let mut covs = Vec::with_capacity(k);
    let mut rescues = 0;
    for c in 0..k {
        let r = st.mass[c];
        let rescued = if r < EMPTY_MASS * n {
            None
        } else {
            let delta: Vec<f64> = (0..d).map(|i| st.first[c * d + i] / r).collect();
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..=i {
                    let v = st.second[c * d * d + i * d + j] / r - delta[i] * delta[j];
                    cov[(i, j)] = v;
                    cov[(j, i)] = v;
                }
            }
            let cov = floor_if_degenerate(cov, ctx.floor);
            CholeskyFactor::new(&cov).ok().map(|_| {
                let mean: Vec<f64> = (0..d).map(|i| p.means[c * d + i] + delta[i]).collect();
                (r / n, mean, cov)
            })
        };
        let (w, mean, cov) = match rescued {
            Some(v) => v,
            None => {
                rescues += 1;
                (
                    1.0 / n,
                    ctx.data.point(st.worst_point).to_vec(),
                    ctx.data_cov.clone(),
                )
            }
        };
        weights.push(w);
        means.extend(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((Packed::build(d, weights, means, covs)?, rescues))
}

/// Adds `floor·I` only if the scatter is not comfortably positive definite
/// (a factorization pivot below `floor`).
fn floor_if_degenerate(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let ok = CholeskyFactor::new(&cov)
        .map(|f| f.lower().diagonal().iter().all(|l| l * l >= floor))
        .unwrap_or(false);
    if ok {
        cov
    } else {
        let d = cov.nrows();
        cov + DMatrix::identity(d, d) * floor
    }
}

/// Randomized farthest-point seeding: each new mean is a data point drawn
/// with probability proportional to its squared distance from the nearest
/// mean chosen so far.
fn seed_means(data: &Dataset, k: usize, stream: &mut SeededStream) -> Vec<f64> {
    let n = data.len();
    let d = data.dim();
    let mut means = Vec::with_capacity(k * d);
    let first = ((stream.uniform() * n as f64) as usize).min(n - 1);
    means.extend_from_slice(data.point(first));
    let mut nearest: Vec<f64> = data
        .points()
        .map(|x| sq_dist(x, data.point(first)))
        .collect();
    for _ in 1..k {
        let total = nearest.iter().sum::<f64>();
        let pick = if total > 0.0 {
            let target = stream.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            ((stream.uniform() * n as f64) as usize).min(n - 1)
        };
        let c = data.point(pick).to_vec();
        for (i, x) in data.points().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, &c));
        }
        means.extend(c);
    }
    means
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct RunOutcome {
    packed: Packed,
    trace: Vec<f64>,
    iterations: usize,
    rescues: usize,
}

fn run_once(ctx: &RunContext, k: usize, stream: &mut SeededStream) -> Result<RunOutcome> {
    let d = ctx.data.dim();
    let means = seed_means(ctx.data, k, stream);
    let init_cov = floor_if_degenerate(ctx.data_cov.clone(), ctx.floor);
    let mut packed = Packed::build(d, vec![1.0 / k as f64; k], means, vec![init_cov; k])?;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut rescues = 0;
    let mut converged = false;
    while iterations < ctx.max_iters {
        let st = e_step(&packed, ctx.data);
        if let Some(&prev) = trace.last() {
            if (st.loglik - prev).abs() < ctx.tol {
                trace.push(st.loglik);
                converged = true;
                break;
            }
        }
        trace.push(st.loglik);
        let (next, r) = m_step(&packed, &st, ctx)?;
        packed = next;
        rescues += r;
        iterations += 1;
    }
    if !converged {
        trace.push(e_step(&packed, ctx.data).loglik);
    }
    Ok(RunOutcome {
        packed,
        trace,
        iterations,
        rescues,
    })
}

/// Fits a `cfg.k`-component mixture by EM, keeping the best of
/// `1 + cfg.restarts` runs. Run `r` seeds its means from
/// `SeededStream::split(cfg.seed, r)`.
pub fn em_fit(data: &Dataset, cfg: &EmConfig) -> Result<FitReport> {
    let n = data.len();
    let d = data.dim();
    if cfg.k == 0 {
        return Err(GmmError::InvalidArgument("k must be at least 1".into()));
    }
    if n < cfg.k {
        return Err(GmmError::InvalidArgument(format!(
            "{n} points cannot support {} components",
            cfg.k
        )));
    }
    if cfg.max_iters == 0 {
        return Err(GmmError::InvalidArgument("max_iters must be positive".into()));
    }
    let (_, data_cov) = data.moments();
    let data_cov = symmetrize(&data_cov);
    let mean_var = data_cov.trace() / d as f64;
    let floor = cfg
        .covariance_floor
        .unwrap_or(if mean_var > 0.0 { 1e-6 * mean_var } else { 1e-6 });
    let tol = cfg.loglik_tol.unwrap_or(1e-8 * n as f64);
    if !(floor > 0.0) || !(tol > 0.0) {
        return Err(GmmError::InvalidArgument(
            "covariance_floor and loglik_tol must be positive".into(),
        ));
    }
    let ctx = RunContext {
        data,
        data_cov,
        floor,
        tol,
        max_iters: cfg.max_iters,
    };
    let mut best: Option<(usize, RunOutcome)> = None;
    for run in 0..=cfg.restarts {
        let mut stream = SeededStream::split(cfg.seed, run as u64);
        let out = run_once(&ctx, cfg.k, &mut stream)?;
        let better = match &best {
            None => true,
            Some((_, b)) => out.trace.last() > b.trace.last(),
        };
        if better {
            best = Some((run, out));
        }
    }
    let (run_index, out) = best.expect("at least one run");
    let final_loglik = *out.trace.last().expect("trace is never empty");
    let p = param_count(cfg.k, d);
    Ok(FitReport {
        model: out.packed.to_params()?,
        final_loglik,
        loglik_trace: out.trace,
        iterations_used: out.iterations,
        aic: aic(final_loglik, p),
        bic: bic(final_loglik, p, n),
        free_params: p,
        rescues: out.rescues,
        run_index,
    })
}

/// Information criterion used to pick `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Aic,
    Bic,
}

/// One candidate's row in a [`ModelSelection`] table.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub k: usize,
    pub free_params: usize,
    pub outcome: std::result::Result<SelectionScores, GmmError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSelection {
    pub rows: Vec<SelectionRow>,
    pub best_aic: Option<usize>,
    pub best_bic: Option<usize>,
}

impl ModelSelection {
    pub fn best(&self, criterion: Criterion) -> Option<usize> {
        match criterion {
            Criterion::Aic => self.best_aic,
            Criterion::Bic => self.best_bic,
        }
    }

    /// Fit report of the candidate chosen by `criterion`.
    pub fn best_report(&self, criterion: Criterion) -> Option<&FitReport> {
        let k = self.best(criterion)?;
        self.rows
            .iter()
            .find(|r| r.k == k)
            .and_then(|r| r.outcome.as_ref().ok())
            .map(|s| &s.report)
    }
}

/// Fits every candidate `K` and picks the minimizer of AIC and of BIC
/// (ties go to the smaller `K`). A failed fit is recorded in its row.
pub fn select_model(data: &Dataset, candidates: &[usize], template: &EmConfig) -> Result<ModelSelection> {
    if candidates.is_empty() {
        return Err(GmmError::InvalidArgument("no candidate component counts".into()));
    }
    let d = data.dim();
    let rows: Vec<SelectionRow> = candidates
        .iter()
        .map(|&k| SelectionRow {
            k,
            free_params: if k >= 1 { param_count(k, d) } else { 0 },
            outcome: em_fit(data, &template.with_k(k)).map(|r| SelectionScores {
                loglik: r.final_loglik,
                aic: r.aic,
                bic: r.bic,
                report: r,
            }),
        })
        .collect();
    let pick = |f: fn(&SelectionScores) -> f64| {
        rows.iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|s| (r.k, f(s))))
            .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
                Some((bk, bv)) if bv < v || (bv == v && bk <= k) => Some((bk, bv)),
                _ => Some((k, v)),
            })
            .map(|(k, _)| k)
    };
    Ok(ModelSelection {
        best_aic: pick(|s| s.aic),
        best_bic: pick(|s| s.bic),
        rows,
    })
}
