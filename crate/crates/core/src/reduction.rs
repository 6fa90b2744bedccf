//! Mixture reduction: approximate a `K_a`-component mixture by one with fewer
//! components, minimizing the closed-form `L²` distance.
//!
//! Reduction runs in two stages. A greedy stage repeatedly applies the
//! moment-preserving pair merge that least increases the distance to the
//! original, until the target count is reached. A refinement stage then
//! minimizes the squared distance over all parameters of the reduced mixture
//! with quasi-Newton steps on central finite-difference gradients, finished by
//! damped Newton steps on a finite-difference Hessian. Weights are
//! parameterized by softmax logits and covariances by lower-triangular factors
//! with log-diagonals, so every iterate is a valid mixture.

use nalgebra::{DMatrix, DVector};

use crate::algebra::{l2_distance, log_overlap};
use crate::error::{GmmError, Result};
use crate::gmm::{GaussianComponent, GmmParams};
use crate::numeric::{symmetrize, CholeskyFactor, CompensatedSum};

/// Stop refining once a step improves the squared distance by less than this
/// fraction.
const REL_IMPROVEMENT_STOP: f64 = 1e-10;

/// Relative finite-difference step.
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    pub reduced: GmmParams,
    /// Distance to the original after the greedy stage.
    pub l2_before_refine: f64,
    pub l2_final: f64,
    pub refine_iterations: usize,
    /// Distance after each accepted refinement step, starting with the
    /// greedy result.
    pub l2_trace: Vec<f64>,
    /// `max_i |∂‖·‖/∂θ_i| / ‖·‖` at the returned parameters.
    pub final_gradient_ratio: f64,
    /// Whether the derivative-free fallback was used.
    pub used_pattern_search: bool,
}

/// Merge of two components preserving total weight, mean and covariance.
pub fn moment_match_merge(c1: &GaussianComponent, c2: &GaussianComponent) -> Result<GaussianComponent> {
    GmmError::check_dim(c1.dim(), c2.dim())?;
    let w = c1.weight() + c2.weight();
    if !(w > 0.0) {
        return Err(GmmError::ZeroWeight);
    }
    let (a, b) = (c1.weight() / w, c2.weight() / w);
    let mean = c1.mean() * a + c2.mean() * b;
    let d1 = c1.mean() - &mean;
    let d2 = c2.mean() - &mean;
    let cov = (c1.covariance() + &d1 * d1.transpose()) * a + (c2.covariance() + &d2 * d2.transpose()) * b;
    GaussianComponent::new(w, mean, symmetrize(&cov))
}

/// Greedy merge stage. Returns the merged component list (weights summing to
/// one) and the order of merges as pairs of positions in the list at the time
/// of merging.
pub fn greedy_merge(g: &GmmParams, target_k: usize) -> Result<(Vec<GaussianComponent>, Vec<(usize, usize)>)> {
    check_target(g, target_k)?;
    let orig = g.components();
    let mut comps: Vec<GaussianComponent> = orig.to_vec();
    // cross[u] = Σ_a π_a c(a, u), pair[u][v] = c(u, v) for the current list.
    let mut cross: Vec<f64> = comps
        .iter()
        .map(|u| cross_term(orig, u))
        .collect::<Result<_>>()?;
    let mut pair: Vec<Vec<f64>> = comps
        .iter()
        .map(|u| comps.iter().map(|v| overlap(u, v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut merges = Vec::new();
    while comps.len() > target_k {
        let k = comps.len();
        let w: Vec<f64> = comps.iter().map(|c| c.weight()).collect();
        // Row sums r_u = Σ_v w_v c(u, v).
        let row: Vec<f64> = (0..k)
            .map(|u| (0..k).map(|v| w[v] * pair[u][v]).sum())
            .collect();
        let mut best: Option<(f64, usize, usize, GaussianComponent, f64, Vec<f64>, f64)> = None;
        for i in 0..k {
            for j in i + 1..k {
                let m = moment_match_merge(&comps[i], &comps[j])?;
                let wm = m.weight();
                let cross_m = cross_term(orig, &m)?;
                let pair_m: Vec<f64> = comps.iter().map(|u| overlap(&m, u)).collect::<Result<_>>()?;
                let self_m = overlap(&m, &m)?;
                // Change of I_bb − 2 I_ab when i and j are replaced by m.
                let removed_bb = 2.0 * w[i] * row[i] + 2.0 * w[j] * row[j]
                    - w[i] * w[i] * pair[i][i]
                    - w[j] * w[j] * pair[j][j]
                    - 2.0 * w[i] * w[j] * pair[i][j];
                let rest: f64 = (0..k)
                    .filter(|&u| u != i && u != j)
                    .map(|u| w[u] * pair_m[u])
                    .sum();
                let added_bb = 2.0 * wm * rest + wm * wm * self_m;
                let delta_ab = wm * cross_m - w[i] * cross[i] - w[j] * cross[j];
                let delta = added_bb - removed_bb - 2.0 * delta_ab;
                if best.as_ref().map_or(true, |b| delta < b.0) {
                    best = Some((delta, i, j, m, cross_m, pair_m, self_m));
                }
            }
        }
        let (_, i, j, m, cross_m, mut pair_m, self_m) = best.expect("at least one pair");
        merges.push((i, j));
        comps[i] = m;
        comps.remove(j);
        cross[i] = cross_m;
        cross.remove(j);
        pair_m[i] = self_m;
        pair_m.remove(j);
        pair.remove(j);
        for row in pair.iter_mut() {
            row.remove(j);
        }
        for (u, row) in pair.iter_mut().enumerate() {
            row[i] = pair_m[u];
        }
        pair[i] = pair_m;
    }
    Ok((comps, merges))
}

fn check_target(g: &GmmParams, target_k: usize) -> Result<()> {
    if target_k < 1 || target_k > g.len() {
        return Err(GmmError::InvalidArgument(format!(
            "target of {target_k} components is outside 1..={}",
            g.len()
        )));
    }
    Ok(())
}

fn overlap(u: &GaussianComponent, v: &GaussianComponent) -> Result<f64> {
    Ok(log_overlap(u, v)?.exp())
}

fn cross_term(orig: &[GaussianComponent], u: &GaussianComponent) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for a in orig {
        acc.add(a.weight() * overlap(a, u)?);
    }
    Ok(acc.value())
}

/// Unconstrained coordinates of a reduced mixture.
struct Layout {
    k: usize,
    d: usize,
}

impl Layout {
    fn tri(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    fn len(&self) -> usize {
        self.k * (1 + self.d + self.tri())
    }

    fn encode(&self, comps: &[GaussianComponent]) -> Result<Vec<f64>> {
        let mut theta = Vec::with_capacity(self.len());
        for c in comps {
            theta.push(c.weight().ln());
        }
        for c in comps {
            theta.extend(c.mean().iter());
        }
        for c in comps {
            let f = CholeskyFactor::new(c.covariance())?;
            let l = f.lower();
            for i in 0..self.d {
                for j in 0..=i {
                    theta.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
        }
        Ok(theta)
    }

    fn decode(&self, theta: &[f64]) -> Result<GmmParams> {
        let (k, d) = (self.k, self.d);
        let logits = &theta[..k];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let mean = DVector::from_column_slice(&theta[k + c * d..k + (c + 1) * d]);
            let base = k + k * d + c * self.tri();
            let mut l = DMatrix::zeros(d, d);
            let mut p = base;
            for i in 0..d {
                for j in 0..=i {
                    l[(i, j)] = if i == j { theta[p].exp() } else { theta[p] };
                    p += 1;
                }
            }
            let cov = symmetrize(&(&l * l.transpose()));
            comps.push(GaussianComponent::new(exps[c] / total, mean, cov)?);
        }
        GmmParams::new(comps)
    }
}

/// Squared `L²` distance to a fixed target with the target's self term
/// precomputed.
struct Objective<'a> {
    target: &'a GmmParams,
    self_term: f64,
    layout: Layout,
}

impl<'a> Objective<'a> {
    fn new(target: &'a GmmParams, k: usize) -> Result<Self> {
        Ok(Self {
            self_term: crate::algebra::inner_product(target, target)?,
            layout: Layout { k, d: target.dim() },
            target,
        })
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        match self.layout.decode(theta) {
            Ok(g) => {
                let ab = crate::algebra::inner_product(self.target, &g).unwrap_or(f64::NAN);
                let bb = crate::algebra::inner_product(&g, &g).unwrap_or(f64::NAN);
                self.self_term - 2.0 * ab + bb
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                let h = FD_STEP * theta[i].abs().max(1.0);
                t[i] = theta[i] + h;
                let up = self.eval(&t);
                t[i] = theta[i] - h;
                let down = self.eval(&t);
                t[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// Reduces `g` to `target_k` components. `budget` caps the number of
/// refinement iterations.
pub fn reduce(g: &GmmParams, target_k: usize, budget: usize) -> Result<ReductionReport> {
    check_target(g, target_k)?;
    if target_k == g.len() {
        return Ok(ReductionReport {
            reduced: g.clone(),
            l2_before_refine: 0.0,
            l2_final: 0.0,
            refine_iterations: 0,
            l2_trace: vec![0.0],
            final_gradient_ratio: 0.0,
            used_pattern_search: false,
        });
    }
    let (merged, _) = greedy_merge(g, target_k)?;
    let greedy = GmmParams::from_unnormalized(merged)?;
    let l2_before_refine = l2_distance(g, &greedy)?;

    let obj = Objective::new(g, target_k)?;
    let mut theta = obj.layout.encode(greedy.components())?;
    let mut f = obj.eval(&theta);
    let start_f = f;
    let mut trace = vec![f.max(0.0).sqrt()];
    let n = theta.len();
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut grad = obj.gradient(&theta);
    let mut iterations = 0;
    let mut used_pattern_search = false;

    while iterations < budget && f > 0.0 {
        let gvec = DVector::from_column_slice(&grad);
        let mut dir = -(&h_inv * &gvec);
        if dir.dot(&gvec) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -gvec.clone();
        }
        let slope = dir.dot(&gvec);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, p)| t + alpha * p).collect();
            let fc = obj.eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * alpha * slope && fc < f {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, f_next)) = accepted else {
            if h_inv != DMatrix::identity(n, n) {
                h_inv = DMatrix::identity(n, n);
                continue;
            }
            // Gradient steps no longer decrease the objective: the finite
            // differences are dominated by noise. Finish derivative-free.
            used_pattern_search = true;
            let (t, fv, used) = pattern_search(&obj, theta, f, budget - iterations, &mut trace);
            theta = t;
            f = fv;
            iterations += used;
            break;
        };
        iterations += 1;
        let new_grad = obj.gradient(&next);
        let s = DVector::from_iterator(n, next.iter().zip(&theta).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, new_grad.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let improvement = (f - f_next) / f;
        debug_assert!(f_next < f);
        theta = next;
        f = f_next;
        grad = new_grad;
        trace.push(f.max(0.0).sqrt());
        if improvement < REL_IMPROVEMENT_STOP {
            break;
        }
    }

    if !used_pattern_search && iterations < budget && f > 0.0 {
        // Quasi-Newton progress can stall on a flat valley before the
        // gradient vanishes; finish with damped Newton steps on a
        // finite-difference Hessian.
        let (t, fv, used) = newton_polish(&obj, theta, f, budget - iterations, &mut trace);
        theta = t;
        f = fv;
        iterations += used;
    }

    let reduced = obj.layout.decode(&theta)?;
    let l2_final = if f < start_f {
        f.max(0.0).sqrt()
    } else {
        l2_before_refine
    };
    let reduced = if f < start_f { reduced } else { greedy };
    let final_gradient_ratio = if l2_final > 0.0 {
        let g = obj.gradient(&obj.layout.encode(reduced.components())?);
        g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (2.0 * l2_final * l2_final)
    } else {
        0.0
    };
    Ok(ReductionReport {
        reduced,
        l2_before_refine,
        l2_final,
        refine_iterations: iterations,
        l2_trace: trace,
        final_gradient_ratio,
        used_pattern_search,
    })
}

/// Damped Newton iterations with a central-difference Hessian of the
/// finite-difference gradient. Stops when a step improves by less than the
/// relative threshold or no damping yields a decrease.
fn newton_polish(
    obj: &Objective,
    mut theta: Vec<f64>,
    mut f: f64,
    budget: usize,
    trace: &mut Vec<f64>,
) -> (Vec<f64>, f64, usize) {
    let n = theta.len();
    let mut used = 0;
    while used < budget && f > 0.0 {
        let grad = DVector::from_vec(obj.gradient(&theta));
        let mut hess = DMatrix::zeros(n, n);
        let mut t = theta.clone();
        for i in 0..n {
            let h = FD_STEP * theta[i].abs().max(1.0);
            t[i] = theta[i] + h;
            let up = obj.gradient(&t);
            t[i] = theta[i] - h;
            let down = obj.gradient(&t);
            t[i] = theta[i];
            for j in 0..n {
                hess[(i, j)] = (up[j] - down[j]) / (2.0 * h);
            }
        }
        let hess = symmetrize(&hess);
        let scale = hess.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut mu = 0.0;
        let mut accepted = None;
        for _ in 0..30 {
            let damped = &hess + DMatrix::identity(n, n) * mu;
            if let Some(ch) = damped.cholesky() {
                let step = ch.solve(&(-&grad));
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let fc = obj.eval(&cand);
                if fc.is_finite() && fc < f {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
        }
        let Some((next, f_next)) = accepted else {
            break;
        };
        used += 1;
        let improvement = (f - f_next) / f;
        theta = next;
        f = f_next;
        trace.push(f.max(0.0).sqrt());
        if improvement < REL_IMPROVEMENT_STOP {
            break;
        }
    }
    (theta, f, used)
}

/// Compass search: try `±step` along each coordinate, halve the step when no
/// move improves. Returns the parameters, objective and iterations used.
fn pattern_search(
    obj: &Objective,
    mut theta: Vec<f64>,
    mut f: f64,
    budget: usize,
    trace: &mut Vec<f64>,
) -> (Vec<f64>, f64, usize) {
    let mut step = 1e-3;
    let mut used = 0;
    while used < budget && step > 1e-12 {
        used += 1;
        let mut improved = false;
        for i in 0..theta.len() {
            for sign in [1.0, -1.0] {
                let mut cand = theta.clone();
                cand[i] += sign * step * theta[i].abs().max(1.0);
                let fc = obj.eval(&cand);
                if fc < f {
                    theta = cand;
                    f = fc;
                    improved = true;
                    break;
                }
            }
        }
        if improved {
            trace.push(f.max(0.0).sqrt());
        } else {
            step *= 0.5;
        }
    }
    (theta, f, used)
}
