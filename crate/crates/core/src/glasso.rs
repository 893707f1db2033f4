//! Group Lasso solvers.
//!
//! The squared-loss objective is
//!
//! ```text
//! (1/n)‖y − Φβ‖² + λ Σ_j w_j ‖β^j‖,    w_j = √p^j
//! ```
//!
//! solved by cyclic block coordinate descent. On a whitened design each block
//! subproblem has the closed form `β^j = S((1/n)Φ_jᵀ r_j, λ w_j / 2)` with `S`
//! the group soft-threshold. Non-orthonormal blocks (used by the kernel
//! estimator) are solved exactly through an eigendecomposition of the block
//! Gram matrix and a scalar secular equation.
//!
//! Tall designs run the sweeps on `(1/n)ΦᵀΦ`, shared across concepts, and
//! interleave damped Newton steps on the active groups. Strongly correlated
//! inputs keep almost every group active at small λ, where plain cyclic
//! sweeps converge very slowly.
//!
//! A returned fit is always certified: its KKT residual is at most
//! [`SolverOptions::kkt_tol`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleMatrix;
use crate::features::{standardization_defect, FeatureExpansion, GroupStructure};
use crate::par_map;

/// Tolerance on `‖(1/n)Φ_jᵀΦ_j − I‖_F` accepted as "standardized".
pub const STANDARDIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlassoError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("design is not standardized per group (deviation {deviation:.3e})")]
    NotStandardized { deviation: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver did not converge in {iterations} iterations (KKT residual {kkt_residual:.3e})")]
    NotConverged {
        coefficients: Vec<f64>,
        kkt_residual: f64,
        iterations: usize,
    },
    #[error("logistic target must contain both classes")]
    SingleClass,
    #[error("logistic target must be 0/1, found {0}")]
    NotBinary(f64),
    #[error("concept {concept}: {source}")]
    Concept {
        concept: usize,
        #[source]
        source: Box<GlassoError>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative objective change that counts as stalled.
    pub tol: f64,
    /// Sweeps (BCD) or iterations (proximal gradient).
    pub max_sweeps: usize,
    pub kkt_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
            kkt_tol: 1e-6,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<(), GlassoError> {
        if !(self.tol > 0.0) || self.max_sweeps == 0 || !(self.kkt_tol > 0.0) {
            return Err(GlassoError::Domain(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

/// One squared-loss Group Lasso instance. Group weights are always `√p^j`.
#[derive(Clone, Copy, Debug)]
pub struct GroupLassoProblem<'a> {
    pub design: &'a DMatrix<f64>,
    pub target: &'a DVector<f64>,
    pub groups: &'a GroupStructure,
    pub lambda: f64,
}

impl GroupLassoProblem<'_> {
    pub fn group_weights(&self) -> Vec<f64> {
        sqrt_size_weights(self.groups)
    }

    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let r = self.target - self.design * beta;
        squared_objective(&r, beta, self.groups, &self.group_weights(), self.lambda)
    }

    fn check_dims(&self) -> Result<(), GlassoError> {
        if self.design.nrows() != self.target.len() {
            return Err(GlassoError::Dimension(format!(
                "design has {} rows, target has {}",
                self.design.nrows(),
                self.target.len()
            )));
        }
        if self.design.ncols() != self.groups.total() {
            return Err(GlassoError::Dimension(format!(
                "design has {} columns, groups cover {}",
                self.design.ncols(),
                self.groups.total()
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(GlassoError::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoFit {
    pub coefficients: DVector<f64>,
    /// Unpenalized offset; only the logistic solver estimates one.
    pub intercept: f64,
    pub group_norms: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub active_groups: Vec<usize>,
    /// Objective after each sweep (BCD) or accepted iterate (logistic).
    pub objective_history: Vec<f64>,
}

impl GroupLassoFit {
    fn finish(
        coefficients: DVector<f64>,
        intercept: f64,
        groups: &GroupStructure,
        objective_history: Vec<f64>,
        iterations: usize,
        kkt_residual: f64,
    ) -> Self {
        let group_norms = block_norms(&coefficients, groups);
        let active_groups = group_norms
            .iter()
            .enumerate()
            .filter(|(_, n)| **n > 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            coefficients,
            intercept,
            group_norms,
            objective: *objective_history.last().unwrap(),
            iterations,
            kkt_residual,
            active_groups,
            objective_history,
        }
    }
}

pub(crate) fn sqrt_size_weights(groups: &GroupStructure) -> Vec<f64> {
    (0..groups.len()).map(|j| (groups.size(j) as f64).sqrt()).collect()
}

pub fn block_norms(beta: &DVector<f64>, groups: &GroupStructure) -> Vec<f64> {
    (0..groups.len())
        .map(|j| {
            let r = groups.range(j);
            beta.rows(r.start, r.len()).norm()
        })
        .collect()
}

fn squared_objective(r: &DVector<f64>, beta: &DVector<f64>, groups: &GroupStructure, weights: &[f64], lambda: f64) -> f64 {
    let n = r.len() as f64;
    let penalty: f64 = block_norms(beta, groups)
        .iter()
        .zip(weights)
        .map(|(b, w)| w * b)
        .sum();
    r.norm_squared() / n + lambda * penalty
}

/// Noise-calibrated regularization scale
/// `λ₀ = (2σ/√n)·√(1 + √(8 log(d/δ)/p_min) + 8 log(d/δ)/p_min)`.
///
/// The usual choice is `λ = 4λ₀`.
pub fn lambda0(sigma: f64, n: usize, p_min: usize, d: usize, delta: f64) -> Result<f64, GlassoError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(GlassoError::Domain(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(sigma > 0.0) || n == 0 || p_min == 0 || d == 0 {
        return Err(GlassoError::Domain(format!(
            "need sigma > 0 and n, p_min, d >= 1 (sigma={sigma}, n={n}, p_min={p_min}, d={d})"
        )));
    }
    let q = 8.0 * (d as f64 / delta).ln() / p_min as f64;
    Ok(2.0 * sigma / (n as f64).sqrt() * (1.0 + q.sqrt() + q).sqrt())
}

/// Proximal operator of `t‖·‖`: `(1 − t/‖z‖)₊ z`. Returns zero when `‖z‖ ≤ t`.
pub fn group_soft_threshold(z: &DVector<f64>, t: f64) -> DVector<f64> {
    let norm = z.norm();
    if norm <= t {
        DVector::zeros(z.len())
    } else {
        z * (1.0 - t / norm)
    }
}

/// Exact solver for one block subproblem `min bᵀAb − 2zᵀb + 2t‖b‖`, with `A`
/// given by its eigendecomposition.
#[derive(Clone, Debug)]
pub(crate) struct BlockSolver {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl BlockSolver {
    pub(crate) fn new(block_gram: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(block_gram);
        Self {
            eigenvalues: eig.eigenvalues.map(|e| e.max(0.0)),
            eigenvectors: eig.eigenvectors,
        }
    }

    pub(crate) fn solve(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        let norm = z.norm();
        if norm <= t {
            return DVector::zeros(z.len());
        }
        let zt = self.eigenvectors.tr_mul(z);
        let e = &self.eigenvalues;
        // ‖b‖ = s solves Σ z̃²/(e s + t)² = 1; g(s) = S(s)^{-1/2} − 1 is
        // increasing with g(0) < 0 and nearly linear, so safeguarded Newton.
        let g = |s: f64| -> (f64, f64) {
            let mut sum = 0.0;
            let mut dsum = 0.0;
            for k in 0..zt.len() {
                let den = e[k] * s + t;
                sum += zt[k] * zt[k] / (den * den);
                dsum += -2.0 * zt[k] * zt[k] * e[k] / (den * den * den);
            }
            let root = sum.sqrt();
            (1.0 / root - 1.0, -0.5 * dsum / (sum * root))
        };
        let mut lo = 0.0;
        let mut hi = (norm - t) / e.max().max(f64::MIN_POSITIVE);
        let mut doublings = 0;
        while g(hi).0 < 0.0 && doublings < 200 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
        }
        let mut s = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (val, der) = g(s);
            if val.abs() < 1e-15 {
                break;
            }
            if val < 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let newton = s - val / der;
            s = if der > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        let bt = DVector::from_iterator(zt.len(), (0..zt.len()).map(|k| zt[k] * s / (e[k] * s + t)));
        &self.eigenvectors * bt
    }
}

pub(crate) enum Blocks<'a> {
    /// Every `(1/n)Φ_jᵀΦ_j` is the identity.
    Orthonormal,
    General(&'a [BlockSolver]),
}

/// Cyclic BCD for `(1/n)‖y − Φβ‖² + λ Σ w_j ‖β^j‖`.
///
/// With `gram = Some((1/n)ΦᵀΦ)` the sweeps run on `q = (1/n)Φᵀr` instead of
/// the residual and are interleaved with Newton steps on the active set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_coordinate_descent(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &GroupStructure,
    weights: &[f64],
    lambda: f64,
    blocks: Blocks<'_>,
    gram: Option<&DMatrix<f64>>,
    opts: &SolverOptions,
) -> Result<GroupLassoFit, GlassoError> {
    opts.validate()?;
    if let Some(g) = gram {
        return gram_descent(design, y, groups, weights, lambda, blocks, g, opts);
    }
    let n = design.nrows() as f64;
    let mut beta = DVector::zeros(design.ncols());
    let mut r = y.clone();
    let mut history = vec![squared_objective(&r, &beta, groups, weights, lambda)];
    let mut kkt = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        for j in 0..groups.len() {
            let range = groups.range(j);
            let block = design.columns(range.start, range.len());
            let old = beta.rows(range.start, range.len()).into_owned();
            let t = lambda * weights[j] / 2.0;
            let new = match &blocks {
                Blocks::Orthonormal => {
                    let z = block.tr_mul(&r) / n + &old;
                    group_soft_threshold(&z, t)
                }
                Blocks::General(solvers) => {
                    let partial = &r + block * &old;
                    let z = block.tr_mul(&partial) / n;
                    solvers[j].solve(&z, t)
                }
            };
            let delta = &new - &old;
            if delta.iter().any(|v| *v != 0.0) {
                r -= block * &delta;
                beta.rows_mut(range.start, range.len()).copy_from(&new);
            }
        }
        let obj = squared_objective(&r, &beta, groups, weights, lambda);
        let prev = *history.last().unwrap();
        history.push(obj);
        if prev - obj <= opts.tol * obj.abs().max(f64::MIN_POSITIVE) {
            kkt = squared_kkt(design, &r, &beta, groups, weights, lambda);
            if kkt <= opts.kkt_tol {
                return Ok(GroupLassoFit::finish(beta, 0.0, groups, history, sweep, kkt));
            }
        }
        if sweep % 64 == 0 {
            // Re-synchronize the running residual with the iterate.
            r = y - design * &beta;
        }
    }
    if kkt.is_infinite() {
        kkt = squared_kkt(design, &r, &beta, groups, weights, lambda);
    }
    Err(GlassoError::NotConverged {
        coefficients: beta.as_slice().to_vec(),
        kkt_residual: kkt,
        iterations: opts.max_sweeps,
    })
}

/// Sweeps before the first Newton polish, and between later ones.
const NEWTON_FIRST: usize = 20;
const NEWTON_EVERY: usize = 50;
const NEWTON_STEPS: usize = 30;

fn penalty(beta: &DVector<f64>, groups: &GroupStructure, weights: &[f64]) -> f64 {
    block_norms(beta, groups).iter().zip(weights).map(|(b, w)| w * b).sum()
}

#[allow(clippy::too_many_arguments)]
fn gram_descent(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &GroupStructure,
    weights: &[f64],
    lambda: f64,
    blocks: Blocks<'_>,
    g: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<GroupLassoFit, GlassoError> {
    let n = design.nrows() as f64;
    let mut beta = DVector::zeros(design.ncols());
    let mut q = design.tr_mul(y) / n;
    let mut obj = y.norm_squared() / n;
    let mut history = vec![obj];
    let mut steps = 0;
    let mut kkt = f64::INFINITY;
    // Exact residual-based refresh of q and the objective.
    let resync = |beta: &DVector<f64>, q: &mut DVector<f64>| -> f64 {
        let r = y - design * beta;
        *q = design.tr_mul(&r) / n;
        r.norm_squared() / n + lambda * penalty(beta, groups, weights)
    };
    for sweep in 1..=opts.max_sweeps {
        steps += 1;
        let mut decrease = 0.0;
        for j in 0..groups.len() {
            let range = groups.range(j);
            let (s, p) = (range.start, range.len());
            let old = beta.rows(s, p).into_owned();
            let qj = q.rows(s, p).into_owned();
            let t = lambda * weights[j] / 2.0;
            let new = match &blocks {
                Blocks::Orthonormal => group_soft_threshold(&(&qj + &old), t),
                Blocks::General(solvers) => solvers[j].solve(&(&qj + g.view((s, s), (p, p)) * &old), t),
            };
            let delta = &new - &old;
            if delta.iter().any(|v| *v != 0.0) {
                let dq = g.columns(s, p) * &delta;
                decrease += 2.0 * delta.dot(&qj) - delta.dot(&dq.rows(s, p))
                    - lambda * weights[j] * (new.norm() - old.norm());
                q -= dq;
                beta.rows_mut(s, p).copy_from(&new);
            }
        }
        obj -= decrease;
        if sweep % 64 == 0 {
            obj = resync(&beta, &mut q);
        }
        history.push(obj);
        if decrease <= opts.tol * obj.abs().max(f64::MIN_POSITIVE)
            && stationarity_gap(&(&q * 2.0), &beta, groups, weights, lambda) <= opts.kkt_tol
        {
            obj = resync(&beta, &mut q);
            kkt = stationarity_gap(&(&q * 2.0), &beta, groups, weights, lambda);
            *history.last_mut().unwrap() = obj;
            if kkt <= opts.kkt_tol {
                return Ok(GroupLassoFit::finish(beta, 0.0, groups, history, steps, kkt));
            }
        }
        if sweep >= NEWTON_FIRST && (sweep - NEWTON_FIRST).is_multiple_of(NEWTON_EVERY) {
            steps += newton_polish(g, &mut beta, &mut q, &mut obj, groups, weights, lambda, opts.kkt_tol, &mut history);
        }
    }
    if kkt.is_infinite() {
        resync(&beta, &mut q);
        kkt = stationarity_gap(&(&q * 2.0), &beta, groups, weights, lambda);
    }
    Err(GlassoError::NotConverged {
        coefficients: beta.as_slice().to_vec(),
        kkt_residual: kkt,
        iterations: opts.max_sweeps,
    })
}

/// Damped Newton on the groups that are currently nonzero, where the
/// objective is smooth. Inactive groups stay at zero; a group heading to zero
/// stalls the line search and is left for the next sweeps. Returns the number
/// of accepted steps.
#[allow(clippy::too_many_arguments)]
fn newton_polish(
    g: &DMatrix<f64>,
    beta: &mut DVector<f64>,
    q: &mut DVector<f64>,
    obj: &mut f64,
    groups: &GroupStructure,
    weights: &[f64],
    lambda: f64,
    kkt_tol: f64,
    history: &mut Vec<f64>,
) -> usize {
    let active: Vec<usize> = (0..groups.len())
        .filter(|&j| {
            let r = groups.range(j);
            beta.rows(r.start, r.len()).norm() > 0.0
        })
        .collect();
    if active.is_empty() {
        return 0;
    }
    // Local layout: active block `a` occupies `offsets[a]..offsets[a + 1]`.
    let mut cols = vec![];
    let mut offsets = vec![0];
    for &j in &active {
        cols.extend(groups.range(j));
        offsets.push(cols.len());
    }
    let k = cols.len();
    let g_cols = DMatrix::from_fn(g.nrows(), k, |i, b| g[(i, cols[b])]);
    let g_aa = DMatrix::from_fn(k, k, |a, b| g_cols[(cols[a], b)]);
    let mut b = DVector::from_iterator(k, cols.iter().map(|&i| beta[i]));
    let block_penalty = |v: &DVector<f64>| -> f64 {
        active
            .iter()
            .enumerate()
            .map(|(a, &j)| weights[j] * v.rows(offsets[a], offsets[a + 1] - offsets[a]).norm())
            .sum()
    };
    let mut taken = 0;
    for _ in 0..NEWTON_STEPS {
        let q_a = DVector::from_iterator(k, cols.iter().map(|&i| q[i]));
        let mut grad = &q_a * -2.0;
        let mut hess = &g_aa * 2.0;
        let mut worst: f64 = 0.0;
        for (a, &j) in active.iter().enumerate() {
            let (s, p) = (offsets[a], offsets[a + 1] - offsets[a]);
            let bj = b.rows(s, p).into_owned();
            let norm = bj.norm();
            if norm == 0.0 {
                return taken;
            }
            let scale = lambda * weights[j] / norm;
            let mut gj = grad.rows_mut(s, p);
            gj += &bj * scale;
            worst = worst.max(gj.norm());
            let u = &bj / norm;
            let mut h = hess.view_mut((s, s), (p, p));
            h += (DMatrix::identity(p, p) - &u * u.transpose()) * scale;
        }
        if worst <= 1e-2 * kkt_tol {
            break;
        }
        let Some(chol) = hess.cholesky() else {
            break;
        };
        let dir = chol.solve(&grad);
        let slope = grad.dot(&dir);
        if !(slope > 0.0) {
            break;
        }
        let base_pen = block_penalty(&b);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let delta = &dir * -t;
            let cand = &b + &delta;
            let change = delta.dot(&(&g_aa * &delta)) - 2.0 * delta.dot(&q_a) + lambda * (block_penalty(&cand) - base_pen);
            if change <= -1e-4 * t * slope {
                accepted = Some((cand, delta, change));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, delta, change)) = accepted else {
            break;
        };
        *q -= &g_cols * &delta;
        *obj += change;
        b = cand;
        for (a, &i) in cols.iter().enumerate() {
            beta[i] = b[a];
        }
        history.push(*obj);
        taken += 1;
    }
    taken
}

fn squared_kkt(
    design: &DMatrix<f64>,
    r: &DVector<f64>,
    beta: &DVector<f64>,
    groups: &GroupStructure,
    weights: &[f64],
    lambda: f64,
) -> f64 {
    // Negative gradient of the data term, `(2/n)Φᵀr`.
    let grad = design.tr_mul(r) * (2.0 / design.nrows() as f64);
    stationarity_gap(&grad, beta, groups, weights, lambda)
}

/// Max over groups of the optimality-condition violation for
/// `grad^j = scale·w_j·β^j/‖β^j‖` (active) or `‖grad^j‖ ≤ scale·w_j` (zero).
fn stationarity_gap(grad: &DVector<f64>, beta: &DVector<f64>, groups: &GroupStructure, weights: &[f64], scale: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, w) in weights.iter().enumerate().take(groups.len()) {
        let range = groups.range(j);
        let g = grad.rows(range.start, range.len());
        let b = beta.rows(range.start, range.len());
        let bn = b.norm();
        let t = scale * w;
        let gap = if bn > 0.0 {
            (g - b * (t / bn)).norm()
        } else {
            (g.norm() - t).max(0.0)
        };
        worst = worst.max(gap);
    }
    worst
}

/// KKT residual of `beta` for the squared-loss problem.
pub fn kkt_residual(problem: &GroupLassoProblem<'_>, beta: &DVector<f64>) -> f64 {
    let r = problem.target - problem.design * beta;
    squared_kkt(problem.design, &r, beta, problem.groups, &problem.group_weights(), problem.lambda)
}

/// Solves a squared-loss Group Lasso on a per-group whitened design.
pub fn fit_group_lasso(problem: &GroupLassoProblem<'_>, opts: &SolverOptions) -> Result<GroupLassoFit, GlassoError> {
    problem.check_dims()?;
    let (deviation, _) = standardization_defect(problem.design, problem.groups);
    if !(deviation <= STANDARDIZATION_TOL) {
        return Err(GlassoError::NotStandardized { deviation });
    }
    let gram = gram_if_tall(problem.design);
    block_coordinate_descent(
        problem.design,
        problem.target,
        problem.groups,
        &problem.group_weights(),
        problem.lambda,
        Blocks::Orthonormal,
        gram.as_ref(),
        opts,
    )
}

/// `(1/n)ΦᵀΦ` when it is no larger than the design itself.
pub(crate) fn gram_if_tall(design: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    (design.ncols() <= design.nrows()).then(|| {
        let mut g = design.tr_mul(design) / design.nrows() as f64;
        // Exact symmetry keeps the Cholesky in the Newton steps happy.
        g.fill_lower_triangle_with_upper_triangle();
        g
    })
}

/// `d_c × d_groups` matrix of fitted group norms, `N[i][j] = ‖β̂_i^j‖`.
pub type GroupNormMatrix = DMatrix<f64>;

/// One Group Lasso per concept column against the shared standardized design.
pub fn fit_all_concepts(
    phi: &FeatureExpansion,
    concepts: &SampleMatrix,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(GroupNormMatrix, Vec<GroupLassoFit>), GlassoError> {
    if concepts.nrows() != phi.nrows() {
        return Err(GlassoError::Dimension(format!(
            "{} concept rows vs {} design rows",
            concepts.nrows(),
            phi.nrows()
        )));
    }
    let (deviation, _) = standardization_defect(&phi.design, &phi.groups);
    if !(deviation <= STANDARDIZATION_TOL) {
        return Err(GlassoError::NotStandardized { deviation });
    }
    let gram = gram_if_tall(&phi.design);
    let weights = sqrt_size_weights(&phi.groups);
    let idx: Vec<usize> = (0..concepts.ncols()).collect();
    let fits = par_map(&idx, |&i| {
        let y = concepts.column_vector(i);
        let problem = GroupLassoProblem {
            design: &phi.design,
            target: &y,
            groups: &phi.groups,
            lambda,
        };
        problem
            .check_dims()
            .and_then(|_| {
                block_coordinate_descent(
                    &phi.design,
                    &y,
                    &phi.groups,
                    &weights,
                    lambda,
                    Blocks::Orthonormal,
                    gram.as_ref(),
                    opts,
                )
            })
            .map_err(|e| GlassoError::Concept {
                concept: i,
                source: Box::new(e),
            })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok((norm_matrix(&fits, phi.groups.len()), fits))
}

pub(crate) fn norm_matrix(fits: &[GroupLassoFit], groups: usize) -> GroupNormMatrix {
    DMatrix::from_fn(fits.len(), groups, |i, j| fits[i].group_norms[j])
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Logistic<'a> {
    design: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    groups: &'a GroupStructure,
    weights: Vec<f64>,
    lambda: f64,
}

impl Logistic<'_> {
    fn n(&self) -> f64 {
        self.design.nrows() as f64
    }

    fn linear(&self, b0: f64, beta: &DVector<f64>) -> DVector<f64> {
        (self.design * beta).add_scalar(b0)
    }

    fn objective(&self, b0: f64, beta: &DVector<f64>) -> f64 {
        let eta = self.linear(b0, beta);
        let loss: f64 = eta
            .iter()
            .zip(self.y.iter())
            .map(|(e, y)| softplus(-(2.0 * y - 1.0) * e))
            .sum::<f64>()
            / self.n();
        let penalty: f64 = block_norms(beta, self.groups)
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| b * w)
            .sum();
        loss + self.lambda * penalty
    }

    /// Gradient of the smooth part: (d/db0, d/dβ).
    fn gradient(&self, b0: f64, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = self.linear(b0, beta);
        let resid = DVector::from_iterator(eta.len(), eta.iter().zip(self.y.iter()).map(|(e, y)| sigmoid(*e) - y));
        (resid.mean(), self.design.tr_mul(&resid) / self.n())
    }

    fn prox(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        let mut out = v.clone();
        for j in 0..self.groups.len() {
            let r = self.groups.range(j);
            let block = v.rows(r.start, r.len()).into_owned();
            out.rows_mut(r.start, r.len())
                .copy_from(&group_soft_threshold(&block, step * self.lambda * self.weights[j]));
        }
        out
    }

    fn kkt(&self, b0: f64, beta: &DVector<f64>) -> f64 {
        let (g0, g) = self.gradient(b0, beta);
        stationarity_gap(&(-g), beta, self.groups, &self.weights, self.lambda).max(g0.abs())
    }
}

/// Logistic Group Lasso with an unpenalized intercept:
///
/// `(1/n) Σ log(1 + exp(−ỹ_ℓ (b₀ + Φβ)_ℓ)) + λ Σ_j √p^j ‖β^j‖`, `ỹ = 2y − 1`,
///
/// by accelerated proximal gradient with fixed step `4n/‖[1 Φ]‖²_op` and a
/// momentum restart whenever the objective would increase.
pub fn fit_logistic_group_lasso(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &GroupStructure,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<GroupLassoFit, GlassoError> {
    opts.validate()?;
    if design.nrows() != y.len() || design.ncols() != groups.total() {
        return Err(GlassoError::Dimension(format!(
            "design {}x{}, target {}, groups cover {}",
            design.nrows(),
            design.ncols(),
            y.len(),
            groups.total()
        )));
    }
    if let Some(bad) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(GlassoError::NotBinary(*bad));
    }
    let positives = y.sum();
    if positives == 0.0 || positives == y.len() as f64 {
        return Err(GlassoError::SingleClass);
    }
    if !(lambda >= 0.0) {
        return Err(GlassoError::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let prob = Logistic {
        design,
        y,
        groups,
        weights: sqrt_size_weights(groups),
        lambda,
    };
    let n = prob.n();
    let step = 4.0 * n / augmented_operator_norm_sq(design);

    let mut b0 = 0.0;
    let mut beta = DVector::zeros(design.ncols());
    let mut m0 = b0;
    let mut mom = beta.clone();
    let mut t: f64 = 1.0;
    let mut history = vec![prob.objective(b0, &beta)];
    let mut kkt = f64::INFINITY;
    for iter in 1..=opts.max_sweeps {
        let (g0, g) = prob.gradient(m0, &mom);
        let mut nb0 = m0 - step * g0;
        let mut nbeta = prob.prox(&(&mom - &g * step), step);
        let mut obj = prob.objective(nb0, &nbeta);
        let prev = *history.last().unwrap();
        if obj > prev {
            // Restart from the last accepted iterate with a plain prox step.
            t = 1.0;
            let (g0, g) = prob.gradient(b0, &beta);
            nb0 = b0 - step * g0;
            nbeta = prob.prox(&(&beta - &g * step), step);
            obj = prob.objective(nb0, &nbeta);
            if obj > prev {
                // Rounding only; keep the accepted point.
                nb0 = b0;
                nbeta = beta.clone();
                obj = prev;
            }
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / t_next;
        m0 = nb0 + w * (nb0 - b0);
        mom = &nbeta + (&nbeta - &beta) * w;
        t = t_next;
        b0 = nb0;
        beta = nbeta;
        history.push(obj);
        if prev - obj <= opts.tol * obj.abs().max(f64::MIN_POSITIVE) {
            kkt = prob.kkt(b0, &beta);
            if kkt <= opts.kkt_tol {
                return Ok(GroupLassoFit::finish(beta, b0, groups, history, iter, kkt));
            }
        }
    }
    if kkt.is_infinite() {
        kkt = prob.kkt(b0, &beta);
    }
    Err(GlassoError::NotConverged {
        coefficients: beta.as_slice().to_vec(),
        kkt_residual: kkt,
        iterations: opts.max_sweeps,
    })
}

/// Largest eigenvalue of `[1 Φ]ᵀ[1 Φ]`.
fn augmented_operator_norm_sq(design: &DMatrix<f64>) -> f64 {
    let n = design.nrows();
    let p = design.ncols();
    let mut aug = DMatrix::zeros(n, p + 1);
    aug.column_mut(0).fill(1.0);
    aug.columns_mut(1, p).copy_from(design);
    let gram = aug.tr_mul(&aug);
    SymmetricEigen::new(gram).eigenvalues.max().max(f64::MIN_POSITIVE)
}
