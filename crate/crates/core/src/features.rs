//! Element-wise feature maps for machine variables and per-group whitening.
//!
//! Every machine variable `M_j` is expanded by the same scalar feature map into
//! a block of `p^j` columns. Blocks are then centered and decorrelated so that
//! `(1/n) Φ_jᵀ Φ_j = I`, which is what makes the Group Lasso block updates
//! exact.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleMatrix;
use crate::par_map;

/// Relative eigenvalue floor below which a group covariance counts as singular.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("zero-width knot range")]
    ZeroWidthRange,
    #[error("spline needs knots >= 2 and degree >= 1 (got knots={knots}, degree={degree})")]
    SplineShape { knots: usize, degree: usize },
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("random Fourier features need p >= 1 and gamma > 0 (got p={p}, gamma={gamma})")]
    RffShape { p: usize, gamma: f64 },
    #[error("non-finite input value")]
    NonFinite,
    #[error("column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<FeatureError>,
    },
    #[error("identifiability fails within group {group}: covariance eigenvalue ratio {ratio:.3e}")]
    RankDeficient { group: usize, ratio: f64 },
    #[error("group {group} has {size} features but only {n} samples")]
    GroupTooWide { group: usize, size: usize, n: usize },
    #[error("expected {expected} machine variables, got {found}")]
    ColumnCount { expected: usize, found: usize },
}

/// Which scalar feature map to apply to each machine variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Identity,
    Spline { knots: usize, degree: usize },
    Rff { count: usize, gamma: f64, seed: u64 },
}

impl FeatureSpec {
    /// Number of design columns produced per machine variable.
    ///
    /// Spline blocks drop the last of the `knots + degree − 1` basis
    /// functions: the full basis sums to one and is rank-deficient once
    /// centered.
    pub fn features_per_variable(&self) -> usize {
        match *self {
            FeatureSpec::Identity => 1,
            FeatureSpec::Spline { knots, degree } => knots + degree - 2,
            FeatureSpec::Rff { count, .. } => count,
        }
    }
}

/// Uniform B-spline basis on `[lo, lo + step·(knots−1)]`, extended outside the
/// range by the boundary polynomial pieces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub lo: f64,
    pub step: f64,
    pub knots: usize,
    pub degree: usize,
}

impl SplineBasis {
    pub fn fit(x: &[f64], knots: usize, degree: usize) -> Result<Self, FeatureError> {
        if knots < 2 || degree < 1 {
            return Err(FeatureError::SplineShape { knots, degree });
        }
        if x.len() < 2 {
            return Err(FeatureError::TooFewSamples {
                needed: 2,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Err(FeatureError::ZeroWidthRange);
        }
        Ok(Self {
            lo,
            step: (hi - lo) / (knots - 1) as f64,
            knots,
            degree,
        })
    }

    pub fn len(&self) -> usize {
        self.knots + self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn knot(&self, i: usize) -> f64 {
        self.lo + (i as f64 - self.degree as f64) * self.step
    }

    /// Writes the basis values at `x` into `out` (length `self.len()`).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let p = self.degree;
        out.iter_mut().for_each(|v| *v = 0.0);
        let last_span = self.knots - 2;
        let pos = ((x - self.lo) / self.step).floor();
        let span = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(last_span)
        };
        let mu = span + p;
        // Cox-de Boor triangle for a fixed span; valid off-span as the
        // polynomial continuation of that piece.
        let mut basis = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        basis[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knot(mu + 1 - j);
            right[j] = self.knot(mu + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = basis[r] / (right[r + 1] + left[j - r]);
                basis[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            basis[j] = saved;
        }
        out[span..span + p + 1].copy_from_slice(&basis);
    }

    pub fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(x.len(), self.len());
        let mut row = vec![0.0; self.len()];
        for (i, &xi) in x.iter().enumerate() {
            self.eval_into(xi, &mut row);
            for (t, v) in row.iter().enumerate() {
                m[(i, t)] = *v;
            }
        }
        m
    }
}

/// B-spline features with `knots` uniformly spaced knots over `[min(x), max(x)]`.
pub fn spline_features(x: &[f64], knots: usize, degree: usize) -> Result<DMatrix<f64>, FeatureError> {
    Ok(SplineBasis::fit(x, knots, degree)?.matrix(x))
}

/// Frequencies and phases of a random Fourier feature map for `exp(-γ(x−y)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis {
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl FourierBasis {
    pub fn sample(p: usize, gamma: f64, seed: u64, stream: u64) -> Result<Self, FeatureError> {
        if p == 0 || !(gamma > 0.0) {
            return Err(FeatureError::RffShape { p, gamma });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, (2.0 * gamma).sqrt()).expect("positive std");
        let omega = (0..p).map(|_| normal.sample(&mut rng)).collect();
        let phase = (0..p)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(Self { omega, phase })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn matrix(&self, x: &[f64]) -> Result<DMatrix<f64>, FeatureError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        let scale = (2.0 / self.len() as f64).sqrt();
        Ok(DMatrix::from_fn(x.len(), self.len(), |i, t| {
            scale * (self.omega[t] * x[i] + self.phase[t]).cos()
        }))
    }
}

/// Random Fourier features `√(2/p)·cos(ω_t x + b_t)` approximating the RBF kernel.
pub fn rff_features(x: &[f64], p: usize, gamma: f64, seed: u64) -> Result<DMatrix<f64>, FeatureError> {
    FourierBasis::sample(p, gamma, seed, 0)?.matrix(x)
}

/// A feature map fitted to one training column, reusable on new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnMap {
    Identity,
    Spline(SplineBasis),
    Rff(FourierBasis),
}

impl ColumnMap {
    pub fn fit(spec: &FeatureSpec, x: &[f64], column: usize) -> Result<Self, FeatureError> {
        match *spec {
            FeatureSpec::Identity => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(FeatureError::NonFinite);
                }
                Ok(ColumnMap::Identity)
            }
            FeatureSpec::Spline { knots, degree } => {
                SplineBasis::fit(x, knots, degree).map(ColumnMap::Spline)
            }
            FeatureSpec::Rff { count, gamma, seed } => {
                FourierBasis::sample(count, gamma, seed, column as u64).map(ColumnMap::Rff)
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ColumnMap::Identity => 1,
            ColumnMap::Spline(s) => s.len() - 1,
            ColumnMap::Rff(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, x: &[f64]) -> Result<DMatrix<f64>, FeatureError> {
        match self {
            ColumnMap::Identity => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(FeatureError::NonFinite);
                }
                Ok(DMatrix::from_column_slice(x.len(), 1, x))
            }
            ColumnMap::Spline(s) => {
                let full = s.matrix(x);
                Ok(full.columns(0, s.len() - 1).into_owned())
            }
            ColumnMap::Rff(f) => f.matrix(x),
        }
    }
}

/// Partition of design columns into contiguous groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStructure {
    offsets: Vec<usize>,
}

impl GroupStructure {
    /// Groups of the given sizes laid out left to right. Sizes must be ≥ 1.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        assert!(sizes.iter().all(|&s| s >= 1), "group sizes must be positive");
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Self { offsets }
    }

    pub fn uniform(groups: usize, size: usize) -> Self {
        Self::from_sizes(&vec![size; groups])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn size(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.len()).map(|j| self.size(j)).collect()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn p_min(&self) -> usize {
        (0..self.len()).map(|j| self.size(j)).min().unwrap_or(0)
    }

    pub fn p_max(&self) -> usize {
        (0..self.len()).map(|j| self.size(j)).max().unwrap_or(0)
    }
}

/// Affine whitening `y = (x − mean)·whitening` recorded for one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTransform {
    pub mean: DVector<f64>,
    pub whitening: DMatrix<f64>,
}

impl GroupTransform {
    pub fn apply(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = block.clone();
        for (t, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[t]);
        }
        centered * &self.whitening
    }
}

/// Design matrix `[φ(M_1) | … | φ(M_d)]` with its fitted maps and, once
/// standardized, the per-group whitening transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExpansion {
    pub design: DMatrix<f64>,
    pub groups: GroupStructure,
    pub maps: Vec<ColumnMap>,
    pub transforms: Option<Vec<GroupTransform>>,
}

impl FeatureExpansion {
    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    pub fn is_standardized(&self) -> bool {
        self.transforms.is_some()
    }

    pub fn block(&self, j: usize) -> DMatrix<f64> {
        let r = self.groups.range(j);
        self.design.columns(r.start, r.len()).into_owned()
    }

    /// Maps one new column of machine variable `j` through the fitted feature
    /// map and (if present) the group's whitening.
    pub fn map_group(&self, j: usize, x: &[f64]) -> Result<DMatrix<f64>, FeatureError> {
        let raw = self.maps[j].apply(x).map_err(|e| FeatureError::Column {
            column: j,
            source: Box::new(e),
        })?;
        Ok(match &self.transforms {
            Some(ts) => ts[j].apply(&raw),
            None => raw,
        })
    }

    /// Maps new samples exactly as the training data were mapped.
    pub fn map_new(&self, m: &SampleMatrix) -> Result<DMatrix<f64>, FeatureError> {
        if m.ncols() != self.maps.len() {
            return Err(FeatureError::ColumnCount {
                expected: self.maps.len(),
                found: m.ncols(),
            });
        }
        let blocks = (0..m.ncols())
            .map(|j| self.map_group(j, m.column(j)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(hstack(m.nrows(), &blocks))
    }
}

pub(crate) fn hstack(n: usize, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Applies `spec` to each column of `m`. No standardization is applied.
pub fn expand(m: &SampleMatrix, spec: &FeatureSpec) -> Result<FeatureExpansion, FeatureError> {
    if m.nrows() < 2 {
        return Err(FeatureError::TooFewSamples {
            needed: 2,
            found: m.nrows(),
        });
    }
    let cols: Vec<usize> = (0..m.ncols()).collect();
    let fitted = par_map(&cols, |&j| {
        let x = m.column(j);
        let map = ColumnMap::fit(spec, x, j)?;
        let block = map.apply(x)?;
        Ok::<_, FeatureError>((map, block))
    });
    let mut maps = Vec::with_capacity(cols.len());
    let mut blocks = Vec::with_capacity(cols.len());
    for (j, r) in fitted.into_iter().enumerate() {
        let (map, block) = r.map_err(|e| FeatureError::Column {
            column: j,
            source: Box::new(e),
        })?;
        maps.push(map);
        blocks.push(block);
    }
    let sizes: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    Ok(FeatureExpansion {
        design: hstack(m.nrows(), &blocks),
        groups: GroupStructure::from_sizes(&sizes),
        maps,
        transforms: None,
    })
}

fn whiten_block(block: &DMatrix<f64>, group: usize) -> Result<GroupTransform, FeatureError> {
    let n = block.nrows();
    let p = block.ncols();
    if n <= p {
        return Err(FeatureError::GroupTooWide { group, size: p, n });
    }
    let mean = DVector::from_iterator(p, block.column_iter().map(|c| c.mean()));
    let mut centered = block.clone();
    for (t, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[t]);
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= EIGEN_FLOOR * max {
        return Err(FeatureError::RankDeficient {
            group,
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let whitening = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    Ok(GroupTransform { mean, whitening })
}

/// Centers every group and right-multiplies it by the symmetric inverse square
/// root of its empirical covariance, so `(1/n) Φ_jᵀ Φ_j = I`.
///
/// Applying this to an already standardized expansion composes the new
/// (near-identity) transform with the recorded one, so new data still map
/// identically.
pub fn standardize_groups(phi: &FeatureExpansion) -> Result<FeatureExpansion, FeatureError> {
    let n = phi.nrows();
    let groups: Vec<usize> = (0..phi.groups.len()).collect();
    let results = par_map(&groups, |&j| {
        let block = phi.block(j);
        let t = whiten_block(&block, j)?;
        let out = t.apply(&block);
        Ok::<_, FeatureError>((t, out))
    });
    let mut transforms = Vec::with_capacity(groups.len());
    let mut blocks = Vec::with_capacity(groups.len());
    for (j, r) in results.into_iter().enumerate() {
        let (t, block) = r?;
        let composed = match &phi.transforms {
            None => t,
            Some(prev) => {
                let old = &prev[j];
                let inv = old
                    .whitening
                    .clone()
                    .try_inverse()
                    .ok_or(FeatureError::RankDeficient { group: j, ratio: 0.0 })?;
                GroupTransform {
                    mean: &old.mean + inv.transpose() * &t.mean,
                    whitening: &old.whitening * &t.whitening,
                }
            }
        };
        transforms.push(composed);
        blocks.push(block);
    }
    Ok(FeatureExpansion {
        design: hstack(n, &blocks),
        groups: phi.groups.clone(),
        maps: phi.maps.clone(),
        transforms: Some(transforms),
    })
}

/// Largest Frobenius deviation of `(1/n) Φ_jᵀ Φ_j` from the identity, and the
/// largest absolute column mean, over all groups.
pub fn standardization_defect(design: &DMatrix<f64>, groups: &GroupStructure) -> (f64, f64) {
    let n = design.nrows() as f64;
    let mut cov_dev: f64 = 0.0;
    let mut mean_dev: f64 = 0.0;
    for j in 0..groups.len() {
        let r = groups.range(j);
        let block = design.columns(r.start, r.len());
        let gram = block.tr_mul(&block) / n;
        let dev = (gram - DMatrix::<f64>::identity(r.len(), r.len())).norm();
        cov_dev = cov_dev.max(dev);
        for c in block.column_iter() {
            mean_dev = mean_dev.max(c.mean().abs());
        }
    }
    (cov_dev, mean_dev)
}

/// Cross-group covariance diagnostics against the incoherence assumption with
/// constant `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceReport {
    pub a: f64,
    /// Largest `|(Σ_jj')_tt|` over group pairs and shared positions `t`.
    pub max_diagonal: f64,
    pub max_diagonal_pair: Option<(usize, usize)>,
    /// Largest `|(Σ_jj')_tt'|` with `t ≠ t'`.
    pub max_off_diagonal: f64,
    pub max_off_diagonal_pair: Option<(usize, usize)>,
    /// `(1/(14a))·√(p_min/p_max)`.
    pub diagonal_bound: f64,
    pub diagonal_ok: bool,
    /// Off-diagonal entries checked against the pair-specific bound
    /// `diagonal_bound / √(p^j p^j')`.
    pub off_diagonal_ok: bool,
}

impl IncoherenceReport {
    pub fn holds(&self) -> bool {
        self.diagonal_ok && self.off_diagonal_ok
    }
}

/// Evaluates the incoherence bounds on a standardized design. Diagnostic only.
pub fn check_incoherence(design: &DMatrix<f64>, groups: &GroupStructure, a: f64) -> IncoherenceReport {
    let n = design.nrows() as f64;
    let sigma = design.tr_mul(design) / n;
    let (p_min, p_max) = (groups.p_min() as f64, groups.p_max() as f64);
    let diagonal_bound = (p_min / p_max).sqrt() / (14.0 * a);
    let mut report = IncoherenceReport {
        a,
        max_diagonal: 0.0,
        max_diagonal_pair: None,
        max_off_diagonal: 0.0,
        max_off_diagonal_pair: None,
        diagonal_bound,
        diagonal_ok: true,
        off_diagonal_ok: true,
    };
    for j in 0..groups.len() {
        for k in 0..groups.len() {
            if j == k {
                continue;
            }
            let (rj, rk) = (groups.range(j), groups.range(k));
            let off_bound = diagonal_bound / ((rj.len() * rk.len()) as f64).sqrt();
            for (t, row) in rj.clone().enumerate() {
                for (u, col) in rk.clone().enumerate() {
                    let v = sigma[(row, col)].abs();
                    if t == u {
                        if v > report.max_diagonal || report.max_diagonal_pair.is_none() {
                            report.max_diagonal = v;
                            report.max_diagonal_pair = Some((j, k));
                        }
                        if v > diagonal_bound {
                            report.diagonal_ok = false;
                        }
                    } else {
                        if v > report.max_off_diagonal || report.max_off_diagonal_pair.is_none() {
                            report.max_off_diagonal = v;
                            report.max_off_diagonal_pair = Some((j, k));
                        }
                        if v > off_bound {
                            report.off_diagonal_ok = false;
                        }
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleMatrix::with_prefix(DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal)), "M")
    }

    #[test]
    fn spline_column_count() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        assert_eq!(spline_features(&x, 4, 3).unwrap().ncols(), 6);
        assert_eq!(spline_features(&x, 8, 1).unwrap().ncols(), 8);
    }

    #[test]
    fn linear_hats_at_endpoints() {
        let b = spline_features(&[0.0, 1.0], 2, 1).unwrap();
        assert_abs_diff_eq!(b, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn cubic_partition_of_unity() {
        let x: Vec<f64> = (0..101).map(|i| -2.0 + 4.0 * i as f64 / 100.0).collect();
        let b = spline_features(&x, 4, 3).unwrap();
        for row in b.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cubic_basis_matches_recursive_definition() {
        // Independent Cox-de Boor recursion on the extended uniform knot vector.
        fn cox(i: usize, k: usize, x: f64, t: &[f64]) -> f64 {
            if k == 0 {
                return if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
            }
            let a = (x - t[i]) / (t[i + k] - t[i]) * cox(i, k - 1, x, t);
            let b = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox(i + 1, k - 1, x, t);
            a + b
        }
        let basis = SplineBasis::fit(&[0.0, 3.0], 4, 3).unwrap();
        let t: Vec<f64> = (0..4 + 6).map(|i| i as f64 - 3.0).collect();
        let mut row = vec![0.0; 6];
        for x in [0.0, 0.4, 1.0, 1.7, 2.5, 2.999] {
            basis.eval_into(x, &mut row);
            for (i, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(*v, cox(i, 3, x, &t), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn extrapolation_continues_boundary_piece() {
        let basis = SplineBasis::fit(&[0.0, 3.0], 4, 3).unwrap();
        let (mut a, mut b) = (vec![0.0; 6], vec![0.0; 6]);
        // Continuity across the right boundary; rows still sum to one.
        basis.eval_into(3.0 - 1e-9, &mut a);
        basis.eval_into(3.0 + 1e-9, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-7);
        }
        basis.eval_into(5.0, &mut b);
        assert_abs_diff_eq!(b.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        assert!(b.iter().any(|v| *v < 0.0 || *v > 1.0));
    }

    #[test]
    fn constant_column_has_zero_width_range() {
        assert_eq!(spline_features(&[1.0; 5], 4, 3), Err(FeatureError::ZeroWidthRange));
    }

    #[test]
    fn rff_range_and_determinism() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1 - 2.0).collect();
        let a = rff_features(&x, 16, 1.0, 7).unwrap();
        let b = rff_features(&x, 16, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let bound = (2.0f64 / 16.0).sqrt();
        assert!(a.iter().all(|v| v.abs() <= bound + 1e-15));
    }

    #[test]
    fn rff_kernel_approximation() {
        let f = FourierBasis::sample(4096, 1.0, 11, 0).unwrap();
        for delta in [0.0, 0.5, 1.0] {
            let z = f.matrix(&[0.3, 0.3 + delta]).unwrap();
            let approx = z.row(0).dot(&z.row(1));
            assert!((approx - (-delta * delta).exp()).abs() < 0.05, "{delta}: {approx}");
        }
    }

    #[test]
    fn expand_shapes() {
        let m = gaussian(30, 3, 1);
        let id = expand(&m, &FeatureSpec::Identity).unwrap();
        assert_eq!(&id.design, m.values());
        assert_eq!(id.groups.sizes(), vec![1, 1, 1]);

        let m2 = gaussian(30, 2, 2);
        let sp = expand(&m2, &FeatureSpec::Spline { knots: 4, degree: 3 }).unwrap();
        assert_eq!(sp.design.ncols(), 10);
        assert_eq!(sp.groups.offsets(), &[0, 5, 10]);

        let m5 = gaussian(30, 5, 3);
        let rff = expand(&m5, &FeatureSpec::Rff { count: 8, gamma: 1.0, seed: 9 }).unwrap();
        assert_eq!(rff.design.ncols(), 40);
        assert_eq!((rff.groups.p_min(), rff.groups.p_max()), (8, 8));
    }

    #[test]
    fn expand_reports_failing_column() {
        let mut v = gaussian(10, 3, 4).into_values();
        v.column_mut(2).fill(1.5);
        let err = expand(&SampleMatrix::with_prefix(v, "M"), &FeatureSpec::Spline { knots: 4, degree: 3 }).unwrap_err();
        assert!(matches!(err, FeatureError::Column { column: 2, .. }));
    }

    #[test]
    fn standardized_blocks_are_white() {
        let m = gaussian(200, 3, 5);
        let phi = standardize_groups(&expand(&m, &FeatureSpec::Spline { knots: 4, degree: 3 }).unwrap()).unwrap();
        let (cov, mean) = standardization_defect(&phi.design, &phi.groups);
        assert!(cov < 1e-8, "{cov}");
        assert!(mean < 1e-10, "{mean}");
    }

    #[test]
    fn standardize_is_idempotent_and_maps_new_data() {
        let m = gaussian(150, 2, 6);
        let once = standardize_groups(&expand(&m, &FeatureSpec::Spline { knots: 5, degree: 2 }).unwrap()).unwrap();
        let twice = standardize_groups(&once).unwrap();
        assert!((&once.design - &twice.design).amax() < 1e-8);
        let again = twice.map_new(&m).unwrap();
        assert!((&again - &once.design).amax() < 1e-8);
    }

    #[test]
    fn correlated_columns_in_one_group_fail() {
        let m = gaussian(40, 1, 7);
        let x = m.column(0);
        let design = DMatrix::from_fn(40, 2, |i, t| if t == 0 { x[i] } else { 2.0 * x[i] + 1.0 });
        let phi = FeatureExpansion {
            design,
            groups: GroupStructure::uniform(1, 2),
            maps: vec![ColumnMap::Identity],
            transforms: None,
        };
        let err = standardize_groups(&phi).unwrap_err();
        assert!(matches!(err, FeatureError::RankDeficient { group: 0, .. }));
        assert!(err.to_string().contains("identifiability fails within group"));
    }

    #[test]
    fn incoherence_orthogonal_groups() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let r = check_incoherence(&design, &GroupStructure::uniform(2, 1), 1.5);
        assert_eq!(r.max_diagonal, 0.0);
        assert_eq!(r.max_off_diagonal, 0.0);
        assert!(r.holds());
    }

    #[test]
    fn incoherence_reports_sample_correlation() {
        let m = gaussian(100, 2, 8);
        let phi = standardize_groups(&expand(&m, &FeatureSpec::Identity).unwrap()).unwrap();
        let (x, y) = (m.column_vector(0), m.column_vector(1));
        let xc = x.add_scalar(-x.mean());
        let yc = y.add_scalar(-y.mean());
        let r = xc.dot(&yc) / (xc.norm() * yc.norm());
        let rep = check_incoherence(&phi.design, &phi.groups, 2.0);
        assert_abs_diff_eq!(rep.max_diagonal, r.abs(), epsilon = 1e-10);
        assert_eq!(rep.max_diagonal_pair, Some((0, 1)));
    }

    #[test]
    fn incoherence_violated_under_strong_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut vals = DMatrix::zeros(500, 2);
        for i in 0..500 {
            let g: f64 = rng.sample(StandardNormal);
            for j in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                vals[(i, j)] = 0.05f64.sqrt() * z + 0.95f64.sqrt() * g;
            }
        }
        let phi = standardize_groups(&expand(&SampleMatrix::with_prefix(vals, "M"), &FeatureSpec::Identity).unwrap()).unwrap();
        let rep = check_incoherence(&phi.design, &phi.groups, 2.0);
        assert_abs_diff_eq!(rep.diagonal_bound, 1.0 / 28.0, epsilon = 1e-15);
        assert!(rep.max_diagonal > 0.9, "{}", rep.max_diagonal);
        assert!(!rep.holds());
    }

    proptest! {
        #[test]
        fn partition_of_unity_inside_range(
            xs in proptest::collection::vec(-50.0f64..50.0, 2..40),
            knots in 2usize..9,
            degree in 1usize..4,
        ) {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi - lo > 1e-6);
            let b = spline_features(&xs, knots, degree).unwrap();
            prop_assert_eq!(b.ncols(), knots + degree - 1);
            for row in b.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
            }
        }
    }
}
