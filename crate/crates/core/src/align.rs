//! From group norms to an alignment map.
//!
//! [`match_permutation`] solves the maximum-weight perfect matching on the
//! group-norm matrix with the Hungarian algorithm, then resolves ties toward
//! the lexicographically smallest optimal mapping by searching the
//! equality subgraph of the optimal dual. [`AlignmentModel`] keeps, per
//! concept, only the regressor on its matched machine variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleMatrix;
use crate::features::{ColumnMap, FeatureError, FeatureExpansion, GroupTransform};
use crate::glasso::{sigmoid, GroupLassoFit};
use crate::kernels::{gram, KernelDesign, KernelFit, KernelSpec};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("matching needs a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry in weight matrix")]
    NonFinite,
    #[error("not a permutation: {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Bijection on `{0..d−1}`; `mapping[i]` is the machine variable matched to concept `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, AlignError> {
        let d = mapping.len();
        let mut seen = vec![false; d];
        for &j in &mapping {
            if j >= d || seen[j] {
                return Err(AlignError::InvalidPermutation(mapping));
            }
            seen[j] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mapping: (0..d).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn get(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            inv[j] = i;
        }
        Self { mapping: inv }
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = AlignError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.mapping
    }
}

/// Minimum-cost assignment on a square cost matrix. Returns the row→column
/// mapping and the dual potentials `(u, v)` with `u_i + v_j ≤ cost_ij`.
fn hungarian_min(cost: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; n];
    for j in 1..=n {
        mapping[p[j] - 1] = j - 1;
    }
    (mapping, u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn augmenting-path check: can rows `rows` be matched into free columns?
fn has_perfect_matching(adj: &[Vec<usize>], rows: &[usize], col_free: &[bool]) -> bool {
    fn augment(r: usize, adj: &[Vec<usize>], col_free: &[bool], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &c in &adj[r] {
            if !col_free[c] || seen[c] {
                continue;
            }
            seen[c] = true;
            if owner[c].is_none() || augment(owner[c].unwrap(), adj, col_free, owner, seen) {
                owner[c] = Some(r);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; col_free.len()];
    rows.iter().all(|&r| {
        let mut seen = vec![false; col_free.len()];
        augment(r, adj, col_free, &mut owner, &mut seen)
    })
}

/// Maximum-weight perfect matching `argmax_π Σ_i N[i][π(i)]` in `O(d³)`, ties
/// broken toward the lexicographically smallest mapping.
pub fn match_permutation(weights: &DMatrix<f64>) -> Result<Permutation, AlignError> {
    let (rows, cols) = weights.shape();
    if rows != cols {
        return Err(AlignError::NotSquare { rows, cols });
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite);
    }
    let d = rows;
    if d == 0 {
        return Ok(Permutation::identity(0));
    }
    let max = weights.max();
    let cost = weights.map(|w| max - w);
    let (hungarian, u, v) = hungarian_min(&cost);
    let scale = weights.amax().max(1.0);
    let eps = 1e-9 * scale;
    // Every optimal assignment uses only edges that are tight for the dual.
    let adj: Vec<Vec<usize>> = (0..d)
        .map(|i| (0..d).filter(|&j| cost[(i, j)] - u[i] - v[j] <= eps).collect())
        .collect();
    let mut col_free = vec![true; d];
    let mut mapping = Vec::with_capacity(d);
    for i in 0..d {
        let rest: Vec<usize> = (i + 1..d).collect();
        let pick = adj[i].iter().copied().find(|&j| {
            if !col_free[j] {
                return false;
            }
            col_free[j] = false;
            let ok = has_perfect_matching(&adj, &rest, &col_free);
            col_free[j] = true;
            ok
        });
        match pick {
            Some(j) => {
                col_free[j] = false;
                mapping.push(j);
            }
            None => return Permutation::new(hungarian),
        }
    }
    let total = |m: &[usize]| m.iter().enumerate().map(|(i, &j)| weights[(i, j)]).sum::<f64>();
    if total(&mapping) + d as f64 * eps < total(&hungarian) {
        return Permutation::new(hungarian);
    }
    Permutation::new(mapping)
}

/// Row-wise argmax (smallest index on ties), possibly not a bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NaiveAssignment {
    pub mapping: Vec<usize>,
    pub bijective: bool,
}

pub fn naive_assignment(weights: &DMatrix<f64>) -> NaiveAssignment {
    let mapping: Vec<usize> = weights
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut seen = vec![false; weights.ncols()];
    let bijective = weights.nrows() == weights.ncols()
        && mapping.iter().all(|&j| !std::mem::replace(&mut seen[j], true));
    NaiveAssignment { mapping, bijective }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// `|corr(C_i, M_j)|` for every pair; zero-variance columns contribute 0.
pub fn correlation_matrix(c: &SampleMatrix, m: &SampleMatrix, method: CorrelationMethod) -> Result<DMatrix<f64>, AlignError> {
    if c.nrows() != m.nrows() {
        return Err(AlignError::Length(c.nrows(), m.nrows()));
    }
    let prep = |s: &SampleMatrix| -> Vec<Vec<f64>> {
        (0..s.ncols())
            .map(|j| match method {
                CorrelationMethod::Pearson => s.column(j).to_vec(),
                CorrelationMethod::Spearman => average_ranks(s.column(j)),
            })
            .collect()
    };
    let (cc, mm) = (prep(c), prep(m));
    let mut warned = false;
    Ok(DMatrix::from_fn(c.ncols(), m.ncols(), |i, j| match pearson(&cc[i], &mm[j]) {
        Some(r) => r.abs(),
        None => {
            if !warned {
                log::warn!("zero-variance column in correlation matching; using 0");
                warned = true;
            }
            0.0
        }
    }))
}

/// Baseline: match on absolute Pearson or Spearman correlation.
pub fn correlation_matching(c: &SampleMatrix, m: &SampleMatrix, method: CorrelationMethod) -> Result<Permutation, AlignError> {
    match_permutation(&correlation_matrix(c, m, method)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logistic,
}

/// Regressor for one concept, reading a single machine variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConceptRegressor {
    /// `link(b₀ + whiten(φ(x))·β)`.
    Features {
        map: ColumnMap,
        transform: Option<GroupTransform>,
        coefficients: Vec<f64>,
        intercept: f64,
        link: Link,
    },
    /// `b₀ + Σ_k c_k κ(x, anchor_k)`.
    Kernel {
        spec: KernelSpec,
        anchors: Vec<f64>,
        coefficients: Vec<f64>,
        intercept: f64,
    },
}

impl ConceptRegressor {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, AlignError> {
        match self {
            ConceptRegressor::Features {
                map,
                transform,
                coefficients,
                intercept,
                link,
            } => {
                let raw = map.apply(x)?;
                let block = match transform {
                    Some(t) => t.apply(&raw),
                    None => raw,
                };
                if block.ncols() != coefficients.len() {
                    return Err(AlignError::Dimension(format!(
                        "{} features vs {} coefficients",
                        block.ncols(),
                        coefficients.len()
                    )));
                }
                let eta = (block * DVector::from_column_slice(coefficients)).add_scalar(*intercept);
                Ok(match link {
                    Link::Identity => eta.as_slice().to_vec(),
                    Link::Logistic => eta.iter().map(|e| sigmoid(*e)).collect(),
                })
            }
            ConceptRegressor::Kernel {
                spec,
                anchors,
                coefficients,
                intercept,
            } => {
                let k = gram(spec, x, Some(anchors));
                Ok((k * DVector::from_column_slice(coefficients)).add_scalar(*intercept).as_slice().to_vec())
            }
        }
    }
}

/// Permutation plus one matched regressor per concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub version: u32,
    pub permutation: Permutation,
    pub concept_names: Vec<String>,
    pub machine_variables: usize,
    pub regressors: Vec<ConceptRegressor>,
}

/// Keeps only the matched group's coefficients of each squared-loss or
/// logistic Group Lasso fit. `intercepts` overrides the fits' own offsets
/// (the concept means for centered squared-loss targets).
pub fn build_alignment_model(
    fits: &[GroupLassoFit],
    permutation: &Permutation,
    expansion: &FeatureExpansion,
    intercepts: Option<&[f64]>,
    link: Link,
    concept_names: Vec<String>,
) -> Result<AlignmentModel, AlignError> {
    if fits.len() != permutation.len() {
        return Err(AlignError::Length(fits.len(), permutation.len()));
    }
    let regressors = fits
        .iter()
        .enumerate()
        .map(|(i, fit)| {
            let j = permutation.get(i);
            let r = expansion.groups.range(j);
            ConceptRegressor::Features {
                map: expansion.maps[j].clone(),
                transform: expansion.transforms.as_ref().map(|t| t[j].clone()),
                coefficients: fit.coefficients.rows(r.start, r.len()).iter().copied().collect(),
                intercept: intercepts.map_or(fit.intercept, |b| b[i]),
                link,
            }
        })
        .collect();
    Ok(AlignmentModel {
        version: MODEL_FORMAT_VERSION,
        permutation: permutation.clone(),
        concept_names,
        machine_variables: expansion.maps.len(),
        regressors,
    })
}

/// Kernel counterpart of [`build_alignment_model`].
pub fn build_kernel_alignment_model(
    fits: &[KernelFit],
    permutation: &Permutation,
    design: &KernelDesign,
    intercepts: &[f64],
    concept_names: Vec<String>,
) -> Result<AlignmentModel, AlignError> {
    if fits.len() != permutation.len() || intercepts.len() != fits.len() {
        return Err(AlignError::Length(fits.len(), permutation.len()));
    }
    let regressors = fits
        .iter()
        .enumerate()
        .map(|(i, fit)| {
            let j = permutation.get(i);
            let block = &design.blocks[j];
            ConceptRegressor::Kernel {
                spec: block.spec,
                anchors: block.anchors.clone(),
                coefficients: fit.coefficients[j].iter().copied().collect(),
                intercept: intercepts[i],
            }
        })
        .collect();
    Ok(AlignmentModel {
        version: MODEL_FORMAT_VERSION,
        permutation: permutation.clone(),
        concept_names,
        machine_variables: design.blocks.len(),
        regressors,
    })
}

/// Applies the alignment map to new machine samples.
pub fn predict_concepts(model: &AlignmentModel, m_new: &SampleMatrix) -> Result<SampleMatrix, AlignError> {
    if m_new.ncols() != model.machine_variables {
        return Err(AlignError::Dimension(format!(
            "model expects {} machine variables, got {}",
            model.machine_variables,
            m_new.ncols()
        )));
    }
    let n = m_new.nrows();
    let d = model.regressors.len();
    let mut out = DMatrix::zeros(n, d);
    if n > 0 {
        for (i, reg) in model.regressors.iter().enumerate() {
            let pred = reg.predict(m_new.column(model.permutation.get(i)))?;
            out.column_mut(i).copy_from_slice(&pred);
        }
    }
    Ok(SampleMatrix::new(out, model.concept_names.clone()).expect("one name per regressor"))
}

impl AlignmentModel {
    pub fn to_json(&self) -> Result<String, AlignError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AlignError> {
        let model: Self = serde_json::from_str(s)?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(AlignError::Version(model.version));
        }
        if model.regressors.len() != model.permutation.len() || model.concept_names.len() != model.regressors.len() {
            return Err(AlignError::Length(model.regressors.len(), model.permutation.len()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{expand, standardize_groups, FeatureSpec};
    use crate::glasso::{fit_all_concepts, SolverOptions};

    fn brute_force(w: &DMatrix<f64>) -> (Vec<usize>, f64) {
        fn rec(i: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, w: &DMatrix<f64>, best: &mut (Vec<usize>, f64)) {
            let d = w.nrows();
            if i == d {
                let t: f64 = cur.iter().enumerate().map(|(r, &c)| w[(r, c)]).sum();
                if t > best.1 {
                    *best = (cur.clone(), t);
                }
                return;
            }
            for j in 0..d {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(i + 1, used, cur, w, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (vec![], f64::NEG_INFINITY);
        rec(0, &mut vec![false; w.nrows()], &mut vec![], w, &mut best);
        best
    }

    #[test]
    fn small_matchings() {
        assert_eq!(match_permutation(&DMatrix::identity(3, 3)).unwrap(), Permutation::identity(3));
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]);
        assert_eq!(match_permutation(&swap).unwrap().as_slice(), &[1, 0]);
        let w = DMatrix::from_row_slice(3, 3, &[10.0, 9.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let (bf, total) = brute_force(&w);
        assert_eq!((bf.as_slice(), total), (&[1usize, 0, 2][..], 19.0));
        assert_eq!(match_permutation(&w).unwrap().as_slice(), &[1, 0, 2]);
        assert_eq!(naive_assignment(&w).mapping, vec![0, 0, 2]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        assert_eq!(match_permutation(&DMatrix::zeros(4, 4)).unwrap(), Permutation::identity(4));
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(match_permutation(&w).unwrap().as_slice(), &[0, 1, 2]);
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        // Optimal: (1,2,0) and (2,0,1); smallest first.
        assert_eq!(match_permutation(&w).unwrap().as_slice(), &[1, 2, 0]);
    }

    #[test]
    fn rejects_rectangular() {
        assert!(matches!(match_permutation(&DMatrix::zeros(2, 3)), Err(AlignError::NotSquare { rows: 2, cols: 3 })));
    }

    #[test]
    fn naive_non_bijective() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            naive_assignment(&w),
            NaiveAssignment {
                mapping: vec![0, 0],
                bijective: false
            }
        );
    }

    #[test]
    fn permutation_validation_and_serde() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![2, 0]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse().as_slice(), &[1, 2, 0]);
        assert_eq!(serde_json::to_string(&p).unwrap(), "[2,0,1]");
        assert!(serde_json::from_str::<Permutation>("[1,1]").is_err());
    }

    #[test]
    fn spearman_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_matching_recovers_swaps() {
        let m = SampleMatrix::with_prefix(DMatrix::from_fn(50, 3, |i, j| ((i * (j + 2)) as f64 * 0.37).sin()), "M");
        for method in [CorrelationMethod::Pearson, CorrelationMethod::Spearman] {
            assert_eq!(correlation_matching(&m, &m, method).unwrap(), Permutation::identity(3));
            let c = m.select_columns(&[1, 2, 0]);
            assert_eq!(correlation_matching(&c, &m, method).unwrap().as_slice(), &[1, 2, 0]);
        }
    }

    #[test]
    fn zero_variance_column_gets_zero_weight() {
        let m = SampleMatrix::with_prefix(DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 }), "M");
        let n = correlation_matrix(&m, &m, CorrelationMethod::Pearson).unwrap();
        assert_eq!(n[(0, 0)], 0.0);
        assert_eq!(n[(1, 1)], 1.0);
    }

    #[test]
    fn model_predicts_and_round_trips() {
        let m = SampleMatrix::with_prefix(DMatrix::from_fn(40, 2, |i, j| ((i + 7 * j) as f64 * 0.61).sin() * 2.0), "M");
        let phi = standardize_groups(&expand(&m, &FeatureSpec::Identity).unwrap()).unwrap();
        let c = m.select_columns(&[1, 0]);
        let (norms, fits) = fit_all_concepts(&phi, &c, 0.0, &SolverOptions::default()).unwrap();
        let perm = match_permutation(&norms).unwrap();
        assert_eq!(perm.as_slice(), &[1, 0]);
        let means: Vec<f64> = (0..2).map(|i| c.column_vector(i).mean()).collect();
        let model = build_alignment_model(&fits, &perm, &phi, Some(&means), Link::Identity, c.names().to_vec()).unwrap();
        let pred = predict_concepts(&model, &m).unwrap();
        let err = (pred.values() - c.values()).amax();
        assert!(err < 1e-5, "{err}");
        let back = AlignmentModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let empty = predict_concepts(&model, &m.rows(0, 0)).unwrap();
        assert_eq!(empty.nrows(), 0);
        assert!(predict_concepts(&model, &m.select_columns(&[0])).is_err());
    }

    #[test]
    fn zero_coefficients_predict_the_offset() {
        let reg = ConceptRegressor::Features {
            map: ColumnMap::Identity,
            transform: None,
            coefficients: vec![0.0],
            intercept: 1.25,
            link: Link::Identity,
        };
        assert_eq!(reg.predict(&[3.0, -4.0]).unwrap(), vec![1.25, 1.25]);
        let logistic = ConceptRegressor::Features {
            map: ColumnMap::Identity,
            transform: None,
            coefficients: vec![50.0],
            intercept: 0.0,
            link: Link::Logistic,
        };
        assert!(logistic.predict(&[-30.0, 0.0, 30.0]).unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
