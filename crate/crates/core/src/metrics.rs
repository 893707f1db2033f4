//! Evaluation metrics.
//!
//! OIS and NIS are estimated with simple held-out predictors: a seeded 50/50
//! split of the rows, least squares for continuous targets and ridge-stabilized
//! logistic regression for binary ones. Performance is clipped R² or
//! accuracy above the majority class rescaled to `[0, 1]`, so chance is 0.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Permutation;
use crate::data::SampleMatrix;
use crate::par_map;

/// Minimum row count for the internal split of OIS/NIS.
pub const MIN_IMPURITY_SAMPLES: usize = 40;

const LOGISTIC_RIDGE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("true concept column {0} is constant")]
    ConstantColumn(usize),
    #[error("need at least {MIN_IMPURITY_SAMPLES} rows, got {0}")]
    TooFewSamples(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpe: f64,
    pub r2_diag: f64,
    pub concept_acc: Option<f64>,
    pub label_acc: Option<f64>,
    pub ois: Option<f64>,
    pub nis: Option<f64>,
    /// Wall time per pipeline stage.
    pub wall_time_ms: BTreeMap<String, f64>,
}

/// Fraction of positions where the permutations disagree.
pub fn mpe(estimate: &Permutation, truth: &Permutation) -> Result<f64, MetricError> {
    if estimate.len() != truth.len() {
        return Err(MetricError::Length(estimate.len(), truth.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let wrong = estimate.as_slice().iter().zip(truth.as_slice()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

fn check_shape(a: &SampleMatrix, b: &SampleMatrix) -> Result<(), MetricError> {
    let (sa, sb) = ((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    if sa != sb {
        return Err(MetricError::Shape(sa, sb));
    }
    Ok(())
}

/// Mean over concepts of `1 − SSE/SST`, SST taken around the true column mean.
pub fn r2_diagonal(c_true: &SampleMatrix, c_pred: &SampleMatrix) -> Result<f64, MetricError> {
    check_shape(c_true, c_pred)?;
    let d = c_true.ncols();
    let mut total = 0.0;
    for j in 0..d {
        let t = c_true.column(j);
        let p = c_pred.column(j);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let sst: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        if !(sst > 0.0) {
            return Err(MetricError::ConstantColumn(j));
        }
        let sse: f64 = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
        total += 1.0 - sse / sst;
    }
    Ok(total / d as f64)
}

fn agreement(truth: &[f64], pred: &[f64]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = truth.iter().zip(pred).filter(|(t, p)| (**t >= 0.5) == (**p >= 0.5)).count();
    hits as f64 / truth.len() as f64
}

/// Share of concept cells whose prediction (thresholded at 0.5) agrees with the truth.
pub fn concept_accuracy(c_true: &SampleMatrix, c_pred: &SampleMatrix) -> Result<f64, MetricError> {
    check_shape(c_true, c_pred)?;
    Ok(agreement(c_true.values().as_slice(), c_pred.values().as_slice()))
}

pub fn label_accuracy(y_true: &DVector<f64>, y_pred: &DVector<f64>) -> Result<f64, MetricError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricError::Length(y_true.len(), y_pred.len()));
    }
    Ok(agreement(y_true.as_slice(), y_pred.as_slice()))
}

pub fn accuracies(
    c_true: &SampleMatrix,
    c_pred: &SampleMatrix,
    y_true: &DVector<f64>,
    y_pred: &DVector<f64>,
) -> Result<(f64, f64), MetricError> {
    Ok((concept_accuracy(c_true, c_pred)?, label_accuracy(y_true, y_pred)?))
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Least-squares fit with intercept; returns `[b0, b...]`.
pub fn fit_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let a = with_intercept(x);
    let svd = a.svd(true, true);
    svd.solve(y, 1e-10 * svd.singular_values.max()).expect("u and v computed")
}

/// Ridge-stabilized logistic regression with unpenalized intercept, by Newton steps.
pub fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let a = with_intercept(x);
    let (n, k) = a.shape();
    let ridge = LOGISTIC_RIDGE * n as f64;
    let mut w = DVector::zeros(k);
    for _ in 0..100 {
        let eta = &a * &w;
        let p = eta.map(crate::glasso::sigmoid);
        let mut grad = a.transpose() * (&p - y);
        let weights = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let aw = DMatrix::from_fn(n, k, |i, j| a[(i, j)] * weights[i]);
        let mut hess = a.transpose() * aw;
        for j in 1..k {
            grad[j] += ridge * w[j];
            hess[(j, j)] += ridge;
        }
        hess[(0, 0)] += 1e-10 * n as f64;
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        w -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    w
}

fn predict_linear(x: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    with_intercept(x) * w
}

/// Probabilities from a [`fit_logistic`] coefficient vector.
pub fn predict_logistic(x: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    predict_linear(x, w).map(crate::glasso::sigmoid)
}

fn clipped_r2(y: &DVector<f64>, pred: &DVector<f64>) -> f64 {
    let mean = y.mean();
    let sst = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if !(sst > 0.0) {
        return 0.0;
    }
    let sse = (y - pred).norm_squared();
    (1.0 - sse / sst).clamp(0.0, 1.0)
}

fn rescaled_accuracy(y: &DVector<f64>, pred_prob: &DVector<f64>) -> f64 {
    let prior = y.mean();
    let max_prior = prior.max(1.0 - prior);
    if max_prior >= 1.0 {
        return 0.0;
    }
    let acc = agreement(y.as_slice(), pred_prob.as_slice());
    ((acc - max_prior) / (1.0 - max_prior)).clamp(0.0, 1.0)
}

/// Seeded 50/50 row split, shared by every predictor of one metric call.
#[derive(Clone, Debug)]
struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Split {
    fn new(n: usize, seed: u64) -> Result<Self, MetricError> {
        if n < MIN_IMPURITY_SAMPLES {
            return Err(MetricError::TooFewSamples(n));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = idx.split_off(n / 2);
        Ok(Self { train: idx, test })
    }
}

fn gather(m: &SampleMatrix, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m.values()[(rows[i], cols[j])])
}

fn gather_target(m: &SampleMatrix, rows: &[usize], col: usize) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| m.values()[(r, col)]))
}

/// Held-out performance of predicting `target[:, j]` from `inputs[:, cols]`;
/// 0 is chance level.
fn performance(inputs: &SampleMatrix, cols: &[usize], target: &SampleMatrix, j: usize, split: &Split) -> f64 {
    let y_tr = gather_target(target, &split.train, j);
    let y_te = gather_target(target, &split.test, j);
    let x_tr = gather(inputs, &split.train, cols);
    let x_te = gather(inputs, &split.test, cols);
    let degenerate = (0..cols.len()).all(|c| {
        let col = x_tr.column(c);
        col.max() - col.min() <= 0.0
    });
    let binary = is_binary(target.column(j));
    if cols.is_empty() || degenerate {
        log::warn!("constant predictor for target {j}; using chance level");
        return 0.0;
    }
    if binary {
        let prior = y_tr.mean();
        if prior <= 0.0 || prior >= 1.0 {
            log::warn!("single-class training target {j}; using chance level");
            return 0.0;
        }
        let w = fit_logistic(&x_tr, &y_tr);
        let prob = predict_linear(&x_te, &w).map(crate::glasso::sigmoid);
        rescaled_accuracy(&y_te, &prob)
    } else {
        let w = fit_least_squares(&x_tr, &y_tr);
        clipped_r2(&y_te, &predict_linear(&x_te, &w))
    }
}

/// Matrix with entry `(i, j)` = performance of predicting `target_j` from `inputs_i` alone.
pub fn impurity_matrix(inputs: &SampleMatrix, target: &SampleMatrix, split_seed: u64) -> Result<DMatrix<f64>, MetricError> {
    check_shape(inputs, target)?;
    let split = Split::new(inputs.nrows(), split_seed)?;
    let d = inputs.ncols();
    let cells: Vec<(usize, usize)> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
    let values = par_map(&cells, |&(i, j)| performance(inputs, &[i], target, j, &split));
    Ok(DMatrix::from_fn(d, d, |i, j| values[i * d + j]))
}

/// Oracle impurity score `‖Π̂ − Π‖_F / d`, with `Π̂` built from predicted and
/// `Π` from true concepts.
pub fn ois(c_pred: &SampleMatrix, c_true: &SampleMatrix, split_seed: u64) -> Result<f64, MetricError> {
    let hat = impurity_matrix(c_pred, c_true, split_seed)?;
    let oracle = impurity_matrix(c_true, c_true, split_seed)?;
    Ok((hat - oracle).norm() / c_true.ncols() as f64)
}

/// Niche impurity score: mean over `j` of the excess performance of
/// `Ĉ_{−j} → C_j` over `C_{−j} → C_j`, floored at 0.
pub fn nis(c_pred: &SampleMatrix, c_true: &SampleMatrix, split_seed: u64) -> Result<f64, MetricError> {
    check_shape(c_pred, c_true)?;
    let split = Split::new(c_true.nrows(), split_seed)?;
    let d = c_true.ncols();
    let targets: Vec<usize> = (0..d).collect();
    let excess = par_map(&targets, |&j| {
        let others: Vec<usize> = (0..d).filter(|&k| k != j).collect();
        let hat = performance(c_pred, &others, c_true, j, &split);
        let oracle = performance(c_true, &others, c_true, j, &split);
        (hat - oracle).max(0.0)
    });
    Ok(excess.iter().sum::<f64>() / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    fn col(v: &[f64]) -> SampleMatrix {
        SampleMatrix::with_prefix(DMatrix::from_column_slice(v.len(), 1, v), "C")
    }

    #[test]
    fn mpe_examples() {
        assert_eq!(mpe(&perm(&[2, 0, 1]), &perm(&[2, 0, 1])).unwrap(), 0.0);
        assert_eq!(mpe(&perm(&[1, 0]), &perm(&[0, 1])).unwrap(), 1.0);
        assert_eq!(mpe(&perm(&[1, 0, 2, 3]), &Permutation::identity(4)).unwrap(), 0.5);
        assert!(mpe(&perm(&[0]), &perm(&[0, 1])).is_err());
    }

    #[test]
    fn r2_examples() {
        let c = col(&[0.0, 1.0, 2.0]);
        assert_eq!(r2_diagonal(&c, &c).unwrap(), 1.0);
        assert_eq!(r2_diagonal(&c, &col(&[1.0, 1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(r2_diagonal(&c, &col(&[0.0, 1.0, 1.0])).unwrap(), 0.5);
        assert_eq!(r2_diagonal(&col(&[3.0, 3.0]), &col(&[3.0, 3.0])), Err(MetricError::ConstantColumn(0)));
    }

    #[test]
    fn accuracy_examples() {
        let c = col(&[1.0, 0.0, 1.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(accuracies(&c, &c, &y, &y).unwrap(), (1.0, 1.0));
        let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        let y_flip = DVector::from_vec(flip(y.as_slice()));
        assert_eq!(accuracies(&c, &col(&flip(c.column(0))), &y, &y_flip).unwrap(), (0.0, 0.0));
        assert_eq!(concept_accuracy(&c, &col(&[1.0, 1.0, 0.0, 0.0])).unwrap(), 0.5);
        assert!(label_accuracy(&y, &DVector::zeros(3)).is_err());
    }

    fn correlated_binary(n: usize, seed: u64) -> SampleMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = DMatrix::zeros(n, 3);
        for i in 0..n {
            let g: f64 = rng.sample(StandardNormal);
            for j in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                v[(i, j)] = if g + 0.5 * z > 0.0 { 1.0 } else { 0.0 };
            }
        }
        SampleMatrix::with_prefix(v, "C")
    }

    #[test]
    fn ois_identity_and_noise() {
        let c = correlated_binary(400, 1);
        assert_eq!(ois(&c, &c, 3).unwrap(), 0.0);
        let noise = SampleMatrix::with_prefix(correlated_binary(400, 2).values().map(|x| x * 0.3 + 0.1), "C");
        let oracle = impurity_matrix(&c, &c, 3).unwrap();
        let score = ois(&noise, &c, 3).unwrap();
        assert!(score > 0.3, "{score}");
        assert!((score - oracle.norm() / 3.0).abs() < 0.1, "{score} vs {}", oracle.norm() / 3.0);
        assert!(matches!(ois(&c.rows(0, 10), &c.rows(0, 10), 0), Err(MetricError::TooFewSamples(10))));
    }

    #[test]
    fn impurity_relabeling_invariance() {
        let c = correlated_binary(200, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = SampleMatrix::with_prefix(c.values().map(|x| x + 0.4 * rng.sample::<f64, _>(StandardNormal)), "C");
        let order = [2, 0, 1];
        let (pc, cc) = (pred.select_columns(&order), c.select_columns(&order));
        assert!((ois(&pred, &c, 1).unwrap() - ois(&pc, &cc, 1).unwrap()).abs() < 1e-12);
        assert!((nis(&pred, &c, 1).unwrap() - nis(&pc, &cc, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nis_detects_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = SampleMatrix::with_prefix(
            DMatrix::from_fn(400, 3, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }),
            "C",
        );
        assert_eq!(nis(&c, &c, 0).unwrap(), 0.0);
        let mut leaked = c.values().clone();
        let c0 = leaked.column(0).clone_owned();
        leaked.column_mut(1).copy_from(&c0);
        let score = nis(&SampleMatrix::with_prefix(leaked, "C"), &c, 0).unwrap();
        assert!(score > 0.2, "{score}");
    }

    #[test]
    fn continuous_targets_use_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let c = SampleMatrix::with_prefix(DMatrix::from_fn(100, 2, |i, j| if j == 0 { x[i] } else { 2.0 * x[i] + 1.0 }), "C");
        let pi = impurity_matrix(&c, &c, 0).unwrap();
        assert!(pi.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn logistic_fit_recovers_slope_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(500, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(500, |i, _| {
            let p = crate::glasso::sigmoid(2.0 * x[(i, 0)] - 0.5);
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let w = fit_logistic(&x, &y);
        assert!((w[1] - 2.0).abs() < 0.5 && (w[0] + 0.5).abs() < 0.4, "{w}");
    }
}
