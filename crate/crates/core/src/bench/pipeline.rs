//! One estimator on one dataset: features, per-concept fits, matching, metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Baseline, BenchError, EstimatorSpec};
use crate::align::{
    build_alignment_model, build_kernel_alignment_model, correlation_matching, match_permutation, predict_concepts,
    AlignmentModel, ConceptRegressor, CorrelationMethod, Link, Permutation, MODEL_FORMAT_VERSION,
};
use crate::data::SampleMatrix;
use crate::features::{expand, standardize_groups, FeatureExpansion, FeatureSpec};
use crate::glasso::{fit_all_concepts, fit_logistic_group_lasso, GlassoError, SolverOptions};
use crate::kernels::{gram, KernelBlock, KernelDesign};
use crate::metrics::{self, MetricReport};
use crate::par_map;
use crate::synthgen::ToyDataset;

/// Estimator state that does not depend on λ.
#[derive(Clone, Debug)]
pub enum Prepared {
    Features {
        expansion: FeatureExpansion,
        link: Link,
    },
    /// Column-centered kernel blocks; `offsets[j]` holds the training means
    /// of `κ(x_ℓ, anchor_k)`, folded back into each intercept.
    Kernel {
        design: KernelDesign,
        offsets: Vec<DVector<f64>>,
    },
    TwoStage {
        screen: FeatureExpansion,
        screen_rows: usize,
        refit: FeatureExpansion,
        ridge: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: AlignmentModel,
    /// Row `i` holds concept `i`'s group norms.
    pub norms: DMatrix<f64>,
    pub lambda: f64,
    pub timings: BTreeMap<String, f64>,
}

/// Concepts the estimators are trained on: binarized when the dataset has labels.
pub(crate) fn targets(ds: &ToyDataset) -> (&SampleMatrix, &SampleMatrix) {
    match &ds.binary {
        Some(b) => (&b.c_train, &b.c_test),
        None => (&ds.c_train, &ds.c_test),
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn standardized(m: &SampleMatrix, spec: &FeatureSpec) -> Result<FeatureExpansion, BenchError> {
    Ok(standardize_groups(&expand(m, spec)?)?)
}

pub fn prepare(ds: &ToyDataset, est: &EstimatorSpec) -> Result<Prepared, BenchError> {
    let m = &ds.m_train;
    let features = |spec: FeatureSpec, link| -> Result<Prepared, BenchError> {
        Ok(Prepared::Features {
            expansion: standardized(m, &spec)?,
            link,
        })
    };
    match est {
        EstimatorSpec::Linear => features(FeatureSpec::Identity, Link::Identity),
        EstimatorSpec::Spline { knots, degree } => features(
            FeatureSpec::Spline {
                knots: *knots,
                degree: *degree,
            },
            Link::Identity,
        ),
        EstimatorSpec::Rff { count, gamma, seed } => features(
            FeatureSpec::Rff {
                count: *count,
                gamma: *gamma,
                seed: *seed,
            },
            Link::Identity,
        ),
        EstimatorSpec::Logistic { features: spec } => features(spec.clone(), Link::Logistic),
        EstimatorSpec::Kernel { kernel, landmarks } => {
            let idx: Vec<usize> = (0..m.ncols()).collect();
            let built = par_map(&idx, |&j| -> Result<(KernelBlock, DVector<f64>), BenchError> {
                let mut block = KernelBlock::auto(*kernel, m.column(j), *landmarks, ds.config.seed, j as u64)?;
                let means = block.design.row_mean();
                for mut row in block.design.row_iter_mut() {
                    row -= &means;
                }
                let offset = gram(kernel, m.column(j), Some(&block.anchors)).row_mean().transpose();
                Ok((block, offset))
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            let (blocks, offsets): (Vec<_>, Vec<_>) = built.into_iter().unzip();
            Ok(Prepared::Kernel {
                design: KernelDesign::new(blocks)?,
                offsets,
            })
        }
        EstimatorSpec::TwoStage {
            split,
            knots,
            degree,
            ridge,
        } => {
            let n = m.nrows();
            let screen_rows = ((split * n as f64).round() as usize).clamp(2, n - 2);
            Ok(Prepared::TwoStage {
                screen: standardized(&m.rows(0, screen_rows), &FeatureSpec::Identity)?,
                screen_rows,
                refit: standardized(
                    &m.rows(screen_rows, n),
                    &FeatureSpec::Spline {
                        knots: *knots,
                        degree: *degree,
                    },
                )?,
                ridge: *ridge,
            })
        }
    }
}

fn column_means(c: &SampleMatrix) -> Vec<f64> {
    (0..c.ncols()).map(|i| c.column_vector(i).mean()).collect()
}

/// Ridge fit of a centered target on one whitened block.
fn ridge_block(block: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let n = block.nrows() as f64;
    let mut gram = block.tr_mul(block) / n;
    for k in 0..gram.nrows() {
        gram[(k, k)] += ridge;
    }
    let rhs = block.tr_mul(y) / n;
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.pseudo_inverse(1e-12).expect("non-negative eps") * rhs,
    }
}

pub fn fit_prepared(
    prep: &Prepared,
    ds: &ToyDataset,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<FittedModel, BenchError> {
    let (c, _) = targets(ds);
    let names = c.names().to_vec();
    let mut timings = BTreeMap::new();
    let t_fit = Instant::now();
    let (model, norms) = match prep {
        Prepared::Features {
            expansion,
            link: Link::Identity,
        } => {
            let (norms, fits) = fit_all_concepts(expansion, c, lambda, opts)?;
            timings.insert("fit".into(), elapsed_ms(t_fit));
            let perm = match_permutation(&norms)?;
            let means = column_means(c);
            (build_alignment_model(&fits, &perm, expansion, Some(&means), Link::Identity, names)?, norms)
        }
        Prepared::Features {
            expansion,
            link: Link::Logistic,
        } => {
            let idx: Vec<usize> = (0..c.ncols()).collect();
            let fits = par_map(&idx, |&i| {
                fit_logistic_group_lasso(&expansion.design, &c.column_vector(i), &expansion.groups, lambda, opts).map_err(
                    |e| GlassoError::Concept {
                        concept: i,
                        source: Box::new(e),
                    },
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            timings.insert("fit".into(), elapsed_ms(t_fit));
            let norms = DMatrix::from_fn(fits.len(), expansion.groups.len(), |i, j| fits[i].group_norms[j]);
            let perm = match_permutation(&norms)?;
            (build_alignment_model(&fits, &perm, expansion, None, Link::Logistic, names)?, norms)
        }
        Prepared::Kernel { design, offsets } => {
            let means = column_means(c);
            let centered: Vec<DVector<f64>> = (0..c.ncols()).map(|i| c.column_vector(i).add_scalar(-means[i])).collect();
            let (norms, fits) = design.fit_all(&centered, lambda, opts)?;
            timings.insert("fit".into(), elapsed_ms(t_fit));
            let perm = match_permutation(&norms)?;
            let intercepts: Vec<f64> = (0..fits.len())
                .map(|i| {
                    let j = perm.get(i);
                    means[i] - offsets[j].dot(&fits[i].coefficients[j])
                })
                .collect();
            (build_kernel_alignment_model(&fits, &perm, design, &intercepts, names)?, norms)
        }
        Prepared::TwoStage {
            screen,
            screen_rows,
            refit,
            ridge,
        } => {
            let n = c.nrows();
            let (norms, _) = fit_all_concepts(screen, &c.rows(0, *screen_rows), lambda, opts)?;
            let perm = match_permutation(&norms)?;
            let rest = c.rows(*screen_rows, n);
            let transforms = refit.transforms.as_ref().expect("standardized");
            let idx: Vec<usize> = (0..c.ncols()).collect();
            let regressors = par_map(&idx, |&i| {
                let j = perm.get(i);
                let y = rest.column_vector(i);
                let mean = y.mean();
                let beta = ridge_block(&refit.block(j), &y.add_scalar(-mean), *ridge);
                ConceptRegressor::Features {
                    map: refit.maps[j].clone(),
                    transform: Some(transforms[j].clone()),
                    coefficients: beta.as_slice().to_vec(),
                    intercept: mean,
                    link: Link::Identity,
                }
            });
            timings.insert("fit".into(), elapsed_ms(t_fit));
            let model = AlignmentModel {
                version: MODEL_FORMAT_VERSION,
                permutation: perm,
                concept_names: names,
                machine_variables: refit.maps.len(),
                regressors,
            };
            (model, norms)
        }
    };
    Ok(FittedModel {
        model,
        norms,
        lambda,
        timings,
    })
}

pub fn fit_estimator(
    ds: &ToyDataset,
    est: &EstimatorSpec,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<FittedModel, BenchError> {
    let t = Instant::now();
    let prep = prepare(ds, est)?;
    let features_ms = elapsed_ms(t);
    let mut fitted = fit_prepared(&prep, ds, lambda, opts)?;
    fitted.timings.insert("features".into(), features_ms);
    Ok(fitted)
}

fn clamp_unit(m: SampleMatrix) -> SampleMatrix {
    let names = m.names().to_vec();
    SampleMatrix::new(m.into_values().map(|v| v.clamp(0.0, 1.0)), names).expect("same names")
}

/// Label predictions from predicted concept probabilities, via a logistic
/// regression fitted on the training split's predicted concepts.
fn predict_labels(model: &AlignmentModel, ds: &ToyDataset, c_test_pred: &SampleMatrix) -> Result<DVector<f64>, BenchError> {
    let b = ds.binary.as_ref().expect("binary dataset");
    let positives = b.y_train.sum();
    if positives == 0.0 || positives == b.y_train.len() as f64 {
        return Ok(DVector::from_element(c_test_pred.nrows(), b.y_train[0]));
    }
    let train_pred = clamp_unit(predict_concepts(model, &ds.m_train)?);
    let w = metrics::fit_logistic(train_pred.values(), &b.y_train);
    Ok(metrics::predict_logistic(c_test_pred.values(), &w))
}

/// Metrics of a fitted model on the dataset's test split.
pub fn evaluate(ds: &ToyDataset, fitted: &FittedModel, impurity: bool, split_seed: u64) -> Result<MetricReport, BenchError> {
    let t = Instant::now();
    let (_, c_test) = targets(ds);
    let mut pred = predict_concepts(&fitted.model, &ds.m_test)?;
    if ds.binary.is_some() {
        pred = clamp_unit(pred);
    }
    let mut report = MetricReport {
        mpe: metrics::mpe(&fitted.model.permutation, &ds.true_permutation)?,
        r2_diag: metrics::r2_diagonal(c_test, &pred).unwrap_or(f64::NAN),
        wall_time_ms: fitted.timings.clone(),
        ..MetricReport::default()
    };
    if let Some(b) = &ds.binary {
        report.concept_acc = Some(metrics::concept_accuracy(c_test, &pred)?);
        let y_pred = predict_labels(&fitted.model, ds, &pred)?;
        report.label_acc = Some(metrics::label_accuracy(&b.y_test, &y_pred)?);
    }
    if impurity {
        let warn = |what: &str, e: metrics::MetricError| {
            log::warn!("{what} skipped: {e}");
        };
        report.ois = metrics::ois(&pred, c_test, split_seed).map_err(|e| warn("ois", e)).ok();
        report.nis = metrics::nis(&pred, c_test, split_seed).map_err(|e| warn("nis", e)).ok();
    }
    report.wall_time_ms.insert("evaluate".into(), elapsed_ms(t));
    Ok(report)
}

/// Correlation-matching permutation on the training split.
pub fn baseline_permutation(ds: &ToyDataset, baseline: Baseline) -> Result<Permutation, BenchError> {
    let method = match baseline {
        Baseline::Pearson => CorrelationMethod::Pearson,
        Baseline::Spearman => CorrelationMethod::Spearman,
    };
    Ok(correlation_matching(targets(ds).0, &ds.m_train, method)?)
}
