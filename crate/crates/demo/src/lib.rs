//! WebAssembly entry points for the static page in `www/`.
//!
//! Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch.

use concept_align::align::match_permutation;
use concept_align::features::{expand, standardize_groups, FeatureSpec, SplineBasis};
use concept_align::glasso::{fit_all_concepts, SolverOptions};
use concept_align::kernels::{gram, nystrom_landmarks, KernelSpec};
use concept_align::metrics::mpe;
use concept_align::synthgen::{generate, sample_correlated_gaussian, ToyConfig, ToyMode};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// B-spline basis on `[0, 1]` sampled at `samples` points.
/// `{"x": [..], "curves": [[..], ..]}`, one curve per basis function.
#[wasm_bindgen]
pub fn spline_curves(knots: usize, degree: usize, samples: usize) -> String {
    respond((|| {
        let basis = SplineBasis::fit(&[0.0, 1.0], knots, degree).map_err(|e| e.to_string())?;
        let samples = samples.clamp(2, 2000);
        let x: Vec<f64> = (0..samples).map(|i| i as f64 / (samples - 1) as f64).collect();
        let mut curves = vec![Vec::with_capacity(samples); basis.len()];
        let mut row = vec![0.0; basis.len()];
        for &xi in &x {
            basis.eval_into(xi, &mut row);
            for (c, v) in curves.iter_mut().zip(&row) {
                c.push(*v);
            }
        }
        Ok(json!({ "x": x, "curves": curves }))
    })())
}

/// Generates a toy dataset, fits one Group Lasso per concept and matches.
/// Misspecified data uses cubic splines with 4 knots, wellspecified data the
/// identity features. Returns the norm matrix (row per concept), both
/// permutations and the MPE.
#[wasm_bindgen]
pub fn align(n: usize, d: usize, rho: f64, misspecified: bool, lambda: f64, seed: u64) -> String {
    respond((|| {
        if d > 30 || n > 5000 {
            return Err("demo limits: d <= 30, n <= 5000".into());
        }
        let (mode, spec) = if misspecified {
            (ToyMode::Misspecified, FeatureSpec::Spline { knots: 4, degree: 3 })
        } else {
            (
                ToyMode::Wellspecified {
                    features: FeatureSpec::Identity,
                },
                FeatureSpec::Identity,
            )
        };
        let mut cfg = ToyConfig::new(n, d, mode);
        cfg.rho = rho;
        cfg.seed = seed;
        let ds = generate(&cfg).map_err(|e| e.to_string())?;
        let phi = expand(&ds.m_train, &spec)
            .and_then(|e| standardize_groups(&e))
            .map_err(|e| e.to_string())?;
        let (norms, _) = fit_all_concepts(&phi, &ds.c_train, lambda, &SolverOptions::default()).map_err(|e| e.to_string())?;
        let estimate = match_permutation(&norms).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = norms.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok(json!({
            "norms": rows,
            "estimated": estimate.as_slice(),
            "truth": ds.true_permutation.as_slice(),
            "mpe": mpe(&estimate, &ds.true_permutation).map_err(|e| e.to_string())?,
        }))
    })())
}

fn kernel_by_name(name: &str, gamma: f64) -> Result<KernelSpec, String> {
    Ok(match name {
        "rbf" => KernelSpec::Rbf { gamma },
        "laplacian" => KernelSpec::Laplacian,
        "cosine" => KernelSpec::Cosine,
        "linear" => KernelSpec::Linear,
        other => return Err(format!("unknown kernel {other:?}")),
    })
}

/// Relative Frobenius error `‖K − FFᵀ‖/‖K‖` of the Nyström approximation
/// for every landmark count `m = 1..=n`, on `n` standard normal inputs.
#[wasm_bindgen]
pub fn nystrom_errors(n: usize, kernel: &str, gamma: f64, seed: u64) -> String {
    respond((|| {
        if !(2..=400).contains(&n) {
            return Err("n must lie in 2..=400".into());
        }
        let spec = kernel_by_name(kernel, gamma)?;
        let m = sample_correlated_gaussian(n, 1, 0.0, seed).map_err(|e| e.to_string())?;
        let x = m.column(0);
        let k = gram(&spec, x, None);
        let scale = k.norm();
        let mut errors = vec![];
        for landmarks in 1..=n {
            let ny = nystrom_landmarks(&spec, x, landmarks, seed).map_err(|e| e.to_string())?;
            let approx = &ny.features * ny.features.transpose();
            errors.push((&k - approx).norm() / scale);
        }
        Ok(json!({ "m": (1..=n).collect::<Vec<_>>(), "errors": errors }))
    })())
}
