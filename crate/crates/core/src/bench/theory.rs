//! Monte Carlo check of the finite-sample guarantees for the linear Group
//! Lasso on wellspecified data.
//!
//! Each accepted trial satisfies the hypotheses: `λ = 4λ₀`, every signal norm
//! above `2cλ√p` (drawn from `U[2cλ√p, 4cλ√p]`), and the incoherence bounds
//! at constant `a` on the standardized design. Designs failing incoherence are
//! redrawn with the next seed.

use std::path::PathBuf;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::experiment::with_jobs;
use super::BenchError;
use crate::align::match_permutation;
use crate::features::{check_incoherence, expand, standardize_groups, FeatureSpec};
use crate::glasso::{fit_all_concepts, lambda0, SolverOptions};
use crate::par_map;
use crate::synthgen::{gen_wellspecified, sample_correlated_gaussian, GroundTruth};

/// Smallest accepted trial count.
pub const MIN_TRIALS: usize = 200;

fn default_delta() -> f64 {
    0.1
}
fn default_a() -> f64 {
    2.0
}
fn default_trials() -> usize {
    MIN_TRIALS
}
fn default_sigma() -> f64 {
    1.0
}
fn default_identity() -> FeatureSpec {
    FeatureSpec::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_identity")]
    pub features: FeatureSpec,
    /// Cap on generated designs; defaults to `1000 · trials`.
    #[serde(default)]
    pub max_attempts: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl TheoryConfig {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            rho: 0.0,
            sigma: 1.0,
            delta: default_delta(),
            a: default_a(),
            trials: MIN_TRIALS,
            seed: 0,
            features: FeatureSpec::Identity,
            max_attempts: None,
            output_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: String| Err(BenchError::Config(m));
        if self.trials < MIN_TRIALS {
            return err(format!("trials must be >= {MIN_TRIALS}, got {}", self.trials));
        }
        if self.n < 10 || self.d == 0 {
            return err(format!("need n >= 10 and d >= 1, got n={} d={}", self.n, self.d));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.sigma > 0.0) {
            return err(format!("need rho in [0,1) and sigma > 0, got {} / {}", self.rho, self.sigma));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.a > 1.0) {
            return err(format!("need delta in (0,1) and a > 1, got {} / {}", self.delta, self.a));
        }
        Ok(())
    }

    /// `c = 1 + 24 / (7(a − 1))`.
    pub fn bound_constant(&self) -> f64 {
        1.0 + 24.0 / (7.0 * (self.a - 1.0))
    }
}

/// Empirical frequency of one event against its guaranteed probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub hits: usize,
    pub total: usize,
    pub frequency: f64,
    /// Binomial standard error `√(f(1−f)/total)`.
    pub se: f64,
    pub threshold: f64,
    /// Passes when `frequency ≥ threshold − 3·se`.
    pub pass: bool,
}

impl EventSummary {
    fn new(hits: usize, total: usize, threshold: f64) -> Self {
        let frequency = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
        let se = if total == 0 { 0.0 } else { (frequency * (1.0 - frequency) / total as f64).sqrt() };
        Self {
            hits,
            total,
            frequency,
            se,
            threshold,
            pass: total > 0 && frequency >= threshold - 3.0 * se,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub completed_trials: usize,
    pub attempts: usize,
    /// Designs redrawn because the incoherence bounds failed.
    pub rejected: usize,
    pub lambda0: f64,
    pub lambda: f64,
    pub c: f64,
    /// `cλ√p`.
    pub error_bound: f64,
    /// Per concept: `‖β̂ᵢ − β*ᵢ‖_{2,∞} ≤ cλ√p`, against `1 − δ/d`.
    pub bound_event: EventSummary,
    /// Per concept: largest fitted group norm sits at `π(i)`, against `1 − δ/d`.
    pub argmax_event: EventSummary,
    /// Per trial: the matched permutation equals `π`, against `1 − δ`.
    pub recovery_event: EventSummary,
    pub max_error_ratio: f64,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.completed_trials == self.config.trials
            && self.bound_event.pass
            && self.argmax_event.pass
            && self.recovery_event.pass
    }
}

struct TrialOutcome {
    bound_hits: usize,
    argmax_hits: usize,
    recovered: bool,
    max_error: f64,
}

fn run_trial(cfg: &TheoryConfig, seed: u64, lambda: f64, bound: f64) -> Result<Option<TrialOutcome>, BenchError> {
    let m = sample_correlated_gaussian(cfg.n, cfg.d, cfg.rho, seed)?;
    let phi = standardize_groups(&expand(&m, &cfg.features)?)?;
    if !check_incoherence(&phi.design, &phi.groups, cfg.a).holds() {
        return Ok(None);
    }
    let draw = gen_wellspecified(&m, &m.rows(0, 0), &cfg.features, cfg.sigma, seed, Some((2.0 * bound, 4.0 * bound)))?;
    let GroundTruth::Wellspecified { coefficients, .. } = &draw.truth else {
        unreachable!("wellspecified draw");
    };
    let (norms, fits) = fit_all_concepts(&phi, &draw.c_train, lambda, &SolverOptions::default())?;
    let perm = &draw.permutation;
    let mut outcome = TrialOutcome {
        bound_hits: 0,
        argmax_hits: 0,
        recovered: match_permutation(&norms)? == *perm,
        max_error: 0.0,
    };
    for (i, fit) in fits.iter().enumerate() {
        let j = perm.get(i);
        let mut err = 0.0f64;
        for g in 0..phi.groups.len() {
            let r = phi.groups.range(g);
            let est = fit.coefficients.rows(r.start, r.len());
            let diff = if g == j {
                (est - DVector::from_column_slice(&coefficients[j])).norm()
            } else {
                est.norm()
            };
            err = err.max(diff);
        }
        outcome.max_error = outcome.max_error.max(err / bound);
        outcome.bound_hits += usize::from(err <= bound);
        let row = norms.row(i);
        let argmax = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        outcome.argmax_hits += usize::from(argmax == j);
    }
    Ok(Some(outcome))
}

/// Runs trials until `config.trials` designs pass the incoherence check.
/// Accepted trials are the first ones in seed order, for any worker count.
pub fn verify_theory(config: &TheoryConfig, jobs: Option<usize>) -> Result<TheoryReport, BenchError> {
    config.validate()?;
    let p = config.features.features_per_variable();
    let l0 = lambda0(config.sigma, config.n, p, config.d, config.delta)?;
    let lambda = 4.0 * l0;
    let c = config.bound_constant();
    let bound = c * lambda * (p as f64).sqrt();
    let max_attempts = config.max_attempts.unwrap_or(1000 * config.trials);
    let batch = 256;

    let outcomes = with_jobs(jobs, || -> Result<(Vec<TrialOutcome>, usize), BenchError> {
        let mut accepted = vec![];
        let mut attempts = 0;
        while accepted.len() < config.trials && attempts < max_attempts {
            let seeds: Vec<u64> = (attempts..(attempts + batch).min(max_attempts))
                .map(|k| config.seed.wrapping_add(k as u64))
                .collect();
            let results = par_map(&seeds, |&s| run_trial(config, s, lambda, bound));
            for r in results {
                attempts += 1;
                if let Some(o) = r? {
                    accepted.push(o);
                    if accepted.len() == config.trials {
                        break;
                    }
                }
            }
        }
        Ok((accepted, attempts))
    })??;
    let (accepted, attempts) = outcomes;
    let d = config.d;
    let trials = accepted.len();
    let per_concept = 1.0 - config.delta / d as f64;
    let report = TheoryReport {
        config: config.clone(),
        completed_trials: trials,
        attempts,
        rejected: attempts - trials,
        lambda0: l0,
        lambda,
        c,
        error_bound: bound,
        bound_event: EventSummary::new(accepted.iter().map(|o| o.bound_hits).sum(), trials * d, per_concept),
        argmax_event: EventSummary::new(accepted.iter().map(|o| o.argmax_hits).sum(), trials * d, per_concept),
        recovery_event: EventSummary::new(accepted.iter().filter(|o| o.recovered).count(), trials, 1.0 - config.delta),
        max_error_ratio: accepted.iter().map(|o| o.max_error).fold(0.0, f64::max),
    };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("theory.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
