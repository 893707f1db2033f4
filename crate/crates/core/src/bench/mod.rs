//! Experiment configs, grid runs, sweeps and Monte Carlo checks of the
//! recovery guarantees.
//!
//! Configs are TOML. Tabular results are CSV with the fixed column order
//! [`CSV_COLUMNS`]; manifests are JSON.

mod experiment;
mod pipeline;
mod theory;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignError;
use crate::data::DataError;
use crate::features::{FeatureError, FeatureSpec};
use crate::glasso::GlassoError;
use crate::kernels::{KernelError, KernelSpec};
use crate::metrics::MetricError;
use crate::synthgen::{SynthError, ToyConfig};

pub use experiment::{
    percentile, resolve_lambda, run_experiment, sweep, with_jobs, write_csv, ResultRow, RunOptions, RunOutput, SummaryRow, SweepAxis, SweepOutput,
    CSV_COLUMNS,
};
pub use pipeline::{baseline_permutation, evaluate, fit_estimator, fit_prepared, prepare, FittedModel, Prepared};
pub use theory::{verify_theory, EventSummary, TheoryConfig, TheoryReport};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("output directory holds a manifest for a different config: {0}")]
    ManifestMismatch(PathBuf),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Glasso(#[from] GlassoError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Whether the error comes from the user's configuration rather than a
    /// failing computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            BenchError::Config(_) | BenchError::Toml(_) | BenchError::ManifestMismatch(_) | BenchError::Synth(SynthError::Config(_))
        )
    }
}

fn default_knots() -> usize {
    4
}
fn default_degree() -> usize {
    3
}
fn default_landmarks() -> usize {
    20
}
fn default_split() -> f64 {
    0.2
}
fn default_ridge() -> f64 {
    1e-3
}
fn default_identity() -> FeatureSpec {
    FeatureSpec::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Linear,
    Spline {
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default = "default_degree")]
        degree: usize,
    },
    Rff {
        count: usize,
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Kernel Group Lasso with `min(n, landmarks)` Nyström components per variable.
    Kernel {
        kernel: KernelSpec,
        #[serde(default = "default_landmarks")]
        landmarks: usize,
    },
    /// Permutation from a linear Group Lasso on the first `split` of the
    /// training rows, then per-concept ridge regression on spline features.
    TwoStage {
        #[serde(default = "default_split")]
        split: f64,
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    /// Logistic Group Lasso for binary concepts.
    Logistic {
        #[serde(default = "default_identity")]
        features: FeatureSpec,
    },
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Linear => "linear".into(),
            EstimatorSpec::Spline { knots, degree } => format!("spline({knots},{degree})"),
            EstimatorSpec::Rff { count, gamma, .. } => format!("rff({count},{gamma})"),
            EstimatorSpec::Kernel { kernel, landmarks } => {
                let name = match kernel {
                    KernelSpec::Linear => "linear".to_string(),
                    KernelSpec::Polynomial { degree } => format!("poly{degree}"),
                    KernelSpec::Rbf { gamma } => format!("rbf{gamma}"),
                    KernelSpec::Laplacian => "laplacian".to_string(),
                    KernelSpec::Cosine => "cosine".to_string(),
                };
                format!("kernel({name},{landmarks})")
            }
            EstimatorSpec::TwoStage { .. } => "two_stage".into(),
            EstimatorSpec::Logistic { .. } => "logistic".into(),
        }
    }

    /// Per-variable group width, which sets `p_min` in `λ₀`.
    pub fn group_size(&self, n_train: usize) -> usize {
        match self {
            EstimatorSpec::Linear | EstimatorSpec::TwoStage { .. } => 1,
            EstimatorSpec::Spline { knots, degree } => FeatureSpec::Spline {
                knots: *knots,
                degree: *degree,
            }
            .features_per_variable(),
            EstimatorSpec::Rff { count, .. } => *count,
            EstimatorSpec::Kernel { landmarks, .. } => (*landmarks).min(n_train),
            EstimatorSpec::Logistic { features } => features.features_per_variable(),
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        match self {
            EstimatorSpec::Spline { knots, degree } | EstimatorSpec::TwoStage { knots, degree, .. }
                if *knots < 2 || *degree < 1 =>
            {
                bad(format!("spline needs knots >= 2 and degree >= 1, got {knots}/{degree}"))
            }
            EstimatorSpec::TwoStage { split, ridge, .. } if !(*split > 0.0 && *split < 1.0) || !(*ridge >= 0.0) => {
                bad(format!("two_stage split must lie in (0,1) and ridge >= 0, got {split}/{ridge}"))
            }
            EstimatorSpec::Rff { count, gamma, .. } if *count == 0 || !(*gamma > 0.0) => {
                bad(format!("rff needs count >= 1 and gamma > 0, got {count}/{gamma}"))
            }
            EstimatorSpec::Kernel { landmarks, .. } if *landmarks == 0 => bad("kernel needs landmarks >= 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Pearson,
    Spearman,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::Pearson => "pearson",
            Baseline::Spearman => "spearman",
        }
    }
}

fn default_delta() -> f64 {
    0.05
}

/// How `lambda_grid` entries are read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum LambdaMode {
    #[default]
    Absolute,
    /// Multiples of `λ₀(σ, n_train, p_min, d, δ)`.
    Lambda0Multiple {
        #[serde(default = "default_delta")]
        delta: f64,
    },
}


fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub toy: ToyConfig,
    #[serde(default)]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    /// Compute OIS/NIS; defaults to on for binary data.
    #[serde(default)]
    pub impurity: Option<bool>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.toy.validate()?;
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seeds must be non-empty".into()));
        }
        if self.estimators.is_empty() && self.baselines.is_empty() {
            return Err(BenchError::Config("nothing to run: no estimators or baselines".into()));
        }
        if !self.estimators.is_empty() && self.lambda_grid.is_empty() {
            return Err(BenchError::Config("lambda_grid must be non-empty".into()));
        }
        if let Some(bad) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(BenchError::Config(format!("lambda values must be finite and >= 0, got {bad}")));
        }
        if let LambdaMode::Lambda0Multiple { delta } = self.lambda_mode {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(BenchError::Config(format!("delta must lie in (0,1), got {delta}")));
            }
        }
        for e in &self.estimators {
            e.validate()?;
        }
        Ok(())
    }

    pub fn impurity(&self) -> bool {
        self.impurity.unwrap_or(self.toy.binary)
    }

    /// The toy config with its seed replaced.
    pub fn toy_for_seed(&self, seed: u64) -> ToyConfig {
        ToyConfig {
            seed,
            ..self.toy.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::ToyMode;

    const SAMPLE: &str = r#"
lambda_grid = [0.001, 0.01]
seeds = [0, 1]
baselines = ["pearson", "spearman"]

[toy]
n = 100
d = 4
rho = 0.2
mode = "wellspecified"
features = { kind = "spline", knots = 4, degree = 3 }

[[estimators]]
kind = "linear"

[[estimators]]
kind = "kernel"
kernel = { kind = "laplacian" }

[[estimators]]
kind = "two_stage"
"#;

    #[test]
    fn parses_sample_config() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.toy.mode, ToyMode::Wellspecified { features: FeatureSpec::Spline { knots: 4, degree: 3 } });
        assert_eq!(cfg.toy.sigma, 1.0);
        assert_eq!(cfg.estimators.len(), 3);
        assert_eq!(
            cfg.estimators[2],
            EstimatorSpec::TwoStage {
                split: 0.2,
                knots: 4,
                degree: 3,
                ridge: 1e-3
            }
        );
        assert_eq!(cfg.estimators[1].label(), "kernel(laplacian,20)");
        assert_eq!(cfg.lambda_mode, LambdaMode::Absolute);
        assert!(!cfg.impurity());
    }

    #[test]
    fn validation_errors() {
        let empty = SAMPLE.replace("lambda_grid = [0.001, 0.01]", "lambda_grid = []");
        let err = ExperimentConfig::from_toml(&empty).unwrap_err();
        assert!(err.is_config_error() && err.to_string().contains("lambda_grid"), "{err}");
        let neg = SAMPLE.replace("[0.001, 0.01]", "[-1.0]");
        assert!(ExperimentConfig::from_toml(&neg).unwrap_err().is_config_error());
        let no_seeds = SAMPLE.replace("seeds = [0, 1]", "seeds = []");
        assert!(ExperimentConfig::from_toml(&no_seeds).is_err());
        let bad_rho = SAMPLE.replace("rho = 0.2", "rho = 1.0");
        assert!(ExperimentConfig::from_toml(&bad_rho).unwrap_err().is_config_error());
        assert!(ExperimentConfig::from_toml("toy = 3").unwrap_err().is_config_error());
    }
}
