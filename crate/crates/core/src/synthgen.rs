//! Seeded toy datasets.
//!
//! Machine variables are equicorrelated Gaussians. Concepts are generated from
//! a uniformly random permutation of them, either linearly in a feature map
//! ("wellspecified") or through random monotone diffeomorphisms
//! ("misspecified"). Each concept reads exactly one machine variable.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Permutation;
use crate::data::{DataError, SampleMatrix};
use crate::features::{expand, standardize_groups, ColumnMap, FeatureError, FeatureSpec, GroupTransform};
use crate::glasso::{lambda0, GlassoError};

/// δ used for the λ₀ that scales wellspecified signal norms.
pub const SIGNAL_DELTA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error("constant column {0} cannot be binarized")]
    ConstantColumn(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Glasso(#[from] GlassoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ToyMode {
    Wellspecified { features: FeatureSpec },
    Misspecified,
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub rho: f64,
    /// Correlation of the test split; defaults to `rho`.
    #[serde(default)]
    pub test_rho: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(flatten)]
    pub mode: ToyMode,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to 0.8, or 0.5 with binary labels.
    #[serde(default)]
    pub train_fraction: Option<f64>,
    /// Also produce binarized concepts and downstream labels.
    #[serde(default)]
    pub binary: bool,
    /// Absolute range for wellspecified signal norms; defaults to `[16λ₀, 32λ₀]`.
    #[serde(default)]
    pub signal_range: Option<(f64, f64)>,
}

impl ToyConfig {
    pub fn new(n: usize, d: usize, mode: ToyMode) -> Self {
        Self {
            n,
            d,
            rho: 0.0,
            test_rho: None,
            sigma: 1.0,
            mode,
            seed: 0,
            train_fraction: None,
            binary: false,
            signal_range: None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad_rho = |r: f64| !(0.0..1.0).contains(&r);
        if self.n < 10 {
            return Err(SynthError::Config(format!("n must be >= 10, got {}", self.n)));
        }
        if self.d == 0 {
            return Err(SynthError::Config("d must be >= 1".into()));
        }
        if bad_rho(self.rho) || self.test_rho.is_some_and(bad_rho) {
            return Err(SynthError::Config(format!("rho must lie in [0,1), got {} / {:?}", self.rho, self.test_rho)));
        }
        if !(self.sigma >= 0.0) {
            return Err(SynthError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        let f = self.train_fraction();
        if !(f > 0.0 && f < 1.0) {
            return Err(SynthError::Config(format!("train fraction must lie in (0,1), got {f}")));
        }
        let n_train = self.n_train();
        if n_train < 2 || self.n - n_train < 1 {
            return Err(SynthError::Config(format!("split leaves {n_train} train / {} test rows", self.n - n_train)));
        }
        Ok(())
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction.unwrap_or(if self.binary { 0.5 } else { 0.8 })
    }

    pub fn n_train(&self) -> usize {
        (self.n as f64 * self.train_fraction()).round() as usize
    }
}

/// Strictly increasing smooth maps used by the misspecified generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diffeomorphism {
    Identity,
    CubicPlus,
    Sinh,
    TanhPlus,
    OddExp,
    ArctanPlus,
}

impl Diffeomorphism {
    pub const LIBRARY: [Diffeomorphism; 6] = [
        Diffeomorphism::Identity,
        Diffeomorphism::CubicPlus,
        Diffeomorphism::Sinh,
        Diffeomorphism::TanhPlus,
        Diffeomorphism::OddExp,
        Diffeomorphism::ArctanPlus,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Diffeomorphism::Identity => x,
            Diffeomorphism::CubicPlus => x + x * x * x / 3.0,
            Diffeomorphism::Sinh => x.sinh(),
            Diffeomorphism::TanhPlus => x.tanh() + 0.1 * x,
            Diffeomorphism::OddExp => x.signum() * x.abs().exp_m1(),
            Diffeomorphism::ArctanPlus => x.atan() + 0.05 * x,
        }
    }
}

/// Parameters of the concept-generating process, indexed by machine variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GroundTruth {
    Wellspecified {
        lambda0: f64,
        /// `β*_j` for machine variable `j` (in whitened feature coordinates).
        coefficients: Vec<Vec<f64>>,
        maps: Vec<ColumnMap>,
        transforms: Vec<GroupTransform>,
    },
    Misspecified {
        functions: Vec<Diffeomorphism>,
        weights: Vec<f64>,
    },
}

impl GroundTruth {
    /// Noise-free concepts: column `i` is the signal of machine variable `π(i)`.
    pub fn signal(&self, m: &SampleMatrix, perm: &Permutation) -> Result<SampleMatrix, SynthError> {
        let n = m.nrows();
        let mut out = DMatrix::zeros(n, perm.len());
        for i in 0..perm.len() {
            let j = perm.get(i);
            let x = m.column(j);
            let col: DVector<f64> = match self {
                GroundTruth::Wellspecified {
                    coefficients,
                    maps,
                    transforms,
                    ..
                } => {
                    let block = transforms[j].apply(&maps[j].apply(x)?);
                    block * DVector::from_column_slice(&coefficients[j])
                }
                GroundTruth::Misspecified { functions, weights } => {
                    DVector::from_iterator(n, x.iter().map(|&v| weights[j] * functions[j].apply(v)))
                }
            };
            out.column_mut(i).copy_from(&col);
        }
        Ok(SampleMatrix::with_prefix(out, "C"))
    }
}

/// Binarized concepts and downstream labels for both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryLabels {
    pub c_train: SampleMatrix,
    pub c_test: SampleMatrix,
    pub rule: DownstreamRule,
    pub y_train: DVector<f64>,
    pub y_test: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub m_train: SampleMatrix,
    pub m_test: SampleMatrix,
    pub c_train: SampleMatrix,
    pub c_test: SampleMatrix,
    pub true_permutation: Permutation,
    pub truth: GroundTruth,
    pub binary: Option<BinaryLabels>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_M_TRAIN: u64 = 1;
const STREAM_M_TEST: u64 = 2;
const STREAM_PARAMS: u64 = 3;
const STREAM_NOISE_TRAIN: u64 = 4;
const STREAM_NOISE_TEST: u64 = 5;
const STREAM_LABELS: u64 = 6;

fn correlated_gaussian(n: usize, d: usize, rho: f64, rng: &mut ChaCha8Rng) -> SampleMatrix {
    let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut values = DMatrix::zeros(n, d);
    for i in 0..n {
        let g: f64 = rng.sample(StandardNormal);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            values[(i, j)] = a * z + b * g;
        }
    }
    SampleMatrix::with_prefix(values, "M")
}

/// `n` draws from `N(0, (1−ρ)I + ρ𝟙𝟙ᵀ)` as `√(1−ρ)·z + √ρ·g·𝟏`.
pub fn sample_correlated_gaussian(n: usize, d: usize, rho: f64, seed: u64) -> Result<SampleMatrix, SynthError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(SynthError::Config(format!("rho must lie in [0,1), got {rho}")));
    }
    Ok(correlated_gaussian(n, d, rho, &mut rng_for(seed, 0)))
}

fn random_permutation(d: usize, rng: &mut ChaCha8Rng) -> Permutation {
    let mut mapping: Vec<usize> = (0..d).collect();
    mapping.shuffle(rng);
    Permutation::new(mapping).expect("shuffle of 0..d")
}

fn add_noise(c: &mut SampleMatrix, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let noise = DMatrix::from_fn(c.nrows(), c.ncols(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let names = c.names().to_vec();
    *c = SampleMatrix::new(c.values() + noise, names).expect("same shape");
}

/// Generated concepts for given machine samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDraw {
    pub c_train: SampleMatrix,
    pub c_test: SampleMatrix,
    pub permutation: Permutation,
    pub truth: GroundTruth,
}

fn finish_draw(
    truth: GroundTruth,
    permutation: Permutation,
    m_train: &SampleMatrix,
    m_test: &SampleMatrix,
    sigma: f64,
    seed: u64,
) -> Result<ConceptDraw, SynthError> {
    let mut c_train = truth.signal(m_train, &permutation)?;
    let mut c_test = truth.signal(m_test, &permutation)?;
    add_noise(&mut c_train, sigma, &mut rng_for(seed, STREAM_NOISE_TRAIN));
    add_noise(&mut c_test, sigma, &mut rng_for(seed, STREAM_NOISE_TEST));
    Ok(ConceptDraw {
        c_train,
        c_test,
        permutation,
        truth,
    })
}

/// `C_i = φ(M_{π(i)})ᵀ β*_{π(i)} + ε_i` on the whitened features of the training
/// split, with `‖β*_j‖ ~ U[lo, hi]` (default `[16λ₀, 32λ₀]`, `δ = 0.05`) and a
/// uniform direction.
pub fn gen_wellspecified(
    m_train: &SampleMatrix,
    m_test: &SampleMatrix,
    spec: &FeatureSpec,
    sigma: f64,
    seed: u64,
    signal_range: Option<(f64, f64)>,
) -> Result<ConceptDraw, SynthError> {
    let phi = standardize_groups(&expand(m_train, spec)?)?;
    let d = m_train.ncols();
    // A noiseless draw still needs a nonzero signal scale.
    let scale_sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let l0 = lambda0(scale_sigma, m_train.nrows(), phi.groups.p_min(), d, SIGNAL_DELTA)?;
    let (lo, hi) = signal_range.unwrap_or((16.0 * l0, 32.0 * l0));
    if !(lo > 0.0 && hi >= lo) {
        return Err(SynthError::Config(format!("bad signal range [{lo}, {hi}]")));
    }
    let mut rng = rng_for(seed, STREAM_PARAMS);
    let coefficients = (0..d)
        .map(|j| {
            let p = phi.groups.size(j);
            let dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let radius = if hi > lo { rng.random_range(lo..hi) } else { lo };
            (dir.normalize() * radius).as_slice().to_vec()
        })
        .collect();
    let permutation = random_permutation(d, &mut rng);
    let truth = GroundTruth::Wellspecified {
        lambda0: l0,
        coefficients,
        maps: phi.maps.clone(),
        transforms: phi.transforms.clone().expect("standardized"),
    };
    finish_draw(truth, permutation, m_train, m_test, sigma, seed)
}

/// `C_i = w_{π(i)} f_{π(i)}(M_{π(i)}) + ε_i` with `f` uniform over the library
/// and `w ~ U[−2, 2]`.
pub fn gen_misspecified(m_train: &SampleMatrix, m_test: &SampleMatrix, sigma: f64, seed: u64) -> Result<ConceptDraw, SynthError> {
    let d = m_train.ncols();
    let mut rng = rng_for(seed, STREAM_PARAMS);
    let functions = (0..d)
        .map(|_| Diffeomorphism::LIBRARY[rng.random_range(0..Diffeomorphism::LIBRARY.len())])
        .collect();
    let weights = (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let permutation = random_permutation(d, &mut rng);
    finish_draw(GroundTruth::Misspecified { functions, weights }, permutation, m_train, m_test, sigma, seed)
}

/// Per-column range midpoints.
pub fn midpoints(c: &SampleMatrix) -> Result<Vec<f64>, SynthError> {
    (0..c.ncols())
        .map(|j| {
            let col = c.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                Err(SynthError::ConstantColumn(j))
            } else {
                Ok(0.5 * (lo + hi))
            }
        })
        .collect()
}

/// `1` where a value is at most its column's midpoint, else `0`.
pub fn binarize_with(c: &SampleMatrix, mids: &[f64]) -> SampleMatrix {
    let v = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| if c.values()[(i, j)] <= mids[j] { 1.0 } else { 0.0 });
    SampleMatrix::new(v, c.names().to_vec()).expect("same names")
}

/// Threshold each column at the midpoint of its empirical range.
pub fn binarize_midpoint(c: &SampleMatrix) -> Result<SampleMatrix, SynthError> {
    Ok(binarize_with(c, &midpoints(c)?))
}

/// `y = 1` iff the selected binary concepts sum to at least `threshold`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamRule {
    pub selected: Vec<usize>,
    pub threshold: usize,
}

impl DownstreamRule {
    pub fn for_dimension(d: usize) -> (usize, usize) {
        let k = (d / 5).clamp(1, 3).min(d.max(1));
        let threshold = (d / 10).max(1);
        (k, threshold)
    }

    pub fn apply(&self, c_bin: &SampleMatrix) -> DVector<f64> {
        DVector::from_fn(c_bin.nrows(), |i, _| {
            let s: f64 = self.selected.iter().map(|&j| c_bin.values()[(i, j)]).sum();
            if s >= self.threshold as f64 {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Samples `k = max(1, min(3, ⌊d/5⌋))` concepts without replacement; the
/// label fires when their sum reaches `max(1, ⌊d/10⌋)`.
pub fn make_downstream_labels(c_bin: &SampleMatrix, seed: u64) -> (DownstreamRule, DVector<f64>) {
    let d = c_bin.ncols();
    let (k, threshold) = DownstreamRule::for_dimension(d);
    let mut rng = rng_for(seed, STREAM_LABELS);
    let mut selected = rand::seq::index::sample(&mut rng, d, k).into_vec();
    selected.sort_unstable();
    let rule = DownstreamRule { selected, threshold };
    let y = rule.apply(c_bin);
    (rule, y)
}

/// Full toy dataset for a config; identical configs give identical datasets.
pub fn generate(config: &ToyConfig) -> Result<ToyDataset, SynthError> {
    config.validate()?;
    let n_train = config.n_train();
    let n_test = config.n - n_train;
    let m_train = correlated_gaussian(n_train, config.d, config.rho, &mut rng_for(config.seed, STREAM_M_TRAIN));
    let m_test = correlated_gaussian(
        n_test,
        config.d,
        config.test_rho.unwrap_or(config.rho),
        &mut rng_for(config.seed, STREAM_M_TEST),
    );
    let draw = match &config.mode {
        ToyMode::Wellspecified { features } => {
            gen_wellspecified(&m_train, &m_test, features, config.sigma, config.seed, config.signal_range)?
        }
        ToyMode::Misspecified => gen_misspecified(&m_train, &m_test, config.sigma, config.seed)?,
    };
    let binary = if config.binary {
        let mids = midpoints(&draw.c_train.vstack(&draw.c_test)?)?;
        let c_train = binarize_with(&draw.c_train, &mids);
        let c_test = binarize_with(&draw.c_test, &mids);
        let (rule, y_train) = make_downstream_labels(&c_train, config.seed);
        let y_test = rule.apply(&c_test);
        Some(BinaryLabels {
            c_train,
            c_test,
            rule,
            y_train,
            y_test,
        })
    } else {
        None
    };
    Ok(ToyDataset {
        config: config.clone(),
        m_train,
        m_test,
        c_train: draw.c_train,
        c_test: draw.c_test,
        true_permutation: draw.permutation,
        truth: draw.truth,
        binary,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: ToyConfig,
    true_permutation: Permutation,
    truth: GroundTruth,
    downstream: Option<DownstreamRule>,
}

fn vector_table(v: &DVector<f64>, name: &str) -> SampleMatrix {
    SampleMatrix::new(DMatrix::from_column_slice(v.len(), 1, v.as_slice()), vec![name.to_owned()]).expect("one column")
}

impl ToyDataset {
    /// Writes one CSV per matrix plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        self.m_train.save(&dir.join("m_train.csv"))?;
        self.m_test.save(&dir.join("m_test.csv"))?;
        self.c_train.save(&dir.join("c_train.csv"))?;
        self.c_test.save(&dir.join("c_test.csv"))?;
        if let Some(b) = &self.binary {
            b.c_train.save(&dir.join("cbin_train.csv"))?;
            b.c_test.save(&dir.join("cbin_test.csv"))?;
            vector_table(&b.y_train, "y").save(&dir.join("y_train.csv"))?;
            vector_table(&b.y_test, "y").save(&dir.join("y_test.csv"))?;
        }
        let manifest = Manifest {
            format: 1,
            config: self.config.clone(),
            true_permutation: self.true_permutation.clone(),
            truth: self.truth.clone(),
            downstream: self.binary.as_ref().map(|b| b.rule.clone()),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let binary = match manifest.downstream {
            Some(rule) => {
                let y = |f: &str| -> Result<DVector<f64>, SynthError> {
                    Ok(SampleMatrix::load(&dir.join(f))?.column_vector(0))
                };
                Some(BinaryLabels {
                    c_train: SampleMatrix::load(&dir.join("cbin_train.csv"))?,
                    c_test: SampleMatrix::load(&dir.join("cbin_test.csv"))?,
                    rule,
                    y_train: y("y_train.csv")?,
                    y_test: y("y_test.csv")?,
                })
            }
            None => None,
        };
        Ok(Self {
            config: manifest.config,
            m_train: SampleMatrix::load(&dir.join("m_train.csv"))?,
            m_test: SampleMatrix::load(&dir.join("m_test.csv"))?,
            c_train: SampleMatrix::load(&dir.join("c_train.csv"))?,
            c_test: SampleMatrix::load(&dir.join("c_test.csv"))?,
            true_permutation: manifest.true_permutation,
            truth: manifest.truth,
            binary,
        })
    }
}
