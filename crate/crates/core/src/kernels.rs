//! Kernelized alignment.
//!
//! The kernel Group Lasso
//!
//! ```text
//! min_c (1/n)‖y − Σ_j K_j c^j‖² + λ Σ_j ‖c^j‖_{K_j},   ‖c‖_K = √(cᵀKc)
//! ```
//!
//! is reparametrized with `K_j = L_j L_jᵀ` and `γ^j = L_jᵀ c^j` into an
//! ordinary Group Lasso on the stacked design `[L_1 | … | L_d]` with unit group
//! weights. With Nyström landmarks the design block is `K_{n,m} L_{m,m}^{-ᵀ}`
//! instead, and the representer expansion runs over the landmarks only.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{hstack, GroupStructure};
use crate::glasso::{block_coordinate_descent, gram_if_tall, BlockSolver, Blocks, GlassoError, SolverOptions};
use crate::par_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("Gram matrix not PSD within jitter budget")]
    NotPsd,
    #[error("cannot pick {m} landmarks from {n} points")]
    LandmarkCount { m: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Solver(#[from] GlassoError),
}

/// Scalar kernels. `Rbf` with `gamma = 1` is `exp(−(x−y)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    Polynomial { degree: u32 },
    Rbf { gamma: f64 },
    Laplacian,
    Cosine,
}

impl KernelSpec {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            KernelSpec::Linear => x * y,
            KernelSpec::Polynomial { degree } => (1.0 + x * y).powi(degree as i32),
            KernelSpec::Rbf { gamma } => (-gamma * (x - y) * (x - y)).exp(),
            KernelSpec::Laplacian => (-(x - y).abs()).exp(),
            KernelSpec::Cosine => (x * y).cos(),
        }
    }
}

/// `K[ℓ][k] = κ(x_ℓ, x2_k)`; symmetric `κ(x_ℓ, x_k)` when `x2` is absent.
pub fn gram(spec: &KernelSpec, x: &[f64], x2: Option<&[f64]>) -> DMatrix<f64> {
    match x2 {
        Some(other) => DMatrix::from_fn(x.len(), other.len(), |i, j| spec.eval(x[i], other[j])),
        None => {
            let n = x.len();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = spec.eval(x[i], x[j]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        }
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = K + jitter·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

/// Cholesky with escalating diagonal jitter `ε·trace(K)/n`, `ε = 1e-12 … 1e-6`.
pub fn chol_psd(k: &DMatrix<f64>) -> Result<CholeskyFactor, KernelError> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(KernelError::Dimension(format!("Gram matrix is {}x{}", n, k.ncols())));
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(CholeskyFactor {
            lower: c.unpack(),
            jitter: 0.0,
        });
    }
    let scale = (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = 1e-12;
    while eps <= 1e-6 * (1.0 + 1e-9) {
        let jitter = eps * scale;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok(CholeskyFactor {
                lower: c.unpack(),
                jitter,
            });
        }
        eps *= 10.0;
    }
    Err(KernelError::NotPsd)
}

/// Nyström reduced features for one variable.
#[derive(Clone, Debug, PartialEq)]
pub struct Nystrom {
    /// Sorted landmark row indices.
    pub landmarks: Vec<usize>,
    /// `F = K_{n,m} L_{m,m}^{-ᵀ}`, so `F Fᵀ ≈ K`.
    pub features: DMatrix<f64>,
    pub factor: CholeskyFactor,
}

/// Uniformly subsamples `m` landmarks without replacement and builds the
/// reduced feature matrix.
pub fn nystrom_landmarks(spec: &KernelSpec, x: &[f64], m: usize, seed: u64) -> Result<Nystrom, KernelError> {
    nystrom_stream(spec, x, m, seed, 0)
}

fn nystrom_stream(spec: &KernelSpec, x: &[f64], m: usize, seed: u64, stream: u64) -> Result<Nystrom, KernelError> {
    let n = x.len();
    if m == 0 || m > n {
        return Err(KernelError::LandmarkCount { m, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut landmarks = rand::seq::index::sample(&mut rng, n, m).into_vec();
    landmarks.sort_unstable();
    let anchors: Vec<f64> = landmarks.iter().map(|&i| x[i]).collect();
    let factor = chol_psd(&gram(spec, &anchors, None))?;
    let cross = gram(spec, x, Some(&anchors));
    let features = factor
        .lower
        .solve_lower_triangular(&cross.transpose())
        .ok_or(KernelError::NotPsd)?
        .transpose();
    Ok(Nystrom {
        landmarks,
        features,
        factor,
    })
}

/// One group of the kernel design: the reparametrized block plus what is
/// needed to map `γ` back to representer coefficients and to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBlock {
    pub spec: KernelSpec,
    /// Inputs the representer expansion runs over (all training points or landmarks).
    pub anchors: Vec<f64>,
    pub landmarks: Option<Vec<usize>>,
    /// Cholesky factor of the anchor Gram matrix.
    pub factor: CholeskyFactor,
    /// `n × m` design block (`L` itself in the exact case).
    pub design: DMatrix<f64>,
}

impl KernelBlock {
    pub fn exact(spec: KernelSpec, x: &[f64]) -> Result<Self, KernelError> {
        let factor = chol_psd(&gram(&spec, x, None))?;
        Ok(Self {
            spec,
            anchors: x.to_vec(),
            landmarks: None,
            design: factor.lower.clone(),
            factor,
        })
    }

    pub fn nystrom(spec: KernelSpec, x: &[f64], m: usize, seed: u64, stream: u64) -> Result<Self, KernelError> {
        let ny = nystrom_stream(&spec, x, m, seed, stream)?;
        Ok(Self {
            spec,
            anchors: ny.landmarks.iter().map(|&i| x[i]).collect(),
            landmarks: Some(ny.landmarks),
            factor: ny.factor,
            design: ny.features,
        })
    }

    /// Exact blocks when `m ≥ n`, Nyström otherwise.
    pub fn auto(spec: KernelSpec, x: &[f64], m: usize, seed: u64, stream: u64) -> Result<Self, KernelError> {
        if m >= x.len() {
            Self::exact(spec, x)
        } else {
            Self::nystrom(spec, x, m, seed, stream)
        }
    }

    pub fn width(&self) -> usize {
        self.design.ncols()
    }

    /// `c = L^{-ᵀ} γ`.
    pub fn coefficients(&self, gamma: &DVector<f64>) -> DVector<f64> {
        self.factor
            .lower
            .tr_solve_lower_triangular(gamma)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `K(x, anchors) · c`.
    pub fn predict(&self, x: &[f64], coefficients: &DVector<f64>) -> DVector<f64> {
        gram(&self.spec, x, Some(&self.anchors)) * coefficients
    }

    /// `√(cᵀ K_anchors c)` on the raw (unjittered) Gram matrix.
    pub fn rkhs_norm(&self, coefficients: &DVector<f64>) -> f64 {
        let k = gram(&self.spec, &self.anchors, None);
        coefficients.dot(&(k * coefficients)).max(0.0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFit {
    /// Representer coefficients `ĉ^j`, one vector per group.
    pub coefficients: Vec<DVector<f64>>,
    /// Reparametrized coefficients `γ̂^j = L_jᵀ ĉ^j`.
    pub gamma: Vec<DVector<f64>>,
    /// `‖ĉ^j‖_{K_j} = ‖γ̂^j‖`.
    pub group_norms: Vec<f64>,
    pub landmarks: Option<Vec<Vec<usize>>>,
    pub lambda: f64,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Stacked kernel design shared by all concepts, with cached block solvers.
#[derive(Clone, Debug)]
pub struct KernelDesign {
    pub blocks: Vec<KernelBlock>,
    design: DMatrix<f64>,
    groups: GroupStructure,
    solvers: Vec<BlockSolver>,
    gram: Option<DMatrix<f64>>,
}

impl KernelDesign {
    pub fn new(blocks: Vec<KernelBlock>) -> Result<Self, KernelError> {
        let n = blocks.first().map_or(0, |b| b.design.nrows());
        if blocks.iter().any(|b| b.design.nrows() != n) {
            return Err(KernelError::Dimension("kernel blocks disagree on row count".into()));
        }
        let parts: Vec<DMatrix<f64>> = blocks.iter().map(|b| b.design.clone()).collect();
        let design = hstack(n, &parts);
        let groups = GroupStructure::from_sizes(&blocks.iter().map(|b| b.width()).collect::<Vec<_>>());
        let solvers = par_map(&blocks, |b| BlockSolver::new(b.design.tr_mul(&b.design) / n as f64));
        let gram = gram_if_tall(&design);
        Ok(Self {
            blocks,
            design,
            groups,
            solvers,
            gram,
        })
    }

    /// One kernel block per column of `m`, Nyström with `m_landmarks` when
    /// fewer than the row count. Landmark streams are derived per column.
    pub fn from_columns(
        spec: KernelSpec,
        columns: &[&[f64]],
        m_landmarks: usize,
        seed: u64,
    ) -> Result<Self, KernelError> {
        let idx: Vec<usize> = (0..columns.len()).collect();
        let blocks = par_map(&idx, |&j| KernelBlock::auto(spec, columns[j], m_landmarks, seed, j as u64))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(blocks)
    }

    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn groups(&self) -> &GroupStructure {
        &self.groups
    }

    pub fn fit(&self, y: &DVector<f64>, lambda: f64, opts: &SolverOptions) -> Result<KernelFit, KernelError> {
        if y.len() != self.nrows() {
            return Err(KernelError::Dimension(format!("target has {} rows, design {}", y.len(), self.nrows())));
        }
        if !(lambda >= 0.0) {
            return Err(GlassoError::Domain(format!("lambda must be >= 0, got {lambda}")).into());
        }
        let weights = vec![1.0; self.groups.len()];
        let fit = block_coordinate_descent(
            &self.design,
            y,
            &self.groups,
            &weights,
            lambda,
            Blocks::General(&self.solvers),
            self.gram.as_ref(),
            opts,
        )?;
        let gamma: Vec<DVector<f64>> = (0..self.groups.len())
            .map(|j| {
                let r = self.groups.range(j);
                fit.coefficients.rows(r.start, r.len()).into_owned()
            })
            .collect();
        let coefficients = gamma
            .iter()
            .zip(&self.blocks)
            .map(|(g, b)| b.coefficients(g))
            .collect();
        let landmarks = if self.blocks.iter().all(|b| b.landmarks.is_some()) {
            Some(self.blocks.iter().map(|b| b.landmarks.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(KernelFit {
            coefficients,
            group_norms: gamma.iter().map(|g| g.norm()).collect(),
            gamma,
            landmarks,
            lambda,
            objective: fit.objective,
            iterations: fit.iterations,
            kkt_residual: fit.kkt_residual,
        })
    }

    /// In-sample predictions `Σ_j K_{n,anchors_j} ĉ^j`, using the training
    /// inputs `columns`.
    pub fn predict_training(&self, columns: &[&[f64]], fit: &KernelFit) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows());
        for (j, b) in self.blocks.iter().enumerate() {
            out += b.predict(columns[j], &fit.coefficients[j]);
        }
        out
    }

    /// Kernel-form objective evaluated at representer coefficients.
    pub fn kernel_objective(&self, columns: &[&[f64]], y: &DVector<f64>, fit: &KernelFit) -> f64 {
        let r = y - self.predict_training(columns, fit);
        let penalty: f64 = self
            .blocks
            .iter()
            .zip(&fit.coefficients)
            .map(|(b, c)| b.rkhs_norm(c))
            .sum();
        r.norm_squared() / self.nrows() as f64 + fit.lambda * penalty
    }

    /// Fits every concept column; row `i` of the norm matrix is concept `i`.
    pub fn fit_all(
        &self,
        concepts: &[DVector<f64>],
        lambda: f64,
        opts: &SolverOptions,
    ) -> Result<(DMatrix<f64>, Vec<KernelFit>), KernelError> {
        let fits = par_map(concepts, |y| self.fit(y, lambda, opts))
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| match e {
                    KernelError::Solver(s) => KernelError::Solver(GlassoError::Concept {
                        concept: i,
                        source: Box::new(s),
                    }),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let d = self.groups.len();
        Ok((DMatrix::from_fn(fits.len(), d, |i, j| fits[i].group_norms[j]), fits))
    }
}

/// Kernel Group Lasso for one concept over prebuilt blocks.
pub fn fit_kernel_group_lasso(
    concept: &DVector<f64>,
    blocks: &[KernelBlock],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<KernelFit, KernelError> {
    KernelDesign::new(blocks.to_vec())?.fit(concept, lambda, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rbf_gram_two_points() {
        let k = gram(&KernelSpec::Rbf { gamma: 1.0 }, &[0.0, 1.0], None);
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(k, DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]), epsilon = 1e-15);
        assert_eq!(gram(&KernelSpec::Rbf { gamma: 1.0 }, &[0.3], None), DMatrix::from_element(1, 1, 1.0));
        let lap = gram(&KernelSpec::Laplacian, &[0.0, 2.0], None);
        assert_abs_diff_eq!(lap[(0, 1)], 0.1353352832366127, epsilon = 1e-15);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let x: Vec<f64> = (0..17).map(|i| (i as f64 * 0.37).sin()).collect();
        for spec in [
            KernelSpec::Polynomial { degree: 3 },
            KernelSpec::Rbf { gamma: 1.0 },
            KernelSpec::Laplacian,
            KernelSpec::Cosine,
        ] {
            let k = gram(&spec, &x, None);
            assert_eq!(k, k.transpose());
        }
    }

    #[test]
    fn cholesky_small_cases() {
        assert_eq!(chol_psd(&DMatrix::identity(3, 3)).unwrap().lower, DMatrix::identity(3, 3));
        let f = chol_psd(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0])).unwrap();
        assert_abs_diff_eq!(f.lower, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]), epsilon = 1e-15);
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_rank_one_needs_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let k = &v * v.transpose();
        let f = chol_psd(&k).unwrap();
        assert!(f.jitter > 0.0);
        let err = (&f.lower * f.lower.transpose() - &k).norm();
        assert!(err <= 1e-6 * k.trace(), "{err}");
    }

    #[test]
    fn cholesky_indefinite_fails() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(chol_psd(&k), Err(KernelError::NotPsd));
    }

    #[test]
    fn nystrom_full_rank_is_exact() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let spec = KernelSpec::Laplacian;
        let ny = nystrom_landmarks(&spec, &x, 12, 3).unwrap();
        let k = gram(&spec, &x, None);
        assert!((&ny.features * ny.features.transpose() - &k).amax() < 1e-8);
        let one = nystrom_landmarks(&spec, &x, 1, 3).unwrap();
        let approx = &one.features * one.features.transpose();
        assert_eq!(approx.rank(1e-10), 1);
        assert_eq!(nystrom_landmarks(&spec, &x, 13, 3).unwrap_err(), KernelError::LandmarkCount { m: 13, n: 12 });
    }

    #[test]
    fn nystrom_rbf_relative_error() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spec = KernelSpec::Rbf { gamma: 1.0 };
        let ny = nystrom_landmarks(&spec, &x, 20, 5).unwrap();
        let k = gram(&spec, &x, None);
        let rel = (&ny.features * ny.features.transpose() - &k).norm() / k.norm();
        assert!(rel <= 0.1, "{rel}");
    }

    #[test]
    fn norm_identity_and_representer_form() {
        let x1: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let x2: Vec<f64> = (0..30).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let y = DVector::from_fn(30, |i, _| x1[i].tanh() * 1.5);
        let cols: Vec<&[f64]> = vec![&x1, &x2];
        let design = KernelDesign::from_columns(KernelSpec::Laplacian, &cols, 30, 0).unwrap();
        let fit = design.fit(&y, 0.05, &SolverOptions::default()).unwrap();
        for (j, b) in design.blocks.iter().enumerate() {
            assert_abs_diff_eq!(fit.group_norms[j], b.rkhs_norm(&fit.coefficients[j]), epsilon = 1e-8);
        }
        let via_l = design.design() * DVector::from_iterator(60, fit.gamma.iter().flat_map(|g| g.iter().copied()));
        assert!((design.predict_training(&cols, &fit) - via_l).amax() < 1e-8);
        assert_abs_diff_eq!(design.kernel_objective(&cols, &y, &fit), fit.objective, epsilon = 1e-8);
        assert!(fit.group_norms[0] > fit.group_norms[1]);
    }
}
