//! Learning the alignment between machine representations and interpretable
//! concepts.
//!
//! Each concept is regressed on all machine variables with a group-sparse
//! penalty (one group per machine variable). The matrix of fitted group norms
//! is turned into a concept-to-variable permutation by maximum-weight
//! matching, and the matched per-concept regressors form the alignment map.
//!
//! Modules:
//! - [`features`]: identity / B-spline / random Fourier feature maps, per-group whitening.
//! - [`glasso`]: Group Lasso solvers (squared and logistic loss) and the theory-driven λ.
//! - [`kernels`]: Gram matrices, Cholesky reparametrization, Nyström, kernel Group Lasso.
//! - [`align`]: matching, correlation baselines, the fitted alignment model.
//! - [`synthgen`]: seeded toy datasets (well- and misspecified, binary labels).
//! - [`metrics`]: permutation error, diagonal R², accuracies, OIS/NIS.
//! - [`bench`]: experiment configs, grid runs, sweeps, Monte Carlo theory checks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod bench;
pub mod data;
pub mod features;
pub mod glasso;
pub mod kernels;
pub mod metrics;
pub mod synthgen;

pub use align::{AlignmentModel, Permutation};
pub use data::SampleMatrix;
pub use features::{FeatureExpansion, FeatureSpec, GroupStructure};
pub use glasso::{GroupLassoFit, GroupLassoProblem, SolverOptions};
pub use kernels::{KernelFit, KernelSpec};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
