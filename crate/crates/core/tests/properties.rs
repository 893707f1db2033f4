use concept_align::align::{average_ranks, match_permutation, Permutation};
use concept_align::features::{expand, standardize_groups, FeatureSpec};
use concept_align::glasso::{fit_all_concepts, fit_group_lasso, group_soft_threshold, GroupLassoProblem, SolverOptions};
use concept_align::metrics::mpe;
use concept_align::synthgen::{generate, ToyConfig, ToyDataset, ToyMode};
use concept_align::SampleMatrix;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn brute_force_best(w: &DMatrix<f64>) -> f64 {
    fn rec(w: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == w.nrows() {
            *best = best.max(acc);
            return;
        }
        for c in 0..w.ncols() {
            if !used[c] {
                used[c] = true;
                rec(w, row + 1, used, acc + w[(row, c)], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    rec(w, 0, &mut vec![false; w.ncols()], 0.0, &mut best);
    best
}

fn total(w: &DMatrix<f64>, p: &Permutation) -> f64 {
    (0..w.nrows()).map(|i| w[(i, p.get(i))]).sum()
}

fn matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn sized_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=6).prop_flat_map(matrix)
}

proptest! {
    #[test]
    fn matching_attains_brute_force_optimum(w in sized_matrix()) {
        let p = match_permutation(&w).unwrap();
        prop_assert!((total(&w, &p) - brute_force_best(&w)).abs() <= 1e-9);
    }

    #[test]
    fn matching_ignores_row_offsets(w in sized_matrix(), shift in prop::collection::vec(-3.0f64..3.0, 6)) {
        let d = w.nrows();
        // Integer-valued copy so the shifted sums stay exact and ties persist.
        let w = w.map(|v| v.round());
        let shifted = DMatrix::from_fn(d, d, |i, j| w[(i, j)] + shift[i].round());
        prop_assert_eq!(match_permutation(&w).unwrap(), match_permutation(&shifted).unwrap());
    }

    #[test]
    fn matching_follows_column_relabelling(w in sized_matrix(), seed in 0u64..1000) {
        let d = w.nrows();
        let mut order: Vec<usize> = (0..d).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..d).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        // Column j of `moved` is column order[j] of `w`.
        let moved = DMatrix::from_fn(d, d, |i, j| w[(i, order[j])]);
        let a = match_permutation(&w).unwrap();
        let b = match_permutation(&moved).unwrap();
        // Continuous draws: the optimum is unique almost surely.
        for i in 0..d {
            prop_assert_eq!(order[b.get(i)], a.get(i));
        }
    }

    #[test]
    fn soft_threshold_shrinks_norm(v in prop::collection::vec(-10.0f64..10.0, 1..6), t in 0.0f64..20.0) {
        let z = DVector::from_vec(v);
        let out = group_soft_threshold(&z, t);
        let expected = (z.norm() - t).max(0.0);
        prop_assert!((out.norm() - expected).abs() <= 1e-9 * (1.0 + z.norm()));
        if out.norm() > 0.0 {
            prop_assert!((out.dot(&z) - out.norm() * z.norm()).abs() <= 1e-9 * z.norm_squared());
        }
    }

    #[test]
    fn ranks_are_a_permutation_of_averages(v in prop::collection::vec(-3i32..3, 1..20)) {
        let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
        let r = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(r[i] < r[j]);
                } else if x[i] == x[j] {
                    prop_assert_eq!(r[i], r[j]);
                }
            }
        }
    }
}

fn gaussian(n: usize, d: usize, seed: u64) -> SampleMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SampleMatrix::with_prefix(DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal)), "M")
}

fn objective(p: &GroupLassoProblem<'_>, b: &DVector<f64>) -> f64 {
    p.objective(b)
}

#[test]
fn group_lasso_beats_random_perturbations() {
    let m = gaussian(150, 5, 11);
    let phi = standardize_groups(&expand(&m, &FeatureSpec::Spline { knots: 4, degree: 2 }).unwrap()).unwrap();
    let y = DVector::from_fn(150, |i, _| m.column(0)[i].tanh() - 0.5 * m.column(3)[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for lambda in [0.0, 0.01, 0.1, 0.5] {
        let p = GroupLassoProblem {
            design: &phi.design,
            target: &y,
            groups: &phi.groups,
            lambda,
        };
        let fit = fit_group_lasso(&p, &SolverOptions::default()).unwrap();
        let best = objective(&p, &fit.coefficients);
        for _ in 0..200 {
            let step = DVector::from_fn(fit.coefficients.len(), |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-3);
            assert!(objective(&p, &(&fit.coefficients + step)) >= best - 1e-12, "lambda {lambda}");
        }
    }
}

#[test]
fn correlated_spline_design_converges_and_is_certified() {
    // High correlation keeps most groups active; the solver must still certify.
    let mut cfg = ToyConfig::new(400, 12, ToyMode::Misspecified);
    cfg.rho = 0.9;
    cfg.seed = 4;
    let ds = generate(&cfg).unwrap();
    let phi = standardize_groups(&expand(&ds.m_train, &FeatureSpec::Spline { knots: 4, degree: 3 }).unwrap()).unwrap();
    for lambda in [1e-4, 1e-3, 1e-2] {
        let (norms, fits) = fit_all_concepts(&phi, &ds.c_train, lambda, &SolverOptions::default()).unwrap();
        assert_eq!(norms.shape(), (12, 12));
        for (i, f) in fits.iter().enumerate() {
            assert!(f.kkt_residual <= 1e-6);
            for w in f.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].abs(), "lambda {lambda}, concept {i}");
            }
            // Each concept's fit equals the standalone solve.
            let y = ds.c_train.column_vector(i);
            let p = GroupLassoProblem {
                design: &phi.design,
                target: &y,
                groups: &phi.groups,
                lambda,
            };
            let alone = fit_group_lasso(&p, &SolverOptions::default()).unwrap();
            assert!((alone.objective - f.objective).abs() <= 1e-12 * f.objective.abs().max(1.0));
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let mut cfg = ToyConfig::new(300, 6, ToyMode::Misspecified);
    cfg.rho = 0.3;
    cfg.seed = 9;
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.m_train, b.m_train);
    assert_eq!(a.c_test, b.c_test);
    assert_eq!(a.true_permutation, b.true_permutation);
    cfg.seed = 10;
    let c = generate(&cfg).unwrap();
    assert_ne!(a.m_train, c.m_train);
}

#[test]
fn dataset_round_trips_through_disk() {
    let mut cfg = ToyConfig::new(200, 5, ToyMode::Wellspecified { features: FeatureSpec::Identity });
    cfg.binary = true;
    cfg.seed = 3;
    let ds = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = ToyDataset::load(dir.path()).unwrap();
    assert_eq!(back.m_train, ds.m_train);
    assert_eq!(back.c_test, ds.c_test);
    assert_eq!(back.true_permutation, ds.true_permutation);
    let (b0, b1) = (ds.binary.as_ref().unwrap(), back.binary.as_ref().unwrap());
    assert_eq!(b0.y_test, b1.y_test);
    assert_eq!(b0.c_train, b1.c_train);
}

#[test]
fn mpe_counts_misplaced_concepts() {
    let truth = Permutation::new(vec![2, 0, 1, 3]).unwrap();
    assert_eq!(mpe(&truth, &truth).unwrap(), 0.0);
    let est = Permutation::new(vec![0, 2, 1, 3]).unwrap();
    assert_eq!(mpe(&est, &truth).unwrap(), 0.5);
}
