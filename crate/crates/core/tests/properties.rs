use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sparse_kg::belief::{fuse_posterior, rls_update, BetaCounts, GroupStructure, LinearBelief, SparseBeliefState};
use sparse_kg::kg::kg_values_sparse;
use sparse_kg::lasso::{objective, solve_batch};
use sparse_kg::sim::{count_misclassified_groups, opportunity_cost};

fn spd(entries: &[f64], n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_column_slice(n, n, &entries[..n * n]);
    &a * a.transpose() + DMatrix::identity(n, n) * ridge
}

fn matrix_and_vectors(n_max: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1..=n_max).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-3.0f64..3.0, 2 * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_shrinks_and_stays_psd((n, a, b, v) in matrix_and_vectors(6)) {
        let prior = spd(&a, n, 0.05);
        let lasso = spd(&b, n, 0.05);
        let groups = GroupStructure::uniform(n, 1).unwrap();
        let state = SparseBeliefState::new(DVector::from_column_slice(&v[..n]), prior.clone(), vec![BetaCounts::new(1.0, 1.0).unwrap(); n], groups).unwrap();
        let support: Vec<usize> = (0..n).collect();
        let post = fuse_posterior(&state, &DVector::from_column_slice(&v[n..]), &lasso, &support).unwrap();
        let s = &post.sigma_vartheta;
        prop_assert!((s - s.transpose()).amax() <= 1e-12 * s.amax().max(1.0));
        prop_assert!(s.clone().symmetric_eigenvalues().min() > 0.0);
        // prior minus posterior is positive semidefinite
        let gap = (&prior - s).symmetric_eigenvalues().min();
        prop_assert!(gap >= -1e-10 * prior.amax());
    }

    #[test]
    fn sequential_rls_equals_conjugate_posterior((n, a, _b, v) in matrix_and_vectors(4), rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 1..8), noise_var in 0.1f64..3.0) {
        let prior = spd(&a, n, 0.1);
        let mean = DVector::from_column_slice(&v[..n]);
        let mut belief = LinearBelief::new(mean.clone(), prior.clone()).unwrap();
        let xs: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_column_slice(&r[..n])).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[4]).collect();
        for (x, &y) in xs.iter().zip(&ys) {
            belief = rls_update(&belief, x, y, noise_var).unwrap();
        }
        // Σ' = (Σ⁻¹ + XᵀX/σ²)⁻¹,  ϑ' = Σ'(Σ⁻¹ϑ + Xᵀy/σ²)
        let prior_prec = prior.clone().try_inverse().unwrap();
        let mut prec = prior_prec.clone();
        let mut rhs = &prior_prec * &mean;
        for (x, &y) in xs.iter().zip(&ys) {
            prec += x * x.transpose() / noise_var;
            rhs += x * (y / noise_var);
        }
        let cov = prec.try_inverse().unwrap();
        let post_mean = &cov * rhs;
        let scale = cov.amax().max(1.0);
        prop_assert!((&belief.sigma_vartheta - &cov).amax() <= 1e-9 * scale);
        prop_assert!((&belief.vartheta - &post_mean).amax() <= 1e-9 * post_mean.amax().max(1.0) * scale);
    }

    #[test]
    fn lasso_solution_beats_perturbations(seed in 0u64..1000, lambda in 0.01f64..5.0, dirs in prop::collection::vec(-1.0f64..1.0, 24)) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let groups = GroupStructure::contiguous(&[3, 2, 1]).unwrap();
        let x = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let gram = x.transpose() * &x;
        let moment = x.transpose() * y;
        let beta = solve_batch(&gram, &moment, lambda, &groups, 1e-9).unwrap().beta;
        let best = objective(&gram, &moment, &beta, lambda, &groups);
        for d in dirs.chunks(6) {
            for step in [1e-3, 1e-1] {
                let trial = &beta + DVector::from_column_slice(d) * step;
                prop_assert!(objective(&gram, &moment, &trial, lambda, &groups) >= best - 1e-9);
            }
        }
    }

    #[test]
    fn sparse_kg_values_are_nonnegative((n, a, _b, v) in matrix_and_vectors(4), alt in prop::collection::vec(-2.0f64..2.0, 24), xi in 0.5f64..4.0, eta in 0.5f64..4.0) {
        let groups = GroupStructure::uniform(n, 1).unwrap();
        let state = SparseBeliefState::new(DVector::from_column_slice(&v[..n]), spd(&a, n, 0.01), vec![BetaCounts::new(xi, eta).unwrap(); n], groups).unwrap();
        let alts = DMatrix::from_fn(6, n, |i, j| alt[i * 4 + j]);
        for kg in kg_values_sparse(&state, &alts, 0.5, 16).unwrap() {
            prop_assert!(kg >= 0.0 && kg.is_finite());
        }
    }

    #[test]
    fn metric_bounds(mu in prop::collection::vec(-50.0f64..50.0, 1..20), pick in 0usize..20, est in prop::collection::btree_set(0usize..10, 0..10), truth in prop::collection::btree_set(0usize..10, 0..10)) {
        let chosen = pick % mu.len();
        let oc = opportunity_cost(&mu, chosen).unwrap();
        let range = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - mu.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(oc >= 0.0 && oc <= range);
        let est: Vec<usize> = est.into_iter().collect();
        let truth: Vec<usize> = truth.into_iter().collect();
        let mis = count_misclassified_groups(&est, &truth, 10).unwrap();
        prop_assert!(mis <= 10);
        prop_assert_eq!(mis, count_misclassified_groups(&truth, &est, 10).unwrap());
    }
}
