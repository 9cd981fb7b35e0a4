mod common;

use common::{ids, matmul, rel_err, ridge_oracle, rng, uniform};
use dmap_core::linmap::{ridge_objective, stationarity_residual};
use dmap_core::{
    build_label_matrix, class_mean_prototypes, predict_semantic, solve_ridge_map,
    solve_ridge_map_targets, DMatrix, FeatureMatrix,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn class_means_match_accumulation_oracle() {
    let mut r = rng(3);
    let x = uniform(&mut r, 8, 40);
    let classes = ids("c", 4);
    let labels: Vec<String> = (0..40).map(|i| classes[i % 4].clone()).collect();
    let protos = class_mean_prototypes(&FeatureMatrix::from_matrix(x.clone()).unwrap(), &labels, &classes).unwrap();
    for (c, class) in classes.iter().enumerate() {
        for row in 0..8 {
            let mut sum = 0.0;
            let mut count = 0;
            for (i, l) in labels.iter().enumerate() {
                if l == class {
                    sum += x[(row, i)];
                    count += 1;
                }
            }
            assert!((protos.data()[(row, c)] - sum / count as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn label_rows_sum_to_two_minus_k_for_seven_classes() {
    let mut r = rng(4);
    let classes = ids("c", 7);
    let labels: Vec<String> = (0..100).map(|_| classes[r.random_range(0..7)].clone()).collect();
    let y = build_label_matrix(&labels, &classes).unwrap();
    for row in y.data().row_iter() {
        assert_eq!(row.sum(), -5.0);
    }
}

#[test]
fn ridge_map_matches_normal_equations() {
    let mut r = rng(5);
    let x = uniform(&mut r, 5, 12);
    let k = uniform(&mut r, 4, 3);
    let classes = ids("c", 3);
    let labels: Vec<String> = (0..12).map(|i| classes[i % 3].clone()).collect();
    let y = build_label_matrix(&labels, &classes).unwrap();
    let v = solve_ridge_map(&x, &k, &y, 0.1, 0.1).unwrap();
    let oracle = ridge_oracle(&x, &k, y.data(), 0.1, 0.1);
    assert!(rel_err(v.data(), &oracle) <= 1e-8);
}

#[test]
fn predict_matches_triple_loop() {
    let mut r = rng(6);
    let v = dmap_core::MapMatrix::new(uniform(&mut r, 7, 3), 1.0, 1.0).unwrap();
    let x = uniform(&mut r, 7, 9);
    let got = predict_semantic(&v, &x).unwrap();
    let want = matmul(&v.data().transpose(), &x);
    assert!((got - want).amax() <= 1e-12);
}

/// Random labelled problem: features, embeddings and ±1 targets.
fn problem(seed: u64, d: usize, n: usize, p: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let x = uniform(&mut r, d, n);
    let emb = uniform(&mut r, p, k);
    let classes = ids("c", k);
    let labels: Vec<String> = (0..n).map(|_| classes[r.random_range(0..k)].clone()).collect();
    (x, emb, build_label_matrix(&labels, &classes).unwrap().data().clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn label_matrix_rows_and_decoding(k in 1usize..9, raw in prop::collection::vec(0usize..100, 1..60)) {
        let classes = ids("c", k);
        let labels: Vec<String> = raw.iter().map(|i| classes[i % k].clone()).collect();
        let y = build_label_matrix(&labels, &classes).unwrap();
        for row in y.data().row_iter() {
            prop_assert_eq!(row.sum(), 2.0 - k as f64);
        }
        let decoded: Vec<String> = y.decode().into_iter().map(|i| classes[i].clone()).collect();
        prop_assert_eq!(decoded, labels);
    }

    #[test]
    fn class_means_are_permutation_equivariant(seed in any::<u64>(), n in 4usize..40) {
        let mut r = rng(seed);
        let x = uniform(&mut r, 5, n);
        let classes = ids("c", 3);
        let labels: Vec<String> = (0..n).map(|i| classes[i % 3].clone()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let xp = DMatrix::from_fn(5, n, |i, j| x[(i, order[j])]);
        let lp: Vec<String> = order.iter().map(|&j| labels[j].clone()).collect();
        let a = class_mean_prototypes(&FeatureMatrix::from_matrix(x).unwrap(), &labels, &classes).unwrap();
        let b = class_mean_prototypes(&FeatureMatrix::from_matrix(xp).unwrap(), &lp, &classes).unwrap();
        prop_assert!((a.data() - b.data()).amax() <= 1e-14);
    }

    #[test]
    fn ridge_solution_is_a_minimum(
        seed in any::<u64>(),
        d in 1usize..8, n in 1usize..20, p in 1usize..6, k in 1usize..5,
        gi in 0usize..3, ei in 0usize..3,
    ) {
        let regs = [1e-2, 1.0, 1e2];
        let (gamma, eta) = (regs[gi], regs[ei]);
        let (x, emb, y) = problem(seed, d, n, p, k);
        let v = solve_ridge_map_targets(&x, &emb, &y, gamma, eta).unwrap();
        let f0 = ridge_objective(v.data(), &x, &emb, &y, gamma, eta);
        let mut r = rng(seed ^ 0x9e37);
        for _ in 0..20 {
            let mut delta = uniform(&mut r, d, p);
            delta *= 1e-3 / delta.norm();
            let f1 = ridge_objective(&(v.data() + delta), &x, &emb, &y, gamma, eta);
            // at a minimum the change is second order and non-negative
            prop_assert!(f1 >= f0 - 1e-12 * f0.abs().max(1.0));
        }
        let grad = stationarity_residual(v.data(), &x, &emb, &y, gamma, eta);
        prop_assert!(grad.norm() <= 1e-6 * v.data().norm().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn more_regularisation_never_grows_the_map(
        seed in any::<u64>(), d in 1usize..8, n in 1usize..20, p in 1usize..6, k in 1usize..5,
        lo in -2.0f64..2.0, step in 0.0f64..2.0, other in -2.0f64..2.0,
    ) {
        let (x, emb, y) = problem(seed, d, n, p, k);
        let (r1, r2, fixed) = (10f64.powf(lo), 10f64.powf(lo + step), 10f64.powf(other));
        let norm = |g: f64, e: f64| solve_ridge_map_targets(&x, &emb, &y, g, e).unwrap().data().norm();
        prop_assert!(norm(r2, fixed) <= norm(r1, fixed) * (1.0 + 1e-12));
        prop_assert!(norm(fixed, r2) <= norm(fixed, r1) * (1.0 + 1e-12));
    }

    #[test]
    fn ridge_map_matches_oracle_on_random_shapes(
        seed in any::<u64>(), d in 1usize..10, n in 1usize..25, p in 1usize..8, k in 1usize..6,
    ) {
        let (x, emb, y) = problem(seed, d, n, p, k);
        let v = solve_ridge_map_targets(&x, &emb, &y, 0.5, 2.0).unwrap();
        prop_assert!(rel_err(v.data(), &ridge_oracle(&x, &emb, &y, 0.5, 2.0)) <= 1e-8);
    }
}
