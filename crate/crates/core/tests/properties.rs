//! Property tests for the structural invariants.

use proptest::prelude::*;

use levattn::distributed::{distributed_universal_set, split_rows, ProtocolTranscript};
use levattn::linalg::{
    dot, khatri_rao_row_power, norm_sq, DenseMatrix, Factorization, GramState, DEFAULT_LIFT_CAP,
};
use levattn::oracle::{dense_attention, top_k_mass, AttentionFn};
use levattn::seed::rng_from;
use levattn::sensitivity::{
    leverage_scores, lewis_residual, lewis_weights, online_leverage_scores, sensitivity_oracle,
    sensitivity_upper_bounds,
};
use levattn::streaming::{one_pass_universal_set, two_pass_universal_set, MatrixRows};
use levattn::universal::{
    build_universal_set, coverage_check, BuildOptions, FeatureMap, PowerRoute,
};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// A seeded Gaussian matrix, optionally with a repeated column to drop the rank.
fn matrix(seed: u64, n: usize, d: usize, deficient: bool) -> DenseMatrix {
    let k = DenseMatrix::gaussian(n, d, 1.0, &mut rng_from(seed));
    if !deficient || d < 2 {
        return k;
    }
    let rows: Vec<Vec<f64>> = k
        .iter_rows()
        .map(|r| {
            let mut r = r.to_vec();
            r[d - 1] = 2.0 * r[0];
            r
        })
        .collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

fn permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_from(seed));
    p
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn gram_is_order_independent(seed in any::<u64>(), n in 1usize..80, d in 1usize..7) {
        let k = matrix(seed, n, d, false);
        let a = GramState::from_matrix(&k);
        let b = GramState::from_matrix(&k.select_rows(&permutation(seed ^ 1, n)));
        let scale = a.entries().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.entries().iter().zip(b.entries()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn leverage_in_unit_interval(seed in any::<u64>(), n in 1usize..60, d in 1usize..7, deficient: bool) {
        let k = matrix(seed, n, d, deficient);
        let fact = Factorization::from_gram(&GramState::from_matrix(&k));
        for row in k.iter_rows() {
            let s = fact.pinv_quadratic_form(row).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-9).contains(&s), "{s}");
        }
    }

    #[test]
    fn khatri_rao_inner_products(seed in any::<u64>(), d in 1usize..6, h in 1usize..4) {
        let m = DenseMatrix::gaussian(2, d, 1.0, &mut rng_from(seed));
        let (a, b) = (m.row(0), m.row(1));
        let la = khatri_rao_row_power(a, h, DEFAULT_LIFT_CAP).unwrap();
        let lb = khatri_rao_row_power(b, h, DEFAULT_LIFT_CAP).unwrap();
        let want = dot(a, b).powi(h as i32);
        let scale = (norm_sq(a) * norm_sq(b)).sqrt().powi(h as i32);
        prop_assert!((dot(&la, &lb) - want).abs() <= 1e-10 * want.abs().max(scale));
    }

    #[test]
    fn leverage_sums_to_rank(seed in any::<u64>(), n in 1usize..200, d in 1usize..17, deficient: bool) {
        let k = matrix(seed, n, d, deficient);
        let rank = Factorization::svd(&k, false).rank() as f64;
        prop_assert!((leverage_scores(&k).sum() - rank).abs() <= 1e-8);
    }

    #[test]
    fn online_dominates_offline(seed in any::<u64>(), n in 1usize..120, d in 1usize..7, deficient: bool) {
        let k = matrix(seed, n, d, deficient).select_rows(&permutation(seed, n));
        let on = online_leverage_scores(d, k.iter_rows(), 0.0).unwrap();
        let off = leverage_scores(&k);
        for (a, b) in on.scores.iter().zip(&off.scores) {
            prop_assert!(*a >= b - 1e-10);
        }
    }

    #[test]
    fn leverage_scale_invariant(seed in any::<u64>(), c in prop_oneof![-1e3..-1e-3f64, 1e-3..1e3f64]) {
        let k = matrix(seed, 40, 4, false);
        let a = leverage_scores(&k).scores;
        let b = leverage_scores(&k.scaled(c)).scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn lewis_fixed_point(seed in any::<u64>(), p in prop_oneof![Just(1.0), Just(1.5), Just(3.0), Just(4.0)]) {
        let k = matrix(seed, 50, 3, false);
        let tol = 1e-10;
        let w = lewis_weights(&k, p, tol, 5000).unwrap();
        // re-evaluating the fixed-point map moves no weight by more than tol
        prop_assert!(lewis_residual(&k, &w.scores, p) <= tol);
        prop_assert!(w.sum() <= 3.0 + 1e-6);
    }

    #[test]
    fn upper_bound_property(seed in any::<u64>(), p in prop_oneof![Just(1.0), Just(2.0), Just(3.0), Just(4.0)]) {
        let k = matrix(seed, 30, 3, false);
        let ub = sensitivity_upper_bounds(&k, p, 1e-12, 5000).unwrap();
        let ys = DenseMatrix::gaussian(200, 3, 1.0, &mut rng_from(seed ^ 7));
        for y in ys.iter_rows() {
            let vals: Vec<f64> = k.iter_rows().map(|r| dot(r, y).abs().powf(p)).collect();
            let total: f64 = vals.iter().sum();
            for (v, u) in vals.iter().zip(&ub.scores) {
                prop_assert!(v / total <= u + 1e-9);
            }
        }
    }

    #[test]
    fn universality(seed in any::<u64>(), p in prop_oneof![Just(1.0), Just(2.0), Just(4.0)], eps in prop_oneof![Just(0.05), Just(0.1), Just(0.3)]) {
        let k = matrix(seed, 120, 4, false);
        let q = DenseMatrix::gaussian(100, 4, 1.0, &mut rng_from(seed ^ 3));
        let f = AttentionFn::Power(p);
        let u = build_universal_set(&k, eps, &f, &BuildOptions::default()).unwrap();
        let r = coverage_check(&k, &q, eps, &f, &u, 1e-9).unwrap();
        prop_assert!(r.passed(), "{:?}", r.violations.first());
        let d = 4.0f64;
        let bound = if p == 2.0 { d / eps } else { 2.0 * d.powf((p / 2.0).max(1.0)) / eps };
        prop_assert!(u.len() as f64 <= bound);
    }

    #[test]
    fn feature_map_route_matches_lift(seed in any::<u64>(), eps in prop_oneof![Just(0.05), Just(0.2)]) {
        let k = matrix(seed, 60, 3, false);
        let gap = AttentionFn::symmetric(FeatureMap::Polynomial(2));
        let mapped = build_universal_set(&k, eps, &gap, &BuildOptions::default()).unwrap();
        let lift = BuildOptions { route: PowerRoute::Lift, ..BuildOptions::default() };
        let lifted = build_universal_set(&k, eps, &AttentionFn::Power(4.0), &lift).unwrap();
        prop_assert_eq!(&mapped.indices, &lifted.indices);
        let lewis = build_universal_set(&k, eps, &AttentionFn::Power(4.0), &BuildOptions::default()).unwrap();
        // rows whose certified sensitivity reaches epsilon must be in both sets
        for i in (0..60).step_by(7) {
            if sensitivity_oracle(&k, i, 4.0, 30, seed).unwrap() >= eps {
                prop_assert!(mapped.contains(i) && lewis.contains(i), "row {}", i);
            }
        }
    }

    #[test]
    fn streaming_matches_batch(seed in any::<u64>(), n in 0usize..150, d in 1usize..6, eps in prop_oneof![Just(0.02), Just(0.1), Just(0.5)]) {
        let k = matrix(seed, n, d, seed % 3 == 0);
        let batch = build_universal_set(&k, eps, &AttentionFn::Power(2.0), &BuildOptions::default()).unwrap();
        let one = one_pass_universal_set(&mut MatrixRows::new(&k), eps).unwrap();
        let two = two_pass_universal_set(&mut MatrixRows::new(&k), eps).unwrap();
        prop_assert_eq!(&one.set.indices, &batch.indices);
        prop_assert_eq!(&two.set.indices, &batch.indices);
        prop_assert!(one.set.indices.iter().all(|j| one.candidates.contains(j)));
        prop_assert!(one.memory.peak_words <= one.memory.bound(64));
        prop_assert!(two.memory.peak_words <= two.memory.bound(64));
    }

    #[test]
    fn shard_count_invariance(seed in any::<u64>(), cuts in prop::collection::vec(0usize..=200, 0..10)) {
        let k = matrix(seed, 200, 5, false);
        let mut cuts = cuts;
        cuts.sort_unstable();
        let mut sizes = Vec::new();
        let mut prev = 0;
        for c in cuts.into_iter().chain([200]) {
            sizes.push(c - prev);
            prev = c;
        }
        let out = distributed_universal_set(&split_rows(&k, &sizes).unwrap(), 0.02).unwrap();
        let batch = build_universal_set(&k, 0.02, &AttentionFn::Power(2.0), &BuildOptions::default()).unwrap();
        prop_assert_eq!(&out.set.indices, &batch.indices);
        prop_assert_eq!(out.transcript.total_words(), ProtocolTranscript::closed_form(sizes.len(), 5, &out.local_set_sizes));
    }

    #[test]
    fn attention_rows_stochastic(seed in any::<u64>(), p in prop_oneof![Just(1.0), Just(2.0), Just(3.0), Just(4.0)]) {
        let mut rng = rng_from(seed);
        let q = DenseMatrix::gaussian(10, 4, 1.0, &mut rng);
        let k = DenseMatrix::gaussian(30, 4, 1.0, &mut rng);
        let a = dense_attention(&q, &k, &AttentionFn::Power(p)).unwrap();
        prop_assert!(a.stochasticity_error() <= 1e-12);
        if p == 2.0 {
            // squared inner products, normalized
            for i in 0..10 {
                let raw: Vec<f64> = k.iter_rows().map(|r| dot(q.row(i), r).powi(2)).collect();
                let s: f64 = raw.iter().sum();
                for (j, x) in raw.iter().enumerate() {
                    prop_assert!((a.get(i, j) - x / s).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn top_k_mass_monotone(seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let a = dense_attention(
            &DenseMatrix::gaussian(5, 3, 1.0, &mut rng),
            &DenseMatrix::gaussian(20, 3, 1.0, &mut rng),
            &AttentionFn::Power(2.0),
        )
        .unwrap();
        let mut prev = vec![0.0; 5];
        for k in 1..=20 {
            let m = top_k_mass(&a, k).unwrap();
            for (x, y) in m.iter().zip(&prev) {
                prop_assert!(x >= y);
            }
            prev = m;
        }
    }
}
