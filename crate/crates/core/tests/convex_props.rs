mod common;

use common::{lp_by_vertices, qp_by_active_sets, random_program, random_program_with, tight};
use intersect_core::convex::{solve, ConvexProgram, SolveStatus};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Primal objective minus the Wolfe dual at the returned primal-dual pair.
fn duality_gap(p: &ConvexProgram, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let primal = p.objective(x);
    let dual = primal + y.dot(&(&p.a_eq * x - &p.b_eq)) + z.dot(&(&p.a_in * x - &p.b_in));
    (primal - dual).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_solves_close_the_gap(seed in any::<u64>(), lp in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_program(&mut rng, lp);
        let r = solve(&p, &tight());
        prop_assert_eq!(r.status, SolveStatus::Optimal);
        prop_assert!(duality_gap(&p, &r.x, &r.lambda_eq, &r.lambda_in) <= 1e-6);
        prop_assert!(r.lambda_in.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn scaling_the_objective_scales_multipliers(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_program_with(&mut rng, false, false);
        let mut scaled = p.clone();
        scaled.hessian *= c;
        scaled.linear *= c;
        let a = solve(&p, &tight());
        let b = solve(&scaled, &tight());
        prop_assert!(a.is_optimal() && b.is_optimal());
        prop_assert!((&a.x - &b.x).amax() <= 1e-8, "x differs by {}", (&a.x - &b.x).amax());
        let lam = |r: &intersect_core::convex::SolveResult| {
            r.lambda_eq.iter().chain(r.lambda_in.iter()).cloned().collect::<Vec<f64>>()
        };
        for (la, lb) in lam(&a).iter().zip(lam(&b)) {
            prop_assert!((la * c - lb).abs() <= 1e-6 * (1.0 + lb.abs()), "{} * {} vs {}", la, c, lb);
        }
    }

    #[test]
    fn two_variable_lps_hit_the_best_vertex(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = loop {
            let p = random_program(&mut rng, true);
            if p.num_vars() == 2 {
                break p;
            }
        };
        let r = solve(&p, &tight());
        let best = lp_by_vertices(&p).unwrap();
        prop_assert!((r.objective - best).abs() <= 1e-8, "ipm {} vertices {}", r.objective, best);
    }
}

#[test]
fn random_programs_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let lp = case % 4 == 0;
        let p = random_program(&mut rng, lp);
        let oracle = if lp { lp_by_vertices(&p) } else { qp_by_active_sets(&p) }.unwrap();
        let r = solve(&p, &tight());
        assert!(r.is_optimal(), "case {case}: {:?}", r.status);
        worst = worst.max((r.objective - oracle).abs());
    }
    assert!(worst <= 1e-6, "worst objective error {worst:e}");
}
