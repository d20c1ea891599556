use dhpd_core::analysis::{
    check_gap_inequalities, log_log_slope, mixing_time_bound, random_point_in_ball,
    theorem_bound_shape, verify_checkpoints, verify_lemma1, verify_lemma2, verify_lemma3,
    verify_lemma6, GapOracle,
};
use dhpd_core::chain::random_ergodic_chain;
use dhpd_core::features::FeatureMap;
use dhpd_core::nalgebra::{DMatrix, DVector};
use dhpd_core::network::{laplacian_mixing, Graph, MixingMatrix};
use dhpd_core::objective::{population_model, RadiiPolicy, SaddleModel};
use dhpd_core::solver::{dhpd_run, DhpdConfig, RunOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(states: usize, agents: usize, seed: u64) -> (dhpd_core::chain::PolicyChain, FeatureMap, SaddleModel) {
    let c = random_ergodic_chain(states, agents, 3, 0.9, seed).unwrap();
    let f = FeatureMap::random(states, 4, seed + 1000).unwrap();
    let m = population_model(&c, &f, RadiiPolicy::Auto).unwrap();
    (c, f, m)
}

#[test]
fn gap_vanishes_at_solution_and_matches_definition() {
    for seed in 0..5 {
        let (_, _, m) = model(15, 4, seed);
        let o = GapOracle::new(&m).unwrap();
        assert!(o.gap(o.x_star()).abs() <= 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let x = random_point_in_ball(&mut rng, 4, m.radius_x());
            let (a, b) = (o.gap(&x), o.gap_by_definition(&x));
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
            let diff = o.x_star() - &x;
            assert!(a >= 0.5 * m.certified_modulus() * diff.norm_squared() * (1.0 - 1e-10));
        }
    }
}

#[test]
fn surrogate_dominates_gap_at_random_points() {
    let (_, _, m) = model(20, 5, 7);
    let o = GapOracle::new(&m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rho_cert = m.certified_modulus();
    let rho_y = m.lambda_min_c();
    for _ in 0..200 {
        let x = random_point_in_ball(&mut rng, 4, m.radius_x());
        let ys: Vec<DVector<f64>> = (0..5).map(|_| random_point_in_ball(&mut rng, 4, m.radius_y())).collect();
        let rows = check_gap_inequalities(&o, std::slice::from_ref(&x), &ys, rho_cert, rho_y, None);
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
        let rep = o.report(&x, &ys);
        assert!(rep.eps <= rep.eps_surrogate);
        let mean: f64 = rep.per_agent.iter().sum::<f64>() / 5.0;
        assert!((mean - rep.eps).abs() <= 1e-12 * (1.0 + rep.eps));
    }
}

#[test]
fn surrogate_with_exact_duals_at_solution_is_zero() {
    let (_, _, m) = model(12, 3, 4);
    let o = GapOracle::new(&m).unwrap();
    let ys: Vec<DVector<f64>> = o.y_star().to_vec();
    assert!(o.surrogate_gap(o.x_star(), &ys).abs() <= 1e-12);
}

#[test]
fn mixing_time_bound_examples() {
    // ln(4) / ln(2) = 2 exactly in theory; rounding must not push it to 3.
    assert_eq!(mixing_time_bound(1.0, 0.5, 0.25).unwrap(), 3);
    assert_eq!(mixing_time_bound(1.0, 0.5, 2.0).unwrap(), 1);
    assert_eq!(mixing_time_bound(2.0, 0.9, 1e-3).unwrap(), 74);
    assert!(mixing_time_bound(0.5, 0.5, 0.1).is_err());
    assert!(mixing_time_bound(1.0, 1.0, 0.1).is_err());
}

#[test]
fn bound_shape_decays_nearly_linearly() {
    let t1 = 512;
    let pts: Vec<(f64, f64)> = (7..=14)
        .map(|k| {
            let t = (1usize << k) * t1;
            let b = theorem_bound_shape(4.8, 1.7, 1.3, 0.87, t, t1, 10, 2.25, 0.884).unwrap();
            (t as f64, b.total())
        })
        .collect();
    let slope = log_log_slope(&pts);
    assert!((-1.0..=-0.8).contains(&slope), "slope {slope}");
}

#[test]
fn bound_shape_grows_with_sigma2() {
    let mut prev = 0.0;
    for s in [0.0, 0.3, 0.6, 0.9, 0.99] {
        let b = theorem_bound_shape(1.0, 1.0, 1.0, s, 1023 * 16, 16, 8, 1.5, 0.5).unwrap();
        assert!(b.term_network > prev);
        prev = b.term_network;
    }
    assert!(theorem_bound_shape(1.0, 1.0, 1.0, 1.0, 100, 10, 2, 1.5, 0.5).is_err());
}

#[test]
fn bound_shape_flags_schedule_mismatch() {
    let b = theorem_bound_shape(1.0, 1.0, 1.0, 0.5, 7 * 10, 10, 4, 1.5, 0.5).unwrap();
    assert!(b.warnings.is_empty(), "{:?}", b.warnings);
    let b = theorem_bound_shape(1.0, 1.0, 1.0, 0.5, 50, 10, 4, 1.5, 0.5).unwrap();
    assert_eq!(b.warnings.len(), 1);
    let b = theorem_bound_shape(1.0, 1.0, 1.0, 0.5, 7, 1, 4, 3.0, 0.9).unwrap();
    assert!(b.warnings.iter().any(|w| w.contains("tau")));
}

#[test]
fn consensus_bound_is_trivial_for_one_agent() {
    let (c, f, m) = model(10, 1, 2);
    let w = MixingMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
    let cfg = DhpdConfig {
        eta1: 0.3,
        t1: 32,
        rounds: 3,
        seed: 1,
    };
    let opts = RunOptions {
        log_iterates: true,
        ..Default::default()
    };
    let t = dhpd_run(&m, &c, &f, &w, &cfg, &opts).unwrap();
    let g = m.constants(&f.bounds(&c).unwrap()).g;
    let rows = verify_lemma1(&t, g, w.sigma2());
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.lhs == 0.0 && r.pass));
}

#[test]
fn consensus_bound_holds_on_ring() {
    let (c, f, m) = model(15, 10, 5);
    let w = laplacian_mixing(&Graph::ring(10).unwrap()).unwrap();
    let cfg = DhpdConfig {
        eta1: 0.2,
        t1: 64,
        rounds: 4,
        seed: 3,
    };
    let opts = RunOptions {
        log_iterates: true,
        ..Default::default()
    };
    let t = dhpd_run(&m, &c, &f, &w, &cfg, &opts).unwrap();
    assert_eq!(t.rounds.last().unwrap().horizon, 512);
    let g = m.constants(&f.bounds(&c).unwrap()).g;
    let rows = verify_lemma1(&t, g, w.sigma2());
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.pass), "{:?}", rows.iter().find(|r| !r.pass));
    for r in &t.rounds {
        let log = t.iterate_logs.iter().find(|l| l.round == r.round).unwrap();
        for j in 0..10 {
            let recomputed = dhpd_core::analysis::consensus_deviation_from_log(log, j);
            assert!((recomputed - r.consensus_deviation[j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn martingale_bound_holds() {
    for t in [10, 100, 1000] {
        let rep = verify_lemma3(0.7, t, 1000, t as u64).unwrap();
        assert!(rep.pass, "T = {t}: {rep:?}");
        assert!(rep.max_step_norm <= 0.7 * (1.0 + 1e-12));
        // The norm of the partial sum performs a reflected +-M walk, so the
        // exact second moment is M^2 / T.
        let exact = 0.49 / t as f64;
        assert!((rep.estimate / exact - 1.0).abs() <= 0.15, "T = {t}: {}", rep.estimate / exact);
    }
    assert!(verify_lemma3(1.0, 10, 10, 0).is_err());
}

#[test]
fn lazy_projection_regret_bound_holds() {
    let rows = verify_lemma2(100, 17);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.pass), "{:?}", rows.iter().find(|r| !r.pass));
}

#[test]
fn gap_inequalities_hold_along_a_run() {
    let (c, f, m) = model(12, 6, 9);
    let w = laplacian_mixing(&Graph::erdos_renyi(6, 0.5, 2).unwrap()).unwrap();
    let cfg = DhpdConfig {
        eta1: 0.3,
        t1: 64,
        rounds: 4,
        seed: 8,
    };
    let t = dhpd_run(&m, &c, &f, &w, &cfg, &RunOptions::default()).unwrap();
    let o = GapOracle::new(&m).unwrap();
    let rows = verify_checkpoints(&o, &t, m.certified_modulus(), m.lambda_min_c());
    assert_eq!(rows.len(), t.checkpoints.len() * 6 * 5);
    assert!(rows.iter().all(|r| r.pass), "{:?}", rows.iter().find(|r| !r.pass));
}

#[test]
fn surrogate_decomposition_holds_on_small_runs() {
    for seed in 0..3 {
        let (c, f, m) = model(20, 5, 30 + seed);
        let w = laplacian_mixing(&Graph::ring(5).unwrap()).unwrap();
        let cfg = DhpdConfig {
            eta1: 0.3,
            t1: 50,
            rounds: 3,
            seed,
        };
        let t = dhpd_run(&m, &c, &f, &w, &cfg, &RunOptions::default()).unwrap();
        let o = GapOracle::new(&m).unwrap();
        let g = m.constants(&f.bounds(&c).unwrap()).g;
        let rows = verify_lemma6(&o, &t, g);
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|r| r.pass), "{:?}", rows.iter().find(|r| !r.pass));
    }
}
