use dhpd_core::analysis::verify_schedule;
use dhpd_core::chain::{random_ergodic_chain, PolicyChain};
use dhpd_core::features::FeatureMap;
use dhpd_core::linalg::norm;
use dhpd_core::nalgebra::{DMatrix, DVector};
use dhpd_core::network::{laplacian_mixing, Graph, MixingMatrix};
use dhpd_core::objective::{population_model, RadiiPolicy, SaddleModel};
use dhpd_core::solver::{
    dhpd_run, lazy_projection_path, run_schedule, running_average, spd_run_centralized,
    spd_run_distributed, DhpdConfig, PrimalCoupling, RunOptions, RunTrace,
};

struct Setup {
    chain: PolicyChain,
    features: FeatureMap,
    model: SaddleModel,
}

fn setup(states: usize, agents: usize, seed: u64) -> Setup {
    let chain = random_ergodic_chain(states, agents, 3, 0.9, seed).unwrap();
    let features = FeatureMap::random(states, 4, seed + 1000).unwrap();
    let model = population_model(&chain, &features, RadiiPolicy::Auto).unwrap();
    Setup {
        chain,
        features,
        model,
    }
}

fn cfg(eta1: f64, t1: usize, rounds: usize, seed: u64) -> DhpdConfig {
    DhpdConfig {
        eta1,
        t1,
        rounds,
        seed,
    }
}

fn identity_mixing() -> MixingMatrix {
    MixingMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap()
}

fn same_outputs(a: &RunTrace, b: &RunTrace) {
    assert_eq!(a.rounds.len(), b.rounds.len());
    for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(ra.x_hat, rb.x_hat);
        assert_eq!(ra.y_hat, rb.y_hat);
    }
    assert_eq!(a.checkpoints.len(), b.checkpoints.len());
    for (ca, cb) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(ca.samples, cb.samples);
        assert_eq!(ca.gaps, cb.gaps);
    }
}

#[test]
fn single_round_dhpd_is_distributed_spd() {
    let s = setup(10, 4, 1);
    let w = laplacian_mixing(&Graph::ring(4).unwrap()).unwrap();
    let opts = RunOptions::default();
    let a = dhpd_run(&s.model, &s.chain, &s.features, &w, &cfg(0.05, 300, 1, 9), &opts).unwrap();
    let b = spd_run_distributed(&s.model, &s.chain, &s.features, &w, 0.05, 300, 9, &opts).unwrap();
    same_outputs(&a, &b);
}

#[test]
fn single_agent_mixing_equals_centralized_with_restarts() {
    let s = setup(10, 1, 2);
    let c = cfg(0.1, 64, 4, 3);
    let opts = RunOptions::default();
    let a = dhpd_run(&s.model, &s.chain, &s.features, &identity_mixing(), &c, &opts).unwrap();
    let b = run_schedule(
        &s.model,
        &s.chain,
        &s.features,
        PrimalCoupling::Centralized,
        &c.schedule(),
        c.seed,
        &opts,
    )
    .unwrap();
    same_outputs(&a, &b);
}

#[test]
fn centralized_spd_with_one_agent_is_one_round_dhpd() {
    let s = setup(8, 1, 3);
    let opts = RunOptions::default();
    let a = spd_run_centralized(&s.model, &s.chain, &s.features, 0.07, 200, 5, &opts).unwrap();
    let b = dhpd_run(&s.model, &s.chain, &s.features, &identity_mixing(), &cfg(0.07, 200, 1, 5), &opts)
        .unwrap();
    same_outputs(&a, &b);
}

#[test]
fn first_round_matches_fixed_step_run() {
    let s = setup(12, 5, 4);
    let w = laplacian_mixing(&Graph::erdos_renyi(5, 0.5, 1).unwrap()).unwrap();
    let opts = RunOptions::default();
    let d = dhpd_run(&s.model, &s.chain, &s.features, &w, &cfg(0.1, 50, 6, 2), &opts).unwrap();
    let f = spd_run_distributed(&s.model, &s.chain, &s.features, &w, 0.1, 50, 2, &opts).unwrap();
    assert_eq!(d.rounds[0].x_hat, f.rounds[0].x_hat);
    assert_eq!(d.rounds[0].y_hat, f.rounds[0].y_hat);
    for (cd, cf) in d.checkpoints.iter().zip(&f.checkpoints) {
        assert_eq!(cd.samples, cf.samples);
        assert_eq!(cd.x_hat, cf.x_hat);
    }
}

#[test]
fn zero_rewards_from_origin_stay_at_origin() {
    let c = random_ergodic_chain(9, 3, 3, 0.9, 5).unwrap();
    let chain = PolicyChain::new(c.transition().clone(), DMatrix::zeros(3, 9), 0.9).unwrap();
    let features = FeatureMap::random(9, 4, 1).unwrap();
    let model = population_model(&chain, &features, RadiiPolicy::Auto).unwrap();
    let w = laplacian_mixing(&Graph::complete(3).unwrap()).unwrap();
    let t = dhpd_run(&model, &chain, &features, &w, &cfg(0.5, 40, 3, 1), &RunOptions::default()).unwrap();
    for st in &t.final_states {
        assert!(st.x.iter().chain(st.y.iter()).all(|v| *v == 0.0));
    }
    assert!(t.checkpoints.iter().all(|c| c.gaps.iter().all(|g| *g == 0.0)));
}

#[test]
fn vanishing_step_barely_moves() {
    let s = setup(10, 3, 6);
    let w = laplacian_mixing(&Graph::ring(3).unwrap()).unwrap();
    let eta = 1e-12;
    let t = spd_run_distributed(&s.model, &s.chain, &s.features, &w, eta, 500, 1, &RunOptions::default())
        .unwrap();
    let g = s.model.constants(&s.features.bounds(&s.chain).unwrap()).g;
    for st in &t.final_states {
        assert!(st.x.norm() <= eta * g * 500.0);
        assert!(st.y.norm() <= eta * g * 500.0);
    }
}

#[test]
fn identical_agents_share_iterates() {
    let base = random_ergodic_chain(10, 1, 3, 0.9, 7).unwrap();
    let rewards = DMatrix::from_fn(6, 10, |_, s| base.reward(0, s) / 6.0);
    let chain = PolicyChain::new(base.transition().clone(), rewards, 0.9).unwrap();
    let features = FeatureMap::random(10, 4, 3).unwrap();
    let model = population_model(&chain, &features, RadiiPolicy::Auto).unwrap();
    let opts = RunOptions::default();

    for g in [Graph::complete(6).unwrap(), Graph::ring(6).unwrap()] {
        let w = laplacian_mixing(&g).unwrap();
        let t = dhpd_run(&model, &chain, &features, &w, &cfg(0.2, 32, 3, 4), &opts).unwrap();
        for st in &t.final_states[1..] {
            assert!((&st.x - &t.final_states[0].x).amax() <= 1e-12);
            assert!((&st.y - &t.final_states[0].y).amax() <= 1e-12);
        }
    }
}

#[test]
fn denser_network_keeps_agents_closer() {
    let s = setup(12, 16, 8);
    let opts = RunOptions::default();
    let c = cfg(0.2, 100, 3, 2);
    let mean_dev = |w: &MixingMatrix| {
        let t = dhpd_run(&s.model, &s.chain, &s.features, w, &c, &opts).unwrap();
        t.rounds
            .iter()
            .flat_map(|r| r.consensus_deviation.iter().copied())
            .sum::<f64>()
    };
    let ring = mean_dev(&laplacian_mixing(&Graph::ring(16).unwrap()).unwrap());
    let complete = mean_dev(&laplacian_mixing(&Graph::complete(16).unwrap()).unwrap());
    assert!(complete < ring, "complete {complete}, ring {ring}");
}

#[test]
fn logged_iterates_reproduce_averages_and_stay_feasible() {
    let s = setup(10, 4, 9);
    let w = laplacian_mixing(&Graph::ring(4).unwrap()).unwrap();
    let opts = RunOptions {
        log_iterates: true,
        ..Default::default()
    };
    let t = dhpd_run(&s.model, &s.chain, &s.features, &w, &cfg(0.3, 40, 3, 1), &opts).unwrap();
    assert_eq!(t.iterate_logs.len(), 3);
    for (log, r) in t.iterate_logs.iter().zip(&t.rounds) {
        assert_eq!(log.len(), r.horizon);
        for j in 0..4 {
            let mut xs = DVector::zeros(4);
            let mut ys = DVector::zeros(4);
            for step in 0..log.len() {
                let x = log.x_at(step, j);
                let y = log.y_at(step, j);
                assert!(norm(x) <= s.model.radius_x() * (1.0 + 1e-12));
                assert!(norm(y) <= s.model.radius_y() * (1.0 + 1e-12));
                xs += DVector::from_column_slice(x);
                ys += DVector::from_column_slice(y);
            }
            let xa = running_average(&xs, log.len()).unwrap();
            let ya = running_average(&ys, log.len()).unwrap();
            assert!((xa - &r.x_hat[j]).amax() <= 1e-12);
            assert!((ya - &r.y_hat[j]).amax() <= 1e-12);
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let s = setup(15, 8, 10);
    let w = laplacian_mixing(&Graph::erdos_renyi(8, 0.4, 3).unwrap()).unwrap();
    let c = cfg(0.2, 64, 4, 11);
    let one = dhpd_run(&s.model, &s.chain, &s.features, &w, &c, &RunOptions::default()).unwrap();
    let four = dhpd_run(
        &s.model,
        &s.chain,
        &s.features,
        &w,
        &c,
        &RunOptions {
            threads: 4,
            ..Default::default()
        },
    )
    .unwrap();
    same_outputs(&one, &four);
    assert_eq!(one.final_states, four.final_states);
}

#[test]
fn equal_sample_budgets() {
    let s = setup(10, 4, 12);
    let w = laplacian_mixing(&Graph::ring(4).unwrap()).unwrap();
    let c = cfg(0.2, 32, 6, 3);
    let opts = RunOptions::default();
    let d = dhpd_run(&s.model, &s.chain, &s.features, &w, &c, &opts).unwrap();
    let horizon = c.total_samples() + 1;
    let f = spd_run_distributed(&s.model, &s.chain, &s.features, &w, c.eta1, horizon, 3, &opts).unwrap();
    assert_eq!(d.samples, c.total_samples());
    assert_eq!(f.samples, d.samples);
    assert_eq!(d.checkpoints.last().unwrap().samples, f.checkpoints.last().unwrap().samples);
}

#[test]
fn schedule_invariants_hold() {
    let s = setup(10, 3, 13);
    let w = laplacian_mixing(&Graph::complete(3).unwrap()).unwrap();
    let c = cfg(0.4, 16, 5, 1);
    assert_eq!(c.total_iterations(), 31 * 16);
    let t = dhpd_run(&s.model, &s.chain, &s.features, &w, &c, &RunOptions::default()).unwrap();
    let rows = verify_schedule(&t);
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    for (k, r) in t.rounds.iter().enumerate() {
        assert_eq!(r.horizon, 16 << k);
        assert_eq!(r.eta, 0.4 / (1 << k) as f64);
    }
    assert!(t.checkpoints.windows(2).all(|w| w[0].samples < w[1].samples));
    for r in &t.rounds {
        assert!(t.checkpoints.iter().any(|c| c.samples == r.samples && c.round == r.round));
    }
    assert_eq!(t.samples, c.total_samples());
}

#[test]
fn hypothesis_warnings_are_reported() {
    let s = setup(10, 2, 14);
    let w = laplacian_mixing(&Graph::complete(2).unwrap()).unwrap();
    let opts = RunOptions {
        tau: Some(100),
        ..Default::default()
    };
    let t = dhpd_run(&s.model, &s.chain, &s.features, &w, &cfg(1e-9, 8, 2, 1), &opts).unwrap();
    assert_eq!(t.warnings.len(), 2);
    assert!(t.warnings[0].contains("eta1"));
    assert!(t.warnings[1].contains("tau = 100"));
    let t = dhpd_run(&s.model, &s.chain, &s.features, &w, &cfg(1e3, 128, 1, 1), &opts).unwrap();
    assert!(t.warnings.is_empty());
}

#[test]
fn invalid_configurations_are_rejected() {
    let s = setup(6, 2, 15);
    let w = laplacian_mixing(&Graph::complete(2).unwrap()).unwrap();
    let opts = RunOptions::default();
    for c in [cfg(0.0, 10, 1, 0), cfg(0.1, 0, 1, 0), cfg(0.1, 10, 0, 0), cfg(f64::NAN, 10, 1, 0)] {
        assert!(dhpd_run(&s.model, &s.chain, &s.features, &w, &c, &opts).is_err());
    }
    let w3 = laplacian_mixing(&Graph::complete(3).unwrap()).unwrap();
    assert!(dhpd_run(&s.model, &s.chain, &s.features, &w3, &cfg(0.1, 10, 1, 0), &opts).is_err());
}

#[test]
fn lazy_projection_follows_accumulated_gradients() {
    let grads = vec![vec![-1.0, 0.0], vec![-1.0, 0.0], vec![0.0, -3.0]];
    let path = lazy_projection_path(&[0.0, 0.0], &grads, 0.5, 1.0);
    assert_eq!(path.len(), 3);
    assert_eq!(path[0], vec![0.0, 0.0]);
    assert_eq!(path[1], vec![0.5, 0.0]);
    assert_eq!(path[2], vec![1.0, 0.0]);
    // A long push outside and back returns only once the accumulator does.
    let grads = vec![vec![-4.0], vec![2.0], vec![2.0], vec![0.0]];
    let path = lazy_projection_path(&[0.0], &grads, 1.0, 1.0);
    assert_eq!(path, vec![vec![0.0], vec![1.0], vec![1.0], vec![0.0]]);
}

#[test]
fn six_rounds_beat_one_round_at_equal_samples() {
    let chain = random_ergodic_chain(50, 10, 3, 0.95, 1).unwrap();
    let features = FeatureMap::random(50, 8, 1001).unwrap();
    let model = population_model(&chain, &features, RadiiPolicy::Auto).unwrap();
    let w = laplacian_mixing(&Graph::erdos_renyi(10, 0.3, 2001).unwrap()).unwrap();
    let opts = RunOptions::default();
    let six = cfg(0.1, 512, 6, 0);
    let one = cfg(0.1, six.total_samples() + 1, 1, 0);
    assert_eq!(one.total_samples(), six.total_samples());
    let a = dhpd_run(&model, &chain, &features, &w, &six, &opts).unwrap();
    let b = dhpd_run(&model, &chain, &features, &w, &one, &opts).unwrap();
    let (ga, gb) = (
        a.checkpoints.last().unwrap().mean_gap(),
        b.checkpoints.last().unwrap().mean_gap(),
    );
    assert!(ga < gb, "six rounds {ga}, one round {gb}");
}
