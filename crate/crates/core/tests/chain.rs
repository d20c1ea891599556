use dhpd_core::analysis::{mixing_time_bound, verify_mixing_time};
use dhpd_core::chain::{
    random_ergodic_chain, tv_distance, InitialState, PolicyChain, TrajectoryOptions,
};
use dhpd_core::nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn two_state() -> PolicyChain {
    PolicyChain::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]),
        0.9,
    )
    .unwrap()
}

fn visit_frequencies(chain: &PolicyChain, len: usize, seed: u64) -> Vec<f64> {
    let mut counts = vec![0.0; chain.n_states()];
    for x in chain.sampler(seed, TrajectoryOptions::default()).unwrap().take(len) {
        counts[x.s] += 1.0;
    }
    counts.iter().map(|c| c / len as f64).collect()
}

/// `Pi` from the null space of `(P^T - I)` computed by SVD, independent of
/// both power iteration and the LU solve.
fn null_space_stationary(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let m = p.transpose() - DMatrix::identity(n, n);
    let svd = m.svd(true, true);
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v = svd.v_t.unwrap().row(k).transpose();
    &v / v.sum()
}

#[test]
fn stationary_matches_null_space_oracle() {
    for seed in 0..10 {
        let c = random_ergodic_chain(30, 2, 4, 0.9, seed).unwrap();
        let pi = c.stationary_distribution().unwrap();
        let oracle = null_space_stationary(c.transition());
        assert!((&pi - &oracle).amax() < 1e-10);
        let residual = (c.transition().tr_mul(&pi) - &pi).abs().sum();
        assert!(residual <= 1e-10);
        assert!(pi.iter().all(|v| *v > 0.0));
        assert!((pi.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn two_state_frequencies_track_stationary() {
    let f = visit_frequencies(&two_state(), 100_000, 3);
    assert!((f[0] - 2.0 / 3.0).abs() < 0.01, "{f:?}");
    assert!((f[1] - 1.0 / 3.0).abs() < 0.01, "{f:?}");
}

#[test]
fn long_trajectory_frequencies_within_tolerance() {
    let c = random_ergodic_chain(50, 3, 3, 0.95, 11).unwrap();
    let pi = c.stationary_distribution().unwrap();
    let f = visit_frequencies(&c, 1_000_000, 5);
    let dev = f.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev <= 5e-3, "max deviation {dev}");
}

#[test]
fn same_seed_same_trajectory() {
    let c = random_ergodic_chain(20, 4, 3, 0.9, 2).unwrap();
    let opts = TrajectoryOptions {
        initial: InitialState::Stationary,
        ..Default::default()
    };
    let a = c.sample_trajectory(500, 17, opts).unwrap();
    let b = c.sample_trajectory(500, 17, opts).unwrap();
    assert_eq!(a, b);
    let other = c.sample_trajectory(500, 18, opts).unwrap();
    assert_ne!(a, other);
}

#[test]
fn trajectory_rewards_are_local_expectations() {
    let c = two_state();
    for x in c.sample_trajectory(200, 1, TrajectoryOptions::default()).unwrap() {
        assert_eq!(x.local_rewards.len(), 2);
        for j in 0..2 {
            assert_eq!(x.local_rewards[j], c.reward(j, x.s));
        }
        assert!(c.transition()[(x.s, x.s_next)] > 0.0);
    }
    assert_eq!(c.global_reward(0), 0.75);
}

#[test]
fn total_variation_is_nonincreasing_and_enveloped() {
    for seed in 0..5 {
        let c = random_ergodic_chain(25, 1, 3, 0.9, seed).unwrap();
        let m = c.estimate_mixing().unwrap();
        assert!(m.gamma >= 1.0 && m.rho > 0.0 && m.rho < 1.0);
        for w in m.curve.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15);
        }
        for (i, d) in m.curve.iter().enumerate() {
            assert!(*d <= m.envelope(i + 1), "t = {}", i + 1);
        }
    }
}

#[test]
fn fitted_mixing_time_is_conservative() {
    for seed in 0..10 {
        let c = random_ergodic_chain(20, 1, 2, 0.9, 100 + seed).unwrap();
        let m = c.estimate_mixing().unwrap();
        for t in [1e3, 1e4] {
            assert_eq!(m.mixing_time(1.0 / t).unwrap(), mixing_time_bound(m.gamma, m.rho, 1.0 / t).unwrap());
            let row = verify_mixing_time(&c, &m, 1.0 / t).unwrap();
            assert!(row.pass, "seed {seed}, T = {t}: {row:?}");
        }
    }
}

#[test]
fn one_step_chain_has_unit_mixing_time() {
    let c = PolicyChain::new(DMatrix::from_element(3, 3, 1.0 / 3.0), DMatrix::zeros(1, 3), 0.9)
        .unwrap();
    let m = c.estimate_mixing().unwrap();
    assert!(m.one_step);
    assert_eq!(mixing_time_bound(m.gamma, m.rho, 1e-3).unwrap(), 2);
    assert_eq!(m.mixing_time(1e-3).unwrap(), 1);
    assert_eq!(m.mixing_time(1e-9).unwrap(), 1);
    assert!(c.worst_case_tv(1).unwrap() < 1e-15);
}

#[test]
fn tv_is_symmetric() {
    let p = [0.2, 0.3, 0.5];
    let q = [0.6, 0.1, 0.3];
    assert_eq!(tv_distance(&p, &q).unwrap(), tv_distance(&q, &p).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generated_chains_are_ergodic(
        n in 1usize..30,
        agents in 1usize..6,
        branch_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let branching = 1 + ((n - 1) as f64 * branch_frac) as usize;
        let c = random_ergodic_chain(n, agents, branching, 0.9, seed).unwrap();
        prop_assert!(c.is_ergodic());
        for i in 0..n {
            prop_assert!((c.transition().row(i).sum() - 1.0).abs() <= 1e-12);
            let support = (0..n).filter(|&k| c.transition()[(i, k)] > 0.0).count();
            prop_assert!(support >= branching.min(n) && support <= branching + 1);
        }
        let pi = c.stationary_distribution().unwrap();
        prop_assert!(pi.iter().all(|v| *v > 0.0));
        prop_assert!((c.transition().tr_mul(&pi) - &pi).abs().sum() <= 1e-10);
        for s in 0..n {
            let total: f64 = (0..agents).map(|j| c.reward(j, s)).sum();
            prop_assert!((0..agents).all(|j| c.reward(j, s) >= 0.0));
            prop_assert!((0.0..1.0).contains(&total));
        }
    }

    #[test]
    fn tv_zero_only_on_equal(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a), norm(&b));
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        let d = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        if p != q { prop_assert!(d > 0.0); }
    }
}
