//! The fixed-policy multi-agent MDP, reduced to a Markov chain `P` over
//! states with one expected-reward vector per agent.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::io::{fmt_real, parse_real};
use crate::{Error, Result};

/// Row sums of a transition matrix must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Self-loop mass mixed into every generated row, which makes generated
/// chains aperiodic by construction.
pub const SELF_LOOP_MASS: f64 = 0.05;

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 1_000_000;
const DIRECT_SOLVE_MAX_STATES: usize = 500;
const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;

/// Longest horizon used when tracing `d_tv(e_s P^t, Pi)`.
const MIXING_MAX_STEPS: usize = 10_000;
/// Total variation below this is treated as exact mixing.
const MIXING_ZERO_TOL: f64 = 1e-14;
/// Level below which a stalled total-variation curve is treated as rounding noise.
const MIXING_NOISE_FLOOR: f64 = 1e-9;
const MIXING_STALL_RATIO: f64 = 0.999;
/// Accuracy level the envelope fit is tuned for.
const MIXING_FIT_EPS: f64 = 1e-8;
/// Rate reported when the chain mixes exactly in one step.
pub const MIXING_RHO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyChain {
    transition: DMatrix<f64>,
    /// `n_agents x n_states`; entry `(j, s)` is agent `j`'s expected reward at `s`.
    rewards: DMatrix<f64>,
    gamma: f64,
}

/// One observed transition `s -> s_next` with each agent's realised reward.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTransition {
    pub s: usize,
    pub s_next: usize,
    pub local_rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RewardNoise {
    #[default]
    None,
    /// Zero-mean uniform noise on `[-half_width, half_width]`, drawn
    /// independently for every agent and step.
    Uniform { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    Fixed(usize),
    /// Draw the first state from the stationary distribution.
    Stationary,
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Fixed(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajectoryOptions {
    pub initial: InitialState,
    pub noise: RewardNoise,
}

/// Geometric envelope `d_tv(e_s P^t, Pi) <= gamma * rho^t`, `t >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingEstimate {
    pub gamma: f64,
    pub rho: f64,
    /// `max_s d_tv(e_s P^t, Pi)` for `t = 1, 2, ...`.
    pub curve: Vec<f64>,
    /// The chain is exactly stationary after a single step.
    pub one_step: bool,
}

impl MixingEstimate {
    /// Envelope value at step `t`.
    pub fn envelope(&self, t: usize) -> f64 {
        self.gamma * self.rho.powi(t as i32)
    }

    /// Mixing time at accuracy `eps`: 1 for a one-step chain, otherwise
    /// [`crate::analysis::mixing_time_bound`] on the fitted envelope.
    pub fn mixing_time(&self, eps: f64) -> Result<usize> {
        if self.one_step {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
            }
            return Ok(1);
        }
        crate::analysis::mixing_time_bound(self.gamma, self.rho, eps)
    }
}

fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() == 0 || p.nrows() != p.ncols() {
        return Err(Error::Dimension(format!(
            "transition matrix must be square and nonempty, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    for i in 0..p.nrows() {
        let mut sum = 0.0;
        for j in 0..p.ncols() {
            let v = p[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "transition entry ({i},{j}) = {v} is not a probability"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "row {i} of the transition matrix sums to {sum}"
            )));
        }
    }
    Ok(())
}

fn bfs_reach(n: usize, adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; n];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap();
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl PolicyChain {
    /// Builds a chain and checks every invariant: stochastic rows,
    /// irreducibility, aperiodicity, finite rewards and `gamma in (0,1)`.
    pub fn new(transition: DMatrix<f64>, rewards: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let chain = Self::new_unverified(transition, rewards, gamma)?;
        chain.check_ergodic()?;
        Ok(chain)
    }

    /// Like [`PolicyChain::new`] but skips the ergodicity check. Useful for
    /// sampling from deliberately periodic or reducible test chains.
    pub fn new_unverified(
        transition: DMatrix<f64>,
        rewards: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        check_stochastic(&transition)?;
        if rewards.nrows() == 0 || rewards.ncols() != transition.nrows() {
            return Err(Error::Dimension(format!(
                "rewards must be n_agents x {} with n_agents >= 1, got {}x{}",
                transition.nrows(),
                rewards.nrows(),
                rewards.ncols()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("rewards must be finite".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in (0,1), got {gamma}"
            )));
        }
        Ok(Self {
            transition,
            rewards,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn n_agents(&self) -> usize {
        self.rewards.nrows()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    pub fn reward(&self, agent: usize, state: usize) -> f64 {
        self.rewards[(agent, state)]
    }

    /// Average of the local expected rewards at `state`.
    pub fn global_reward(&self, state: usize) -> f64 {
        self.rewards.column(state).sum() / self.n_agents() as f64
    }

    fn support(&self) -> Vec<Vec<usize>> {
        let n = self.n_states();
        (0..n)
            .map(|i| (0..n).filter(|&j| self.transition[(i, j)] > 0.0).collect())
            .collect()
    }

    /// Strong connectivity of the transition support graph and period one.
    pub fn check_ergodic(&self) -> Result<()> {
        let n = self.n_states();
        let adj = self.support();
        let mut radj = vec![Vec::new(); n];
        for (u, out) in adj.iter().enumerate() {
            for &v in out {
                radj[v].push(u);
            }
        }
        let fwd = bfs_reach(n, &adj, 0);
        let bwd = bfs_reach(n, &radj, 0);
        if fwd.iter().chain(bwd.iter()).any(Option::is_none) {
            return Err(Error::NonErgodic("transition graph is not irreducible".into()));
        }
        // Period of an irreducible chain: gcd over edges of level(u) + 1 - level(v).
        let mut period = 0;
        for (u, out) in adj.iter().enumerate() {
            let lu = fwd[u].unwrap();
            for &v in out {
                let lv = fwd[v].unwrap();
                period = gcd(period, (lu + 1).abs_diff(lv));
            }
        }
        if period != 1 {
            return Err(Error::NonErgodic(format!("chain is periodic with period {period}")));
        }
        Ok(())
    }

    pub fn is_ergodic(&self) -> bool {
        self.check_ergodic().is_ok()
    }

    /// Unique stationary distribution, by power iteration with a direct
    /// linear solve as fallback.
    pub fn stationary_distribution(&self) -> Result<DVector<f64>> {
        let n = self.n_states();
        let pt = self.transition.transpose();
        let mut pi = DVector::from_element(n, 1.0 / n as f64);
        for _ in 0..POWER_MAX_ITERS {
            let mut next = &pt * &pi;
            let s = next.sum();
            next /= s;
            let diff = (&next - &pi).abs().sum();
            pi = next;
            if diff <= POWER_TOL {
                if n <= DIRECT_SOLVE_MAX_STATES {
                    pi = self.polish(pi);
                }
                return self.finish_stationary(pi);
            }
        }
        if n <= DIRECT_SOLVE_MAX_STATES {
            return self.finish_stationary(self.stationary_direct()?);
        }
        Err(Error::NonErgodic(format!(
            "power iteration did not converge within {POWER_MAX_ITERS} iterations"
        )))
    }

    /// Keeps whichever of `pi` and the direct solution has the smaller residual.
    fn polish(&self, pi: DVector<f64>) -> DVector<f64> {
        let residual = |v: &DVector<f64>| (self.transition.tr_mul(v) - v).abs().sum();
        match self.stationary_direct() {
            Ok(direct) if direct.iter().all(|v| *v > -1e-14) && residual(&direct) < residual(&pi) => {
                direct
            }
            _ => pi,
        }
    }

    /// Solves `(P^T - I) pi = 0` with the last equation replaced by `sum(pi) = 1`.
    pub fn stationary_direct(&self) -> Result<DVector<f64>> {
        let n = self.n_states();
        let mut m = self.transition.transpose() - DMatrix::identity(n, n);
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        m.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NonErgodic("stationary equations are singular".into()))
    }

    fn finish_stationary(&self, mut pi: DVector<f64>) -> Result<DVector<f64>> {
        pi.iter_mut().for_each(|v| {
            if *v < 0.0 && *v > -1e-14 {
                *v = 0.0
            }
        });
        if pi.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonErgodic("stationary vector has negative mass".into()));
        }
        let s = pi.sum();
        pi /= s;
        let residual = (self.transition.tr_mul(&pi) - &pi).abs().sum();
        if residual > STATIONARY_RESIDUAL_TOL {
            return Err(Error::NonErgodic(format!(
                "stationary residual {residual:e} exceeds tolerance"
            )));
        }
        Ok(pi)
    }

    /// Endless Markov sample stream; deterministic in `seed`.
    pub fn sampler(&self, seed: u64, options: TrajectoryOptions) -> Result<MarkovSampler<'_>> {
        MarkovSampler::new(self, seed, options)
    }

    pub fn sample_trajectory(
        &self,
        length: usize,
        seed: u64,
        options: TrajectoryOptions,
    ) -> Result<Vec<SampleTransition>> {
        if length == 0 {
            return Err(Error::InvalidArgument("trajectory length must be >= 1".into()));
        }
        Ok(self.sampler(seed, options)?.take(length).collect())
    }

    /// Independent draws `s ~ Pi`, `s' ~ P(s, .)`: exact stationary samples
    /// of the transition pair, used by unbiasedness checks.
    pub fn sample_stationary_pairs(&self, count: usize, seed: u64) -> Result<Vec<SampleTransition>> {
        let pi = self.stationary_distribution()?;
        let pi_cdf = cumulative(pi.as_slice());
        let rows = self.cumulative_rows();
        let n = self.n_states();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let s = draw(&pi_cdf, rng.random());
                let s_next = draw(&rows[s * n..(s + 1) * n], rng.random());
                SampleTransition {
                    s,
                    s_next,
                    local_rewards: self.rewards.column(s).iter().copied().collect(),
                }
            })
            .collect())
    }

    fn cumulative_rows(&self) -> Vec<f64> {
        let n = self.n_states();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let row: Vec<f64> = self.transition.row(i).iter().copied().collect();
            out.extend(cumulative(&row));
        }
        out
    }

    /// Fits the envelope `d_tv(e_s P^t, Pi) <= gamma rho^t` over all start
    /// states. The rate is chosen to minimise the implied mixing time at a
    /// small reference accuracy; `gamma` is then the smallest value (at
    /// least one) dominating every measured point.
    pub fn estimate_mixing(&self) -> Result<MixingEstimate> {
        let n = self.n_states();
        let pi = self.stationary_distribution()?;
        let mut dist = DMatrix::<f64>::identity(n, n);
        let mut curve = Vec::new();
        for _ in 0..MIXING_MAX_STEPS {
            dist = &dist * &self.transition;
            let d = (0..n)
                .map(|s| (0..n).map(|k| (dist[(s, k)] - pi[k]).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            // Below the noise floor the curve stops contracting; keep only
            // the geometrically decaying part.
            if let Some(&prev) = curve.last() {
                if d < MIXING_NOISE_FLOOR && d > MIXING_STALL_RATIO * prev {
                    break;
                }
            }
            curve.push(d);
            if d <= MIXING_ZERO_TOL {
                break;
            }
        }
        fit_envelope(curve)
    }

    /// `max_s d_tv(e_s P^t, Pi)`.
    pub fn worst_case_tv(&self, t: usize) -> Result<f64> {
        let n = self.n_states();
        let pi = self.stationary_distribution()?;
        let mut dist = DMatrix::<f64>::identity(n, n);
        for _ in 0..t {
            dist = &dist * &self.transition;
        }
        Ok((0..n)
            .map(|s| (0..n).map(|k| (dist[(s, k)] - pi[k]).abs()).sum::<f64>())
            .fold(0.0, f64::max))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        crate::io::write_matrix_csv(&dir.join("transition.csv"), &self.transition)?;
        crate::io::write_matrix_csv(&dir.join("rewards.csv"), &self.rewards)?;
        std::fs::write(dir.join("gamma.txt"), format!("{}\n", fmt_real(self.gamma)))?;
        Ok(())
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let p = crate::io::read_matrix_csv(&dir.join("transition.csv"))?;
        let r = crate::io::read_matrix_csv(&dir.join("rewards.csv"))?;
        let gamma = parse_real(&std::fs::read_to_string(dir.join("gamma.txt"))?)?;
        Self::new(p, r, gamma)
    }
}

fn fit_envelope(curve: Vec<f64>) -> Result<MixingEstimate> {
    let positive: Vec<(usize, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, d)| (i + 1, *d))
        .collect();
    if curve.iter().all(|d| *d <= MIXING_ZERO_TOL) {
        return Ok(MixingEstimate {
            gamma: 1.0,
            rho: MIXING_RHO_FLOOR,
            curve,
            one_step: true,
        });
    }
    let first = curve[0];
    let last = *curve.last().unwrap();
    if curve.len() == MIXING_MAX_STEPS && last >= first * (1.0 - 1e-9) {
        return Err(Error::NonErgodic(format!(
            "total variation does not decay (d(1) = {first:e}, d({MIXING_MAX_STEPS}) = {last:e})"
        )));
    }

    // log Gamma(u) with u = log(rho): convex, so the mixing-time objective
    // (log Gamma(u) - log eps) / (-u) is quasi-convex and ternary search applies.
    let log_gamma = |u: f64| -> f64 {
        positive
            .iter()
            .map(|&(t, d)| d.ln() - t as f64 * u)
            .fold(0.0, f64::max)
    };
    let objective = |u: f64| (log_gamma(u) - MIXING_FIT_EPS.ln()) / (-u);
    let mut lo = MIXING_RHO_FLOOR.ln();
    let mut hi = (1.0 - 1e-12f64).ln();
    for _ in 0..300 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if objective(m1) <= objective(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let u = 0.5 * (lo + hi);
    let rho = u.exp();
    let gamma = log_gamma(u).exp() * (1.0 + 1e-12);
    Ok(MixingEstimate {
        gamma,
        rho,
        curve,
        one_step: false,
    })
}

/// Total variation in the unnormalised convention `sum_i |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    row.iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Inverse-CDF draw; zero-mass entries are never selected.
fn draw(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().unwrap();
    let i = cdf.partition_point(|&c| c <= u * total);
    i.min(cdf.len() - 1)
}

pub struct MarkovSampler<'a> {
    chain: &'a PolicyChain,
    cdf: Vec<f64>,
    rng: ChaCha8Rng,
    state: usize,
    noise: RewardNoise,
}

impl<'a> MarkovSampler<'a> {
    fn new(chain: &'a PolicyChain, seed: u64, options: TrajectoryOptions) -> Result<Self> {
        let n = chain.n_states();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = match options.initial {
            InitialState::Fixed(s) if s < n => s,
            InitialState::Fixed(s) => {
                return Err(Error::InvalidArgument(format!(
                    "initial state {s} out of range for {n} states"
                )))
            }
            InitialState::Stationary => {
                let pi = chain.stationary_distribution()?;
                draw(&cumulative(pi.as_slice()), rng.random())
            }
        };
        if let RewardNoise::Uniform { half_width } = options.noise {
            if !(half_width.is_finite() && half_width >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise half-width must be finite and nonnegative, got {half_width}"
                )));
            }
        }
        Ok(Self {
            chain,
            cdf: chain.cumulative_rows(),
            rng,
            state,
            noise: options.noise,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Iterator for MarkovSampler<'_> {
    type Item = SampleTransition;

    fn next(&mut self) -> Option<SampleTransition> {
        let n = self.chain.n_states();
        let s = self.state;
        let s_next = draw(&self.cdf[s * n..(s + 1) * n], self.rng.random());
        let local_rewards = (0..self.chain.n_agents())
            .map(|j| {
                let r = self.chain.rewards[(j, s)];
                match self.noise {
                    RewardNoise::None => r,
                    RewardNoise::Uniform { half_width } => {
                        r + half_width * (2.0 * self.rng.random::<f64>() - 1.0)
                    }
                }
            })
            .collect();
        self.state = s_next;
        Some(SampleTransition {
            s,
            s_next,
            local_rewards,
        })
    }
}

/// Random ergodic chain with `branching` support points per row.
///
/// Each row puts Dirichlet(1, ..., 1) masses on its successor `(s + 1) mod n`
/// plus `branching - 1` further distinct states, then mixes in a self-loop
/// of mass [`SELF_LOOP_MASS`]. The successor edge makes the chain
/// irreducible and the self-loop makes it aperiodic. Local rewards split a
/// uniform total reward `R(s) ~ U[0, 1)` across agents in random
/// Dirichlet proportions.
pub fn random_ergodic_chain(
    n_states: usize,
    n_agents: usize,
    branching: usize,
    gamma: f64,
    seed: u64,
) -> Result<PolicyChain> {
    if n_states == 0 || n_agents == 0 {
        return Err(Error::InvalidArgument("need at least one state and one agent".into()));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::InvalidArgument(format!(
            "branching must lie in [1, {n_states}], got {branching}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DMatrix::<f64>::zeros(n_states, n_states);
    for s in 0..n_states {
        let succ = (s + 1) % n_states;
        let mut support = vec![succ];
        if branching > 1 {
            let others: Vec<usize> = (0..n_states).filter(|&k| k != succ).collect();
            for i in index::sample(&mut rng, others.len(), branching - 1) {
                support.push(others[i]);
            }
        }
        let masses: Vec<f64> = support.iter().map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = masses.iter().sum();
        for (&k, m) in support.iter().zip(&masses) {
            p[(s, k)] += (1.0 - SELF_LOOP_MASS) * m / total;
        }
        p[(s, s)] += SELF_LOOP_MASS;
        let row_sum: f64 = p.row(s).sum();
        for k in 0..n_states {
            p[(s, k)] /= row_sum;
        }
    }
    let mut rewards = DMatrix::<f64>::zeros(n_agents, n_states);
    for s in 0..n_states {
        let total_reward: f64 = rng.random();
        let shares: Vec<f64> = (0..n_agents).map(|_| Exp1.sample(&mut rng)).collect();
        let share_total: f64 = shares.iter().sum();
        for (j, share) in shares.iter().enumerate() {
            rewards[(j, s)] = share / share_total * total_reward;
        }
    }
    PolicyChain::new(p, rewards, gamma)
}

/// Writes a trajectory as `t,s,s_next,r_1,...,r_N` with 17 significant digits.
pub fn trajectory_to_csv(samples: &[SampleTransition]) -> String {
    let n_agents = samples.first().map_or(0, |x| x.local_rewards.len());
    let mut out = String::from("t,s,s_next");
    for j in 1..=n_agents {
        let _ = write!(out, ",r_{j}");
    }
    out.push('\n');
    for (t, x) in samples.iter().enumerate() {
        let _ = write!(out, "{t},{},{}", x.s, x.s_next);
        for r in &x.local_rewards {
            let _ = write!(out, ",{}", fmt_real(*r));
        }
        out.push('\n');
    }
    out
}

pub fn trajectory_from_csv(text: &str) -> Result<Vec<SampleTransition>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[..3] != ["t", "s", "s_next"] {
        return Err(Error::Parse(format!("bad trajectory header {header:?}")));
    }
    let n_agents = cols.len() - 3;
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_agents + 3 {
            return Err(Error::Parse(format!("line {}: wrong field count", lineno + 2)));
        }
        let idx = |f: &str| {
            f.parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
        };
        out.push(SampleTransition {
            s: idx(fields[1])?,
            s_next: idx(fields[2])?,
            local_rewards: fields[3..]
                .iter()
                .map(|f| parse_real(f))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> PolicyChain {
        PolicyChain::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn single_state_is_trivially_stationary() {
        let c = PolicyChain::new(DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(2, 1), 0.5)
            .unwrap();
        assert_eq!(c.stationary_distribution().unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let c = PolicyChain::new(
            DMatrix::from_element(2, 2, 0.5),
            DMatrix::zeros(1, 2),
            0.5,
        )
        .unwrap();
        let pi = c.stationary_distribution().unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15 && (pi[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_state_matches_left_eigenvector() {
        // pi P = pi with P = [[.9,.1],[.2,.8]]: 0.1 pi_0 = 0.2 pi_1 => pi = (2/3, 1/3).
        let pi = two_state().stationary_distribution().unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows_and_periodic_chains() {
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.0, 1.0]);
        assert!(PolicyChain::new(bad, DMatrix::zeros(1, 2), 0.5).is_err());
        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            PolicyChain::new(flip, DMatrix::zeros(1, 2), 0.5),
            Err(Error::NonErgodic(_))
        ));
        let reducible = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(PolicyChain::new(reducible, DMatrix::zeros(1, 2), 0.5).is_err());
        assert!(PolicyChain::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), 1.0).is_err());
    }

    #[test]
    fn reducible_unverified_chain_has_no_stationary_solution() {
        let reducible = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = PolicyChain::new_unverified(reducible, DMatrix::zeros(1, 2), 0.5).unwrap();
        assert!(c.stationary_direct().is_err());
    }

    #[test]
    fn deterministic_flip_single_step() {
        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let c = PolicyChain::new_unverified(flip, DMatrix::from_row_slice(1, 2, &[3.0, 4.0]), 0.5)
            .unwrap();
        let traj = c.sample_trajectory(1, 7, TrajectoryOptions::default()).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!((traj[0].s, traj[0].s_next), (0, 1));
        assert_eq!(traj[0].local_rewards, vec![3.0]);
        assert!(c.sample_trajectory(0, 7, TrajectoryOptions::default()).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!((tv_distance(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - 0.8).abs() < 1e-15);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn rank_one_chain_mixes_in_one_step() {
        let c = PolicyChain::new(DMatrix::from_element(2, 2, 0.5), DMatrix::zeros(1, 2), 0.5)
            .unwrap();
        let m = c.estimate_mixing().unwrap();
        assert!(m.one_step);
        assert_eq!(m.gamma, 1.0);
        assert!(m.rho <= MIXING_RHO_FLOOR);
    }

    #[test]
    fn two_state_rate_is_second_eigenvalue() {
        // d_tv(e_1 P^t, Pi) = (4/3) 0.7^t is the worst start state.
        let m = two_state().estimate_mixing().unwrap();
        assert!((m.rho - 0.7).abs() < 1e-3, "rho = {}", m.rho);
        assert!((m.gamma - 4.0 / 3.0).abs() < 0.05, "gamma = {}", m.gamma);
        for (i, d) in m.curve.iter().enumerate() {
            assert!(*d <= m.envelope(i + 1));
        }
    }

    #[test]
    fn generator_degenerate_and_row_sums() {
        let c = random_ergodic_chain(1, 3, 1, 0.9, 1).unwrap();
        assert_eq!(c.transition()[(0, 0)], 1.0);
        let c = random_ergodic_chain(30, 4, 3, 0.9, 11).unwrap();
        for i in 0..30 {
            assert!((c.transition().row(i).sum() - 1.0).abs() <= ROW_SUM_TOL);
            assert!(c.transition()[(i, i)] >= SELF_LOOP_MASS);
        }
        assert!(random_ergodic_chain(5, 1, 6, 0.9, 0).is_err());
        assert!(random_ergodic_chain(5, 1, 0, 0.9, 0).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let c = random_ergodic_chain(6, 3, 2, 0.9, 5).unwrap();
        let opts = TrajectoryOptions {
            initial: InitialState::Stationary,
            noise: RewardNoise::Uniform { half_width: 0.3 },
        };
        let traj = c.sample_trajectory(50, 9, opts).unwrap();
        let back = trajectory_from_csv(&trajectory_to_csv(&traj)).unwrap();
        assert_eq!(traj, back);
    }
}
