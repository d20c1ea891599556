//! Optimality and surrogate gaps, the mixing-time and rate-bound formulas,
//! and empirical checks of the convergence lemmas.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chain::{MixingEstimate, PolicyChain, SampleTransition};
use crate::features::FeatureMap;
use crate::io::fmt_real;
use crate::objective::{stochastic_gradient, SaddleModel};
use crate::solver::{lazy_projection_bound, lazy_projection_path, lazy_projection_regret, RunTrace};
use crate::{Error, Result};

/// Relative slack for inequalities that hold exactly in real arithmetic.
pub const ROUNDING_SLACK: f64 = 1e-10;

fn holds_leq(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + ROUNDING_SLACK * (1e-300 + lhs.abs().max(rhs.abs()))
}

/// Exact gap oracle built from the closed-form saddle point.
#[derive(Debug, Clone)]
pub struct GapOracle<'a> {
    model: &'a SaddleModel,
    x_star: DVector<f64>,
    y_star: Vec<DVector<f64>>,
    f_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// `(1/N) sum_j (f_j(x) - f_j(x*))`.
    pub eps: f64,
    pub eps_surrogate: f64,
    /// `f_j(x) - f_j(x*)` for each agent.
    pub per_agent: Vec<f64>,
}

impl<'a> GapOracle<'a> {
    pub fn new(model: &'a SaddleModel) -> Result<Self> {
        let sol = model.saddle_solution()?;
        let f_star = (0..model.n_agents())
            .map(|j| model.local_mspbe(j, &sol.x))
            .collect();
        Ok(Self {
            model,
            x_star: sol.x,
            y_star: sol.y_locals,
            f_star,
        })
    }

    pub fn model(&self) -> &SaddleModel {
        self.model
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn y_star(&self) -> &[DVector<f64>] {
        &self.y_star
    }

    /// Optimality gap, evaluated as `1/2 ||A (x - x*)||^2_{C^-1}`, which
    /// equals the mean of `f_j(x) - f_j(x*)` because `A x* = b`.
    pub fn gap(&self, x: &DVector<f64>) -> f64 {
        let r = self.model.a() * (x - &self.x_star);
        0.5 * r.dot(&self.model.c_solve(&r))
    }

    /// The gap straight from its definition as a mean of local differences.
    pub fn gap_by_definition(&self, x: &DVector<f64>) -> f64 {
        let n = self.model.n_agents();
        (0..n)
            .map(|j| self.model.local_mspbe(j, x) - self.f_star[j])
            .sum::<f64>()
            / n as f64
    }

    /// `argmax_{||y|| <= R_y} psi_j(x, y)`, interior by the dual-radius rule.
    pub fn dual_argmax(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        crate::solver::project_ball(&self.model.dual_maximizer(j, x), self.model.radius_y())
    }

    /// `(1/N) sum_j (psi_j(x, y_j*(x)) - psi_j(x*, y_j))`.
    pub fn surrogate_gap(&self, x: &DVector<f64>, ys: &[DVector<f64>]) -> f64 {
        let n = self.model.n_agents();
        (0..n)
            .map(|j| {
                self.model.psi(j, x, &self.dual_argmax(j, x))
                    - self.model.psi(j, &self.x_star, &ys[j])
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn report(&self, x: &DVector<f64>, ys: &[DVector<f64>]) -> GapReport {
        GapReport {
            eps: self.gap(x),
            eps_surrogate: self.surrogate_gap(x, ys),
            per_agent: (0..self.model.n_agents())
                .map(|j| self.model.local_mspbe(j, x) - self.f_star[j])
                .collect(),
        }
    }
}

/// `ceil(log(Gamma / eps) / |log rho|) + 1`, with a nonpositive ceiling
/// argument clamped to zero.
pub fn mixing_time_bound(gamma: f64, rho: f64, eps: f64) -> Result<usize> {
    if !(gamma >= 1.0 && rho > 0.0 && rho < 1.0 && eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need Gamma >= 1, rho in (0,1), eps > 0; got ({gamma}, {rho}, {eps})"
        )));
    }
    let v = (gamma / eps).ln() / rho.ln().abs();
    // Shave rounding noise so exact integers are not pushed to the next one.
    let c = (v * (1.0 - 1e-12)).ceil().max(0.0);
    Ok(c as usize + 1)
}

/// The two terms of the rate bound with unit constants.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundShape {
    /// `G (R L + G) log^2(T sqrt(N)) / (T (1 - sigma2))`
    pub term_network: f64,
    /// `G (G + R L) (1 + T1) / T`
    pub term_horizon: f64,
    /// `ceil(log(Gamma T) / |log rho|) + 1`
    pub tau: usize,
    pub warnings: Vec<String>,
}

impl BoundShape {
    pub fn total(&self) -> f64 {
        self.term_network + self.term_horizon
    }
}

#[allow(clippy::too_many_arguments)]
pub fn theorem_bound_shape(
    g: f64,
    r: f64,
    l: f64,
    sigma2: f64,
    t: usize,
    t1: usize,
    n: usize,
    mixing_gamma: f64,
    mixing_rho: f64,
) -> Result<BoundShape> {
    if t == 0 || t1 == 0 || n == 0 || !(0.0..1.0).contains(&sigma2) {
        return Err(Error::InvalidArgument(format!(
            "need T, T1, N >= 1 and sigma2 in [0,1); got T = {t}, T1 = {t1}, N = {n}, sigma2 = {sigma2}"
        )));
    }
    let tf = t as f64;
    let log_term = (tf * (n as f64).sqrt()).ln();
    let term_network = g * (r * l + g) * log_term * log_term / (tf * (1.0 - sigma2));
    let term_horizon = g * (g + r * l) * (1.0 + t1 as f64) / tf;
    let tau = mixing_time_bound(mixing_gamma, mixing_rho, 1.0 / tf)?;
    let mut warnings = Vec::new();
    let ratio = t / t1;
    if !t.is_multiple_of(t1) || !(ratio + 1).is_power_of_two() {
        warnings.push(format!("T = {t} is not (2^K - 1) T1 for T1 = {t1}"));
    }
    if t1 < tau {
        warnings.push(format!("T1 = {t1} is below tau = {tau}"));
    }
    Ok(BoundShape {
        term_network,
        term_horizon,
        tau,
        warnings,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub round: Option<usize>,
    pub agent: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn leq(check: &str, round: Option<usize>, agent: Option<usize>, lhs: f64, rhs: f64) -> Self {
        Self {
            check: check.to_string(),
            round,
            agent,
            lhs,
            rhs,
            pass: holds_leq(lhs, rhs),
        }
    }

    /// `lhs <= rhs` with an explicit absolute tolerance.
    pub fn within(
        check: &str,
        round: Option<usize>,
        agent: Option<usize>,
        lhs: f64,
        rhs: f64,
    ) -> Self {
        Self {
            check: check.to_string(),
            round,
            agent,
            lhs,
            rhs,
            pass: lhs <= rhs,
        }
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `check,round,agent,lhs,rhs,pass`
pub fn report_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("check,round,agent,lhs,rhs,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.check,
            opt(r.round),
            opt(r.agent),
            fmt_real(r.lhs),
            fmt_real(r.rhs),
            r.pass
        );
    }
    out
}

/// Human-readable summary grouped by check name.
pub fn report_text(rows: &[CheckRow]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.check.as_str()) {
            names.push(&r.check);
        }
    }
    let mut out = String::new();
    for name in names {
        let group: Vec<&CheckRow> = rows.iter().filter(|r| r.check == name).collect();
        let failed: Vec<&&CheckRow> = group.iter().filter(|r| !r.pass).collect();
        let status = if failed.is_empty() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{status} {name}: {}/{} rows hold",
            group.len() - failed.len(),
            group.len()
        );
        for r in failed.iter().take(5) {
            let _ = writeln!(
                out,
                "    round {} agent {}: {:e} > {:e}",
                opt(r.round),
                opt(r.agent),
                r.lhs,
                r.rhs
            );
        }
    }
    let total_failed = rows.iter().filter(|r| !r.pass).count();
    let _ = writeln!(
        out,
        "{} checks, {} failed",
        rows.len(),
        total_failed
    );
    out
}

/// Consensus bound: for each round `k` and agent `j`,
/// `(1/T_k) sum_t ||x_j(t) - xbar(t)|| <= Delta_k`.
pub fn lemma1_delta(k: usize, etas: &[f64], horizons: &[usize], g: f64, sigma2: f64, n: usize) -> f64 {
    let tk = horizons[k - 1] as f64;
    let eta = etas[k - 1];
    let log = ((n as f64).sqrt() * tk).ln();
    let gap = 1.0 - sigma2;
    let sum: f64 = (0..k).map(|l| etas[l] * horizons[l] as f64).sum();
    2.0 * eta * g * log / gap + 4.0 * g / tk * (log / gap + 1.0) * sum + 2.0 * eta * g
}

/// Left side of the consensus bound recomputed from an iterate log.
pub fn consensus_deviation_from_log(log: &crate::solver::IterateLog, agent: usize) -> f64 {
    let t = log.len();
    (0..t)
        .map(|s| crate::linalg::dist(log.x_at(s, agent), log.x_bar_at(s)))
        .sum::<f64>()
        / t as f64
}

pub fn verify_lemma1(trace: &RunTrace, g: f64, sigma2: f64) -> Vec<CheckRow> {
    let etas: Vec<f64> = trace.rounds.iter().map(|r| r.eta).collect();
    let horizons: Vec<usize> = trace.rounds.iter().map(|r| r.horizon).collect();
    let mut rows = Vec::new();
    for r in &trace.rounds {
        let n = r.x_hat.len();
        let delta = lemma1_delta(r.round, &etas, &horizons, g, sigma2, n);
        let log = trace.iterate_logs.iter().find(|l| l.round == r.round);
        for j in 0..n {
            let lhs = match log {
                Some(l) => consensus_deviation_from_log(l, j),
                None => r.consensus_deviation[j],
            };
            rows.push(CheckRow::leq("lemma1_consensus", Some(r.round), Some(j), lhs, delta));
        }
    }
    rows
}

/// Result of a Monte-Carlo check of `E||(1/T) sum X(t)||^2 <= 4 M^2 / T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub estimate: f64,
    pub bound: f64,
    /// `4 M^2 / T (1 + 3 / sqrt(trials))`
    pub tolerance_bound: f64,
    pub max_step_norm: f64,
    pub pass: bool,
}

/// Dimension of the martingale-difference vectors.
const LEMMA3_DIM: usize = 3;

/// Draws bounded martingale differences `X(t) = s_t M u(t)` with a fair
/// sign `s_t` and a unit direction `u(t)` chosen from the past (the
/// direction of the partial sum, or a random one when it vanishes).
pub fn verify_lemma3(m: f64, t: usize, trials: usize, seed: u64) -> Result<MartingaleReport> {
    if trials < 100 || t == 0 || !(m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need trials >= 100, T >= 1, M > 0; got {trials}, {t}, {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut max_norm = 0.0f64;
    for _ in 0..trials {
        let mut sum = [0.0f64; LEMMA3_DIM];
        for _ in 0..t {
            let sn = crate::linalg::norm(&sum);
            let mut u = [0.0f64; LEMMA3_DIM];
            if sn > 0.0 {
                for k in 0..LEMMA3_DIM {
                    u[k] = sum[k] / sn;
                }
            } else {
                for v in u.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let un = crate::linalg::norm(&u);
                u.iter_mut().for_each(|v| *v /= un);
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut step_norm = 0.0;
            for k in 0..LEMMA3_DIM {
                let x = sign * m * u[k];
                sum[k] += x;
                step_norm += x * x;
            }
            max_norm = max_norm.max(step_norm.sqrt());
        }
        let mean_sq: f64 = sum.iter().map(|v| (v / t as f64).powi(2)).sum();
        total += mean_sq;
    }
    let estimate = total / trials as f64;
    let bound = 4.0 * m * m / t as f64;
    let tolerance_bound = bound * (1.0 + 3.0 / (trials as f64).sqrt());
    Ok(MartingaleReport {
        estimate,
        bound,
        tolerance_bound,
        max_step_norm: max_norm,
        pass: estimate <= tolerance_bound && max_norm <= m * (1.0 + 1e-12),
    })
}

fn random_in_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = crate::linalg::norm(&v);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

/// Uniform draw from the ball of radius `radius` in dimension `d`.
pub fn random_point_in_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DVector<f64> {
    DVector::from_vec(random_in_ball(rng, d, radius))
}

/// Lazy-projection regret bound on random instances: dimension, radius,
/// step, horizon, bounded gradients and comparator all drawn at random.
pub fn verify_lemma2(instances: usize, seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|i| {
            let d = rng.random_range(1..=6);
            let radius = 10f64.powf(rng.random_range(-1.0..1.0));
            let eta = 10f64.powf(rng.random_range(-2.0..1.0));
            let t = rng.random_range(1..=300);
            let gmax = 10f64.powf(rng.random_range(-1.0..1.0));
            let grads: Vec<Vec<f64>> = (0..t).map(|_| random_in_ball(&mut rng, d, gmax)).collect();
            let u1 = random_in_ball(&mut rng, d, radius);
            let u_star = random_in_ball(&mut rng, d, radius);
            let path = lazy_projection_path(&u1, &grads, eta, radius);
            let lhs = lazy_projection_regret(&path, &grads, &u_star);
            let rhs = lazy_projection_bound(&u1, &u_star, &grads, eta);
            CheckRow::leq("lemma2_regret", None, Some(i), lhs, rhs)
        })
        .collect()
}

/// Gap ordering and quadratic lower bounds at one checkpoint:
/// `0 <= eps <= eps'`, `eps >= rho_cert/2 ||x* - x||^2`,
/// `eps' >= rho_y/(2N) sum_j ||y_j* - y_j||^2` and
/// `eps' >= rho_y/(2N) sum_j ||y_j* - y_j*(x)||^2`.
pub fn check_gap_inequalities(
    oracle: &GapOracle<'_>,
    x_hats: &[DVector<f64>],
    y_hats: &[DVector<f64>],
    rho_cert: f64,
    rho_y: f64,
    round: Option<usize>,
) -> Vec<CheckRow> {
    let n = y_hats.len() as f64;
    let mut rows = Vec::new();
    let dual_dist: f64 = oracle
        .y_star()
        .iter()
        .zip(y_hats)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    for (i, x) in x_hats.iter().enumerate() {
        let eps = oracle.gap(x);
        let eps_s = oracle.surrogate_gap(x, y_hats);
        rows.push(CheckRow::leq("lemma4_nonneg", round, Some(i), 0.0, eps));
        rows.push(CheckRow::leq("lemma4_order", round, Some(i), eps, eps_s));
        rows.push(CheckRow::leq(
            "lemma5_cc1",
            round,
            Some(i),
            0.5 * rho_cert * (oracle.x_star() - x).norm_squared(),
            eps,
        ));
        rows.push(CheckRow::leq(
            "lemma5_cc2",
            round,
            Some(i),
            0.5 * rho_y / n * dual_dist,
            eps_s,
        ));
        let argmax_dist: f64 = (0..y_hats.len())
            .map(|j| (&oracle.y_star()[j] - oracle.dual_argmax(j, x)).norm_squared())
            .sum();
        rows.push(CheckRow::leq(
            "lemma5_cc3",
            round,
            Some(i),
            0.5 * rho_y / n * argmax_dist,
            eps_s,
        ));
    }
    rows
}

/// Gap inequalities at every checkpoint of a run.
pub fn verify_checkpoints(
    oracle: &GapOracle<'_>,
    trace: &RunTrace,
    rho_cert: f64,
    rho_y: f64,
) -> Vec<CheckRow> {
    trace
        .checkpoints
        .iter()
        .flat_map(|c| check_gap_inequalities(oracle, &c.x_hat, &c.y_hat, rho_cert, rho_y, Some(c.round)))
        .collect()
}

/// Surrogate-gap decomposition `eps'_i <= NET_i + PDG_i` at every round end,
/// with both terms evaluated from the round's running sums:
/// `NET_i = G (dev_i + (1/N) sum_j dev_j)` and
/// `PDG_i = (1/N) sum_j (psi_j(x_hat_j, y_j*(x_hat_i)) - mean_t psi_j(x*, y_j(t)))`,
/// where `psi_j(x*, .)` is averaged exactly through `mean_t y^T C y`.
pub fn verify_lemma6(oracle: &GapOracle<'_>, trace: &RunTrace, g: f64) -> Vec<CheckRow> {
    let model = oracle.model();
    let mut rows = Vec::new();
    for r in &trace.rounds {
        let n = r.x_hat.len();
        let mean_dev = r.consensus_deviation.iter().sum::<f64>() / n as f64;
        let psi_star_mean: Vec<f64> = (0..n)
            .map(|j| {
                let resid = model.a() * oracle.x_star() - model.b_local(j);
                r.y_hat[j].dot(&resid) - 0.5 * r.dual_quadratic[j]
            })
            .collect();
        for i in 0..n {
            let x_i = &r.x_hat[i];
            let net = g * (r.consensus_deviation[i] + mean_dev);
            let pdg = (0..n)
                .map(|j| model.psi(j, &r.x_hat[j], &oracle.dual_argmax(j, x_i)) - psi_star_mean[j])
                .sum::<f64>()
                / n as f64;
            let eps_s = oracle.surrogate_gap(x_i, &r.y_hat);
            rows.push(CheckRow::leq("lemma6_decomposition", Some(r.round), Some(i), eps_s, net + pdg));
        }
    }
    rows
}

/// Restart and schedule invariants of a run: restarts equal the previous
/// round's averages within `1e-12`, `eta_k T_k` is constant and the
/// horizons double.
pub fn verify_schedule(trace: &RunTrace) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let first = match trace.rounds.first() {
        Some(r) => r,
        None => return rows,
    };
    let product = first.eta * first.horizon as f64;
    for w in trace.rounds.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        let dx = prev
            .x_hat
            .iter()
            .zip(&cur.x_init)
            .chain(prev.y_hat.iter().zip(&cur.y_init))
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        rows.push(CheckRow::within("restart_average", Some(cur.round), None, dx, 1e-12));
        let p = cur.eta * cur.horizon as f64;
        rows.push(CheckRow::within(
            "eta_horizon_constant",
            Some(cur.round),
            None,
            (p - product).abs(),
            0.0,
        ));
        rows.push(CheckRow::within(
            "horizon_doubles",
            Some(cur.round),
            None,
            cur.horizon as f64,
            2.0 * prev.horizon as f64,
        ));
    }
    rows
}
/// Measured worst-case total variation at the mixing time for accuracy `eps`.
/// Measured worst-case total variation at `t = mixing_time_bound(Gamma, rho, eps)`.
pub fn verify_mixing_time(chain: &PolicyChain, est: &MixingEstimate, eps: f64) -> Result<CheckRow> {
    let t = est.mixing_time(eps)?;
    let d = chain.worst_case_tv(t)?;
    Ok(CheckRow::within("mixing_time", None, Some(t), d, eps))
}

/// Exact `max_{||y|| <= R_y} psi_j(x, y)` through an eigendecomposition of
/// `C`, solving the boundary case by bisection on the multiplier.
pub fn ball_dual_max(model: &SaddleModel, j: usize, x: &DVector<f64>) -> f64 {
    let r = model.a() * x - model.b_local(j);
    let eig = model.c().clone().symmetric_eigen();
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let rt = q.tr_mul(&r);
    let solve = |mu: f64| -> DVector<f64> {
        DVector::from_iterator(rt.len(), rt.iter().zip(lam.iter()).map(|(v, l)| v / (l + mu)))
    };
    let radius = model.radius_y();
    let mut z = solve(0.0);
    if z.norm() > radius {
        let (mut lo, mut hi) = (0.0, 1.0);
        while solve(hi).norm() > radius {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if solve(mid).norm() > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        z = solve(hi);
    }
    let y = q * z;
    model.psi(j, x, &y)
}

/// Fenchel equality `max_y psi_j(x, y) = f_j(x)` at random primal points.
pub fn check_fenchel(model: &SaddleModel, points: usize, tol: f64, seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for p in 0..points {
        let x = random_point_in_ball(&mut rng, model.dim(), model.radius_x());
        for j in 0..model.n_agents() {
            let diff = (ball_dual_max(model, j, &x) - model.local_mspbe(j, &x)).abs();
            rows.push(CheckRow::within("fenchel_equality", Some(p), Some(j), diff, tol));
        }
    }
    rows
}

/// Central differences of `psi_j` against the analytic gradient.
pub fn check_gradients(
    model: &SaddleModel,
    points: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    (0..points)
        .map(|p| {
            let j = rng.random_range(0..model.n_agents());
            let x = random_point_in_ball(&mut rng, d, model.radius_x());
            let y = random_point_in_ball(&mut rng, d, model.radius_y());
            let (gx, gy) = model.grad_psi(j, &x, &y);
            let mut fd = DVector::zeros(2 * d);
            for k in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                fd[k] = (model.psi(j, &xp, &y) - model.psi(j, &xm, &y)) / (2.0 * h);
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[k] += h;
                ym[k] -= h;
                fd[d + k] = (model.psi(j, &x, &yp) - model.psi(j, &x, &ym)) / (2.0 * h);
            }
            let analytic = DVector::from_iterator(2 * d, gx.iter().chain(gy.iter()).copied());
            let rel = (&fd - &analytic).norm() / analytic.norm().max(f64::MIN_POSITIVE);
            CheckRow::within("gradient_fd", Some(p), Some(j), rel, tol)
        })
        .collect()
}

/// Per-coordinate z-scores of averaged stochastic gradients against the
/// population gradient at `(x, y)`, over the given stationary samples.
pub fn gradient_unbiasedness(
    model: &SaddleModel,
    features: &FeatureMap,
    samples: &[SampleTransition],
    j: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Vec<f64> {
    let d = model.dim();
    let mut sum = DVector::<f64>::zeros(2 * d);
    let mut sum_sq = DVector::<f64>::zeros(2 * d);
    for xi in samples {
        let (gx, gy) = stochastic_gradient(features, model.gamma(), j, x, y, xi);
        for k in 0..d {
            sum[k] += gx[k];
            sum_sq[k] += gx[k] * gx[k];
            sum[d + k] += gy[k];
            sum_sq[d + k] += gy[k] * gy[k];
        }
    }
    let m = samples.len() as f64;
    let (px, py) = model.grad_psi(j, x, y);
    (0..2 * d)
        .map(|k| {
            let mean = sum[k] / m;
            let var = (sum_sq[k] / m - mean * mean).max(0.0) * m / (m - 1.0);
            let se = (var / m).sqrt();
            let pop = if k < d { px[k] } else { py[k - d] };
            if se == 0.0 {
                if (mean - pop).abs() <= 1e-12 * (1.0 + pop.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (mean - pop) / se
            }
        })
        .collect()
}

/// Projected gradient descent on `f` over the primal ball with step
/// `1 / lambda_max(H)` from `start`, stopping when the step is below `tol`.
pub fn projected_gradient_minimize(
    model: &SaddleModel,
    start: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> DVector<f64> {
    let h: DMatrix<f64> = model.hessian();
    let lmax = crate::linalg::sym_eigenvalues(&h)[0];
    // Gradient of f: A^T C^-1 (A x - b) = H x - A^T C^-1 b.
    let lin = model.a().tr_mul(&model.c_solve(model.b()));
    let step = 1.0 / lmax;
    let mut x = start.clone();
    let mut prev = x.clone();
    let mut momentum_t = 1.0f64;
    let mut z = x.clone();
    for _ in 0..max_iters {
        let grad = &h * &z - &lin;
        let mut next = &z - grad * step;
        crate::linalg::project_ball_in_place(next.as_mut_slice(), model.radius_x());
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum_t * momentum_t).sqrt());
        z = &next + (&next - &prev) * ((momentum_t - 1.0) / t_next);
        momentum_t = t_next;
        let moved = (&next - &x).norm();
        prev = next.clone();
        x = next;
        if moved < tol {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_time_examples() {
        assert_eq!(mixing_time_bound(1.0, 0.5, 2f64.powi(-10)).unwrap(), 11);
        assert_eq!(mixing_time_bound(1.0, 0.5, 1.0).unwrap(), 1);
        assert_eq!(mixing_time_bound(2.0, 0.5, 4.0).unwrap(), 1);
        assert!(mixing_time_bound(0.5, 0.5, 0.1).is_err());
    }

    #[test]
    fn bound_shape_horizon_halves() {
        let a = theorem_bound_shape(2.0, 3.0, 1.5, 0.5, 7 * 64, 64, 10, 2.0, 0.7).unwrap();
        let b = theorem_bound_shape(2.0, 3.0, 1.5, 0.5, 14 * 64, 64, 10, 2.0, 0.7).unwrap();
        assert_eq!(a.term_horizon, 2.0 * b.term_horizon);
        assert!(a.warnings.is_empty());
        assert!(!b.warnings.is_empty());
    }

    #[test]
    fn lemma3_single_term() {
        let r = verify_lemma3(2.0, 1, 100, 1).unwrap();
        assert!((r.estimate - 4.0).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..10).map(|i| (i as f64, (i as f64).powf(-1.5))).collect();
        assert!((log_log_slope(&pts) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let rows = vec![CheckRow::leq("a", Some(1), None, 1.0, 2.0)];
        assert!(report_csv(&rows).starts_with("check,round,agent,lhs,rhs,pass\na,1,,"));
        assert!(report_text(&rows).contains("PASS a"));
    }
}
