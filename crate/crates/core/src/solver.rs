//! DHPD and the stochastic primal-dual baselines.
//!
//! All three algorithms share one engine. A run is a list of rounds, each
//! with a step size and a horizon `T_k`. A round starts at its restart
//! point `z(1)`, performs `T_k - 1` sample-driven updates and reports the
//! running averages of the `T_k` projected iterates `z(1), ..., z(T_k)`.
//! The sample stream is one Markov trajectory shared by all agents and
//! continued across rounds.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analysis::GapOracle;
use crate::chain::{InitialState, PolicyChain, RewardNoise, TrajectoryOptions};
use crate::features::FeatureMap;
use crate::linalg::{dist, dot, norm, project_ball_in_place};
use crate::network::MixingMatrix;
use crate::objective::{sample_gradient_into, SaddleModel};
use crate::{Error, Result};

/// Restart schedule `eta_k = eta1 / 2^(k-1)`, `T_k = 2^(k-1) T1`, `k = 1..=K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhpdConfig {
    pub eta1: f64,
    pub t1: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl DhpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0 && self.eta1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial step size must be positive, got {}",
                self.eta1
            )));
        }
        if self.t1 == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument("T1 and K must be at least 1".into()));
        }
        if self.rounds > 40 || self.t1.checked_shl(self.rounds as u32 - 1).is_none() {
            return Err(Error::InvalidArgument(format!(
                "schedule T1 = {}, K = {} overflows",
                self.t1, self.rounds
            )));
        }
        Ok(())
    }

    /// Step size of round `k` (1-based).
    pub fn step_size(&self, k: usize) -> f64 {
        self.eta1 / (1u64 << (k - 1)) as f64
    }

    /// Horizon of round `k` (1-based).
    pub fn horizon(&self, k: usize) -> usize {
        self.t1 << (k - 1)
    }

    /// `T = (2^K - 1) T1`.
    pub fn total_iterations(&self) -> usize {
        ((1usize << self.rounds) - 1) * self.t1
    }

    /// Samples consumed by a full run: `T - K`.
    pub fn total_samples(&self) -> usize {
        self.total_iterations() - self.rounds
    }

    pub fn schedule(&self) -> Vec<Round> {
        (1..=self.rounds)
            .map(|k| Round {
                eta: self.step_size(k),
                horizon: self.horizon(k),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Round {
    pub eta: f64,
    pub horizon: usize,
}

/// How agents combine their primal iterates.
#[derive(Debug, Clone, Copy)]
pub enum PrimalCoupling<'a> {
    /// `x'_j <- sum_i W_ij x'_i - eta g_{j,x}`.
    Mixing(&'a MixingMatrix),
    /// A single primal vector driven by the mean primal gradient.
    Centralized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub initial_state: InitialState,
    pub noise: RewardNoise,
    /// Interior checkpoints are placed whenever cumulative samples grow by
    /// this factor; every round end is also a checkpoint.
    pub checkpoint_growth: f64,
    pub log_iterates: bool,
    /// Worker threads for the per-agent updates; 1 runs inline.
    pub threads: usize,
    /// Mixing time of the chain, used only for the schedule warning.
    pub tau: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            initial_state: InitialState::default(),
            noise: RewardNoise::default(),
            checkpoint_growth: 1.1,
            log_iterates: false,
            threads: 1,
            tau: None,
        }
    }
}

/// Final per-agent state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x_lazy: DVector<f64>,
    pub x: DVector<f64>,
    pub y_lazy: DVector<f64>,
    pub y: DVector<f64>,
    pub x_sum: DVector<f64>,
    pub y_sum: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    /// 1-based round index.
    pub round: usize,
    pub eta: f64,
    pub horizon: usize,
    /// Cumulative samples at the end of the round.
    pub samples: usize,
    pub x_init: Vec<DVector<f64>>,
    pub y_init: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
    /// `(1/T_k) sum_t ||x_j(t) - xbar(t)||` with `xbar(t) = P_X(mean_j x'_j(t))`.
    pub consensus_deviation: Vec<f64>,
    /// `(1/T_k) sum_t y_j(t)^T C y_j(t)`.
    pub dual_quadratic: Vec<f64>,
    /// Time average of `xbar(t)`.
    pub x_bar_mean: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub samples: usize,
    pub round: usize,
    pub x_hat: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
    pub gaps: Vec<f64>,
}

impl Checkpoint {
    pub fn mean_gap(&self) -> f64 {
        self.gaps.iter().sum::<f64>() / self.gaps.len() as f64
    }
}

/// Every projected iterate of one round, row-major `[t][agent][coord]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateLog {
    pub round: usize,
    pub n_agents: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `P_X(mean_j x'_j(t))`, row-major `[t][coord]`.
    pub x_bar: Vec<f64>,
}

impl IterateLog {
    pub fn len(&self) -> usize {
        self.x_bar.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x_bar.is_empty()
    }

    pub fn x_at(&self, t: usize, j: usize) -> &[f64] {
        let o = (t * self.n_agents + j) * self.dim;
        &self.x[o..o + self.dim]
    }

    pub fn y_at(&self, t: usize, j: usize) -> &[f64] {
        let o = (t * self.n_agents + j) * self.dim;
        &self.y[o..o + self.dim]
    }

    pub fn x_bar_at(&self, t: usize) -> &[f64] {
        &self.x_bar[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub rounds: Vec<RoundOutput>,
    pub checkpoints: Vec<Checkpoint>,
    pub samples: usize,
    pub iterate_logs: Vec<IterateLog>,
    pub final_states: Vec<AgentState>,
    pub warnings: Vec<String>,
}

impl RunTrace {
    /// Final outputs `(x_hat_j, y_hat_j)` of the last round.
    pub fn output(&self) -> Option<&RoundOutput> {
        self.rounds.last()
    }

    /// `samples,agent,gap` rows with 0-based agents.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("samples,agent,gap\n");
        for c in &self.checkpoints {
            for (j, g) in c.gaps.iter().enumerate() {
                let _ = writeln!(out, "{},{j},{}", c.samples, crate::io::fmt_real(*g));
            }
        }
        out
    }
}

/// Parses `samples,agent,gap` rows back into `(samples, agent, gap)`.
pub fn trace_from_csv(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("samples,agent,gap") {
        return Err(Error::Parse("trace must start with `samples,agent,gap`".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("trace line {}: expected 3 fields", i + 2)));
        }
        let int = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 2)))
        };
        out.push((int(f[0])?, int(f[1])?, crate::io::parse_real(f[2])?));
    }
    Ok(out)
}

/// Euclidean projection onto the ball of radius `radius`.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let mut out = v.clone();
    project_ball_in_place(out.as_mut_slice(), radius);
    out
}

/// `accumulator / count`.
pub fn running_average(accumulator: &DVector<f64>, count: usize) -> Result<DVector<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("running average over zero iterates".into()));
    }
    Ok(accumulator / count as f64)
}

/// Runs Algorithm DHPD.
pub fn dhpd_run(
    model: &SaddleModel,
    chain: &PolicyChain,
    features: &FeatureMap,
    w: &MixingMatrix,
    cfg: &DhpdConfig,
    options: &RunOptions,
) -> Result<RunTrace> {
    cfg.validate()?;
    let mut trace = run_schedule(
        model,
        chain,
        features,
        PrimalCoupling::Mixing(w),
        &cfg.schedule(),
        cfg.seed,
        options,
    )?;
    let constants_warning = schedule_warnings(model, cfg, options.tau);
    for w in &constants_warning {
        log::warn!("{w}");
    }
    trace.warnings.extend(constants_warning);
    Ok(trace)
}

/// Fixed-step distributed SPD: one round of horizon `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn spd_run_distributed(
    model: &SaddleModel,
    chain: &PolicyChain,
    features: &FeatureMap,
    w: &MixingMatrix,
    eta: f64,
    horizon: usize,
    seed: u64,
    options: &RunOptions,
) -> Result<RunTrace> {
    check_fixed(eta, horizon)?;
    run_schedule(
        model,
        chain,
        features,
        PrimalCoupling::Mixing(w),
        &[Round { eta, horizon }],
        seed,
        options,
    )
}

/// Centralized SPD: one primal vector, one dual vector per agent.
pub fn spd_run_centralized(
    model: &SaddleModel,
    chain: &PolicyChain,
    features: &FeatureMap,
    eta: f64,
    horizon: usize,
    seed: u64,
    options: &RunOptions,
) -> Result<RunTrace> {
    check_fixed(eta, horizon)?;
    run_schedule(
        model,
        chain,
        features,
        PrimalCoupling::Centralized,
        &[Round { eta, horizon }],
        seed,
        options,
    )
}

fn check_fixed(eta: f64, horizon: usize) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) || horizon == 0 {
        return Err(Error::InvalidArgument(format!(
            "need eta > 0 and horizon >= 1, got eta = {eta}, horizon = {horizon}"
        )));
    }
    Ok(())
}

/// Warnings for the step-size and horizon hypotheses of the rate bound:
/// `eta1 >= 1 / (4/rho_y + 2/rho_cert)` and `T1 >= tau`.
pub fn schedule_warnings(model: &SaddleModel, cfg: &DhpdConfig, tau: Option<usize>) -> Vec<String> {
    let rho_y = model.lambda_min_c();
    let rho_x = model.certified_modulus();
    let threshold = 1.0 / (4.0 / rho_y + 2.0 / rho_x);
    let mut out = Vec::new();
    if cfg.eta1 < threshold {
        out.push(format!(
            "eta1 = {} is below 1/(4/rho_y + 2/rho_x) = {threshold:e}",
            cfg.eta1
        ));
    }
    if let Some(tau) = tau {
        if cfg.t1 < tau {
            out.push(format!("T1 = {} is below the mixing time tau = {tau}", cfg.t1));
        }
    }
    out
}

struct Engine<'a> {
    model: &'a SaddleModel,
    features: &'a FeatureMap,
    coupling: PrimalCoupling<'a>,
    /// Nonzero `(i, W_ij)` for each receiving agent `j`.
    in_weights: Vec<Vec<(usize, f64)>>,
    n: usize,
    d: usize,
    gamma: f64,
    rx: f64,
    ry: f64,
    x_lazy: Vec<f64>,
    x_lazy_next: Vec<f64>,
    x: Vec<f64>,
    y_lazy: Vec<f64>,
    y: Vec<f64>,
    gx: Vec<f64>,
    x_sum: Vec<f64>,
    y_sum: Vec<f64>,
    x_bar: Vec<f64>,
    x_bar_sum: Vec<f64>,
    dev_sum: Vec<f64>,
    yq_sum: Vec<f64>,
    count: usize,
}

impl<'a> Engine<'a> {
    fn agent_vecs(&self, buf: &[f64]) -> Vec<DVector<f64>> {
        buf.chunks(self.d).map(DVector::from_column_slice).collect()
    }

    fn averages(&self, sum: &[f64]) -> Vec<DVector<f64>> {
        let c = self.count as f64;
        sum.chunks(self.d)
            .map(|s| DVector::from_iterator(s.len(), s.iter().map(|v| v / c)))
            .collect()
    }

    /// Starts a round at the given projected point.
    fn restart(&mut self, x0: &[f64], y0: &[f64]) {
        self.x_lazy.copy_from_slice(x0);
        self.x.copy_from_slice(x0);
        self.y_lazy.copy_from_slice(y0);
        self.y.copy_from_slice(y0);
        self.x_sum.iter_mut().for_each(|v| *v = 0.0);
        self.y_sum.iter_mut().for_each(|v| *v = 0.0);
        self.x_bar_sum.iter_mut().for_each(|v| *v = 0.0);
        self.dev_sum.iter_mut().for_each(|v| *v = 0.0);
        self.yq_sum.iter_mut().for_each(|v| *v = 0.0);
        self.count = 0;
        self.accumulate();
    }

    /// Adds the current projected iterates to the running sums.
    fn accumulate(&mut self) {
        let (n, d) = (self.n, self.d);
        self.x_bar.copy_from_slice(&self.x_lazy[..d]);
        for j in 1..n {
            for k in 0..d {
                self.x_bar[k] += self.x_lazy[j * d + k];
            }
        }
        self.x_bar.iter_mut().for_each(|v| *v /= n as f64);
        project_ball_in_place(&mut self.x_bar, self.rx);
        let c = self.model.c();
        for j in 0..n {
            let xj = &self.x[j * d..(j + 1) * d];
            let yj = &self.y[j * d..(j + 1) * d];
            for k in 0..d {
                self.x_sum[j * d + k] += xj[k];
                self.y_sum[j * d + k] += yj[k];
            }
            self.dev_sum[j] += dist(xj, &self.x_bar);
            let mut q = 0.0;
            for a in 0..d {
                let mut row = 0.0;
                for b in 0..d {
                    row += c[(a, b)] * yj[b];
                }
                q += yj[a] * row;
            }
            self.yq_sum[j] += q;
        }
        for k in 0..d {
            self.x_bar_sum[k] += self.x_bar[k];
        }
        self.count += 1;
    }

    fn step(&mut self, s: usize, s_next: usize, rewards: &[f64], eta: f64, parallel: bool) {
        let d = self.d;
        let phi_s = self.features.row(s);
        let phi_next = self.features.row(s_next);
        let gamma = self.gamma;
        let (rx, ry) = (self.rx, self.ry);
        let x_lazy = &self.x_lazy;
        let in_weights = &self.in_weights;
        let mixing = matches!(self.coupling, PrimalCoupling::Mixing(_));

        let update = |j: usize,
                      xl_next: &mut [f64],
                      x: &mut [f64],
                      yl: &mut [f64],
                      y: &mut [f64],
                      gx: &mut [f64]| {
            let mut gy = [0.0f64; 64];
            let mut gy_heap;
            let gy: &mut [f64] = if d <= 64 {
                &mut gy[..d]
            } else {
                gy_heap = vec![0.0; d];
                &mut gy_heap
            };
            sample_gradient_into(phi_s, phi_next, gamma, rewards[j], x, y, gx, gy);
            if mixing {
                let (i0, w0) = in_weights[j][0];
                for k in 0..d {
                    xl_next[k] = w0 * x_lazy[i0 * d + k];
                }
                for &(i, wij) in &in_weights[j][1..] {
                    for k in 0..d {
                        xl_next[k] += wij * x_lazy[i * d + k];
                    }
                }
                for k in 0..d {
                    xl_next[k] -= eta * gx[k];
                }
                x.copy_from_slice(xl_next);
                project_ball_in_place(x, rx);
            }
            for k in 0..d {
                yl[k] += eta * gy[k];
            }
            y.copy_from_slice(yl);
            project_ball_in_place(y, ry);
        };

        let chunks = (
            self.x_lazy_next.chunks_mut(d),
            self.x.chunks_mut(d),
            self.y_lazy.chunks_mut(d),
            self.y.chunks_mut(d),
            self.gx.chunks_mut(d),
        );
        if parallel {
            self.x_lazy_next
                .par_chunks_mut(d)
                .zip(self.x.par_chunks_mut(d))
                .zip(self.y_lazy.par_chunks_mut(d))
                .zip(self.y.par_chunks_mut(d))
                .zip(self.gx.par_chunks_mut(d))
                .enumerate()
                .for_each(|(j, ((((a, b), c), e), g))| update(j, a, b, c, e, g));
        } else {
            let (a, b, c, e, g) = chunks;
            for (j, ((((a, b), c), e), g)) in a.zip(b).zip(c).zip(e).zip(g).enumerate() {
                update(j, a, b, c, e, g);
            }
        }

        if mixing {
            std::mem::swap(&mut self.x_lazy, &mut self.x_lazy_next);
        } else {
            let n = self.n;
            let mut gbar = self.gx[..d].to_vec();
            for j in 1..n {
                for k in 0..d {
                    gbar[k] += self.gx[j * d + k];
                }
            }
            let mut xl = self.x_lazy[..d].to_vec();
            for k in 0..d {
                xl[k] -= eta * (gbar[k] / n as f64);
            }
            let mut xp = xl.clone();
            project_ball_in_place(&mut xp, rx);
            for j in 0..n {
                self.x_lazy[j * d..(j + 1) * d].copy_from_slice(&xl);
                self.x[j * d..(j + 1) * d].copy_from_slice(&xp);
            }
        }
    }
}

/// Runs an arbitrary round schedule. Rounds after the first restart at the
/// previous round's averages.
pub fn run_schedule(
    model: &SaddleModel,
    chain: &PolicyChain,
    features: &FeatureMap,
    coupling: PrimalCoupling<'_>,
    schedule: &[Round],
    seed: u64,
    options: &RunOptions,
) -> Result<RunTrace> {
    let n = model.n_agents();
    let d = model.dim();
    if features.dim() != d || features.n_states() != chain.n_states() {
        return Err(Error::Dimension(format!(
            "features are {}x{}, model has d = {d}, chain has {} states",
            features.n_states(),
            features.dim(),
            chain.n_states()
        )));
    }
    if chain.n_agents() != n {
        return Err(Error::Dimension(format!(
            "chain has {} agents, model has {n}",
            chain.n_agents()
        )));
    }
    let in_weights = match coupling {
        PrimalCoupling::Mixing(w) => {
            if w.n_nodes() != n {
                return Err(Error::Dimension(format!(
                    "mixing matrix has {} nodes, model has {n} agents",
                    w.n_nodes()
                )));
            }
            let m = w.matrix();
            (0..n)
                .map(|j| (0..n).filter(|&i| m[(i, j)] != 0.0).map(|i| (i, m[(i, j)])).collect())
                .collect()
        }
        PrimalCoupling::Centralized => Vec::new(),
    };
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty round schedule".into()));
    }
    if !(options.checkpoint_growth > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint growth must exceed 1, got {}",
            options.checkpoint_growth
        )));
    }
    let oracle = GapOracle::new(model)?;
    let mut sampler = chain.sampler(
        seed,
        TrajectoryOptions {
            initial: options.initial_state,
            noise: options.noise,
        },
    )?;
    let pool = if options.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let z = vec![0.0; n * d];
    let mut eng = Engine {
        model,
        features,
        coupling,
        in_weights,
        n,
        d,
        gamma: model.gamma(),
        rx: model.radius_x(),
        ry: model.radius_y(),
        x_lazy: z.clone(),
        x_lazy_next: z.clone(),
        x: z.clone(),
        y_lazy: z.clone(),
        y: z.clone(),
        gx: z.clone(),
        x_sum: z.clone(),
        y_sum: z.clone(),
        x_bar: vec![0.0; d],
        x_bar_sum: vec![0.0; d],
        dev_sum: vec![0.0; n],
        yq_sum: vec![0.0; n],
        count: 0,
    };

    let mut trace = RunTrace {
        rounds: Vec::new(),
        checkpoints: Vec::new(),
        samples: 0,
        iterate_logs: Vec::new(),
        final_states: Vec::new(),
        warnings: Vec::new(),
    };
    let mut next_checkpoint = 1usize;
    let mut x0 = z.clone();
    let mut y0 = z;
    let checkpoint = |eng: &Engine, samples: usize, round: usize| -> Checkpoint {
        let x_hat = eng.averages(&eng.x_sum);
        let y_hat = eng.averages(&eng.y_sum);
        let gaps = x_hat.iter().map(|x| oracle.gap(x)).collect();
        Checkpoint {
            samples,
            round,
            x_hat,
            y_hat,
            gaps,
        }
    };

    for (r, round) in schedule.iter().enumerate() {
        if round.horizon == 0 || !(round.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "round {} has horizon {} and step {}",
                r + 1,
                round.horizon,
                round.eta
            )));
        }
        eng.restart(&x0, &y0);
        let mut log = options.log_iterates.then(|| IterateLog {
            round: r + 1,
            n_agents: n,
            dim: d,
            x: Vec::with_capacity(round.horizon * n * d),
            y: Vec::with_capacity(round.horizon * n * d),
            x_bar: Vec::with_capacity(round.horizon * d),
        });
        let push_log = |log: &mut Option<IterateLog>, eng: &Engine| {
            if let Some(l) = log {
                l.x.extend_from_slice(&eng.x);
                l.y.extend_from_slice(&eng.y);
                l.x_bar.extend_from_slice(&eng.x_bar);
            }
        };
        push_log(&mut log, &eng);

        for _ in 1..round.horizon {
            let xi = sampler.next().expect("sampler is endless");
            match &pool {
                Some(p) => p.install(|| eng.step(xi.s, xi.s_next, &xi.local_rewards, round.eta, true)),
                None => eng.step(xi.s, xi.s_next, &xi.local_rewards, round.eta, false),
            }
            eng.accumulate();
            push_log(&mut log, &eng);
            trace.samples += 1;
            if trace.samples >= next_checkpoint {
                trace.checkpoints.push(checkpoint(&eng, trace.samples, r + 1));
                next_checkpoint = (trace.samples + 1)
                    .max((trace.samples as f64 * options.checkpoint_growth).ceil() as usize);
            }
        }
        if trace.samples > 0 && trace.checkpoints.last().map(|c| c.samples) != Some(trace.samples) {
            trace.checkpoints.push(checkpoint(&eng, trace.samples, r + 1));
        }

        let x_hat = eng.averages(&eng.x_sum);
        let y_hat = eng.averages(&eng.y_sum);
        let t = eng.count as f64;
        trace.rounds.push(RoundOutput {
            round: r + 1,
            eta: round.eta,
            horizon: round.horizon,
            samples: trace.samples,
            x_init: eng.agent_vecs(&x0),
            y_init: eng.agent_vecs(&y0),
            x_hat: x_hat.clone(),
            y_hat: y_hat.clone(),
            consensus_deviation: eng.dev_sum.iter().map(|v| v / t).collect(),
            dual_quadratic: eng.yq_sum.iter().map(|v| v / t).collect(),
            x_bar_mean: DVector::from_iterator(d, eng.x_bar_sum.iter().map(|v| v / t)),
        });
        if let Some(l) = log {
            trace.iterate_logs.push(l);
        }
        x0 = x_hat.iter().flat_map(|v| v.iter().copied()).collect();
        y0 = y_hat.iter().flat_map(|v| v.iter().copied()).collect();
    }

    trace.final_states = (0..n)
        .map(|j| {
            let sl = |b: &[f64]| DVector::from_column_slice(&b[j * d..(j + 1) * d]);
            AgentState {
                x_lazy: sl(&eng.x_lazy),
                x: sl(&eng.x),
                y_lazy: sl(&eng.y_lazy),
                y: sl(&eng.y),
                x_sum: sl(&eng.x_sum),
                y_sum: sl(&eng.y_sum),
            }
        })
        .collect();
    Ok(trace)
}

/// Lazy-projection loop `w <- w - eta g(t)`, `u <- P(w)` over the ball of
/// radius `radius`, starting from `u1`; returns the points `u(1..=T)` at
/// which each `g(t)` is evaluated.
pub fn lazy_projection_path(u1: &[f64], grads: &[Vec<f64>], eta: f64, radius: f64) -> Vec<Vec<f64>> {
    let mut w = u1.to_vec();
    let mut u = u1.to_vec();
    let mut out = Vec::with_capacity(grads.len());
    for g in grads {
        out.push(u.clone());
        for (wk, gk) in w.iter_mut().zip(g) {
            *wk -= eta * gk;
        }
        u.copy_from_slice(&w);
        project_ball_in_place(&mut u, radius);
    }
    out
}

/// `sum_t <g(t), u(t) - u*>` along a lazy-projection path.
pub fn lazy_projection_regret(path: &[Vec<f64>], grads: &[Vec<f64>], u_star: &[f64]) -> f64 {
    path.iter()
        .zip(grads)
        .map(|(u, g)| dot(g, u) - dot(g, u_star))
        .sum()
}

/// Right-hand side `||u1 - u*||^2 / (2 eta) + (eta/2) sum_t ||g(t)||^2`.
pub fn lazy_projection_bound(u1: &[f64], u_star: &[f64], grads: &[Vec<f64>], eta: f64) -> f64 {
    dist(u1, u_star).powi(2) / (2.0 * eta)
        + 0.5 * eta * grads.iter().map(|g| norm(g).powi(2)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let p = |v: &[f64]| project_ball(&DVector::from_column_slice(v), 5.0);
        assert_eq!(p(&[3.0, 4.0]).as_slice(), &[3.0, 4.0]);
        assert_eq!(p(&[6.0, 8.0]).as_slice(), &[3.0, 4.0]);
        assert_eq!(p(&[0.0, 0.0]).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn running_average_examples() {
        let v = DVector::from_vec(vec![2.0]);
        assert_eq!(running_average(&v, 2).unwrap()[0], 1.0);
        assert!(running_average(&v, 0).is_err());
    }

    #[test]
    fn schedule_is_exact() {
        let cfg = DhpdConfig {
            eta1: 0.1,
            t1: 512,
            rounds: 7,
            seed: 0,
        };
        assert_eq!(cfg.total_iterations(), 127 * 512);
        for k in 1..=7 {
            assert_eq!(cfg.step_size(k) * cfg.horizon(k) as f64, 0.1 * 512.0);
        }
        let bad = DhpdConfig { t1: 0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = RunTrace {
            rounds: vec![],
            checkpoints: vec![Checkpoint {
                samples: 3,
                round: 1,
                x_hat: vec![],
                y_hat: vec![],
                gaps: vec![0.5, 0.25],
            }],
            samples: 3,
            iterate_logs: vec![],
            final_states: vec![],
            warnings: vec![],
        };
        let rows = trace_from_csv(&trace.to_csv()).unwrap();
        assert_eq!(rows, vec![(3, 0, 0.5), (3, 1, 0.25)]);
    }
}
