//! The four subcommands and the on-disk layout they share.
//!
//! ```text
//! <out>/bundle/         chain, features, model, graph, W, manifest.txt
//! <out>/runs/<name>/    trace.csv, meta.txt
//! <out>/compare/        compare.csv, compare.svg
//! <out>/verify/         report.csv, report.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dhpd_core::analysis::{
    check_fenchel, check_gradients, report_csv, report_text, verify_checkpoints, verify_lemma1,
    verify_lemma2, verify_lemma3, verify_lemma6, verify_mixing_time, verify_schedule, CheckRow,
    GapOracle,
};
use dhpd_core::chain::{random_ergodic_chain, MixingEstimate, PolicyChain};
use dhpd_core::features::{FeatureBounds, FeatureMap};
use dhpd_core::io::{fmt_real, KeyValues};
use dhpd_core::network::{laplacian_mixing, Graph, MixingMatrix};
use dhpd_core::objective::{population_model, ProblemConstants, RadiiPolicy, SaddleModel};
use dhpd_core::solver::{
    dhpd_run, spd_run_centralized, spd_run_distributed, trace_from_csv, DhpdConfig, RunOptions,
    RunTrace,
};
use thiserror::Error;

use crate::config::{Algorithm, Auto, ConfigError, ExperimentConfig, FeatureKind, TopologyKind};
use crate::plot::{loglog_svg, Series};

/// `T1` floor of the automatic schedule.
pub const AUTO_T1_FLOOR: usize = 512;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: dhpd_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for dhpd_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths below one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output.directory.clone(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle")
    }

    pub fn manifest(&self) -> PathBuf {
        self.bundle().join("manifest.txt")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }

    pub fn verify_dir(&self) -> PathBuf {
        self.root.join("verify")
    }
}

/// Everything a run needs, either freshly generated or read from a bundle.
#[derive(Debug, Clone)]
pub struct Problem {
    pub signature: String,
    pub chain: PolicyChain,
    pub features: FeatureMap,
    pub model: SaddleModel,
    pub graph: Graph,
    pub w: MixingMatrix,
    pub mixing: MixingEstimate,
    pub bounds: FeatureBounds,
    pub constants: ProblemConstants,
}

/// Resolved step sizes and horizons for one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub dhpd: DhpdConfig,
    /// Mixing time at accuracy `1 / T`, `T = (2^K - 1) T1`.
    pub tau: usize,
    /// Horizon of the fixed-step baselines.
    pub spd_horizon: usize,
}

impl Problem {
    /// Chain from `problem.seed`, features from `problem.seed + 1000` and
    /// the graph from `problem.seed + 2000`.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let pr = &cfg.problem;
        let chain = random_ergodic_chain(pr.n_states, pr.n_agents, pr.branching, pr.gamma, pr.seed)
            .context(|| "generating the chain".into())?;
        let features = match pr.features {
            FeatureKind::Random => FeatureMap::random(pr.n_states, pr.d, pr.seed.wrapping_add(1000)),
            FeatureKind::Tabular => FeatureMap::tabular(pr.n_states),
        }
        .context(|| "generating features".into())?;
        let model = population_model(&chain, &features, RadiiPolicy::Auto)
            .context(|| "building the population model".into())?;
        let n = pr.n_agents;
        let graph = match cfg.topology.kind {
            TopologyKind::Ring => Graph::ring(n),
            TopologyKind::Complete => Graph::complete(n),
            TopologyKind::ErdosRenyi => Graph::erdos_renyi(n, cfg.topology.p, pr.seed.wrapping_add(2000)),
        }
        .context(|| "generating the graph".into())?;
        let w = laplacian_mixing(&graph).context(|| "building the mixing matrix".into())?;
        let mixing = chain.estimate_mixing().context(|| "fitting the mixing envelope".into())?;
        Self::assemble(cfg.problem_signature(), chain, features, model, graph, w, mixing)
    }

    fn assemble(
        signature: String,
        chain: PolicyChain,
        features: FeatureMap,
        model: SaddleModel,
        graph: Graph,
        w: MixingMatrix,
        mixing: MixingEstimate,
    ) -> Result<Self> {
        let bounds = features.bounds(&chain).context(|| "feature bounds".into())?;
        let constants = model.constants(&bounds);
        Ok(Self {
            signature,
            chain,
            features,
            model,
            graph,
            w,
            mixing,
            bounds,
            constants,
        })
    }

    /// Reads a bundle written by [`cmd_generate`].
    pub fn load(bundle: &Path) -> Result<Self> {
        let at = |f: &str| bundle.join(f);
        let ctx = |what: &str| {
            let msg = format!("reading {} from {}", what, bundle.display());
            move || msg
        };
        let manifest = KeyValues::read(&at("manifest.txt")).context(ctx("manifest"))?;
        let chain = PolicyChain::read_csv(bundle).context(ctx("chain"))?;
        let features = FeatureMap::read_csv(&at("phi.csv")).context(ctx("features"))?;
        let model = SaddleModel::read_bundle(bundle).context(ctx("model"))?;
        let graph = Graph::read_edge_list(&at("graph.txt")).context(ctx("graph"))?;
        let w = MixingMatrix::read_csv(&at("W.csv")).context(ctx("mixing matrix"))?;
        let mixing = MixingEstimate {
            gamma: manifest.require_real("mixing_gamma").context(ctx("manifest"))?,
            rho: manifest.require_real("mixing_rho").context(ctx("manifest"))?,
            curve: Vec::new(),
            one_step: manifest.require("one_step").context(ctx("manifest"))? == "true",
        };
        let signature = manifest.require("problem").context(ctx("manifest"))?.to_string();
        Self::assemble(signature, chain, features, model, graph, w, mixing)
    }

    /// Resolves `auto` entries. An automatic `T1` starts at 512 and is raised
    /// to the mixing time until `T1 >= tau(1/T)`.
    pub fn schedule(&self, cfg: &ExperimentConfig) -> Result<Schedule> {
        let s = &cfg.solver;
        let span = (1usize << s.rounds) - 1;
        let tau_at = |t1: usize| {
            self.mixing
                .mixing_time(1.0 / (span * t1) as f64)
                .context(|| "mixing time".into())
        };
        let (t1, tau) = match s.t1 {
            Auto::Fixed(t1) => (t1, tau_at(t1)?),
            Auto::Auto => {
                let mut t1 = AUTO_T1_FLOOR;
                loop {
                    let tau = tau_at(t1)?;
                    if tau <= t1 {
                        break (t1, tau);
                    }
                    t1 = tau;
                }
            }
        };
        let dhpd = DhpdConfig {
            eta1: s.eta1,
            t1,
            rounds: s.rounds,
            seed: s.seed,
        };
        dhpd.validate().context(|| "solver schedule".into())?;
        let spd_horizon = match s.horizon {
            Auto::Auto => dhpd.total_samples() + 1,
            Auto::Fixed(h) => h,
        };
        Ok(Schedule {
            dhpd,
            tau,
            spd_horizon,
        })
    }

    pub fn manifest(&self, schedule: &Schedule) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("problem", &self.signature);
        kv.push("n_states", self.chain.n_states());
        kv.push("n_agents", self.chain.n_agents());
        kv.push("d", self.features.dim());
        let pi = self
            .chain
            .stationary_distribution()
            .map(|p| p.iter().map(|v| fmt_real(*v)).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        kv.push("pi", pi);
        kv.push_real("sigma2", self.w.sigma2());
        kv.push_real("spectral_gap", self.w.spectral_gap());
        kv.push_real("rho_cert", self.constants.rho_cert);
        kv.push_real("rho_y", self.constants.rho_y);
        kv.push_real("rho_x", self.constants.rho_x);
        kv.push_real("g", self.constants.g);
        kv.push_real("l", self.constants.l);
        kv.push_real("beta0", self.bounds.beta0);
        kv.push_real("beta1", self.bounds.beta1);
        kv.push_real("beta2", self.bounds.beta2);
        kv.push_real("radius_x", self.model.radius_x());
        kv.push_real("radius_y", self.model.radius_y());
        kv.push_real("mixing_gamma", self.mixing.gamma);
        kv.push_real("mixing_rho", self.mixing.rho);
        kv.push("one_step", self.mixing.one_step);
        kv.push("t1", schedule.dhpd.t1);
        kv.push("rounds", schedule.dhpd.rounds);
        kv.push("tau", schedule.tau);
        kv
    }

    /// Runs the configured algorithm.
    pub fn execute(&self, cfg: &ExperimentConfig, schedule: &Schedule) -> Result<RunTrace> {
        let opts = run_options(cfg, schedule);
        let s = &cfg.solver;
        match s.algorithm {
            Algorithm::Dhpd => dhpd_run(
                &self.model,
                &self.chain,
                &self.features,
                &self.w,
                &schedule.dhpd,
                &opts,
            ),
            Algorithm::SpdDist => spd_run_distributed(
                &self.model,
                &self.chain,
                &self.features,
                &self.w,
                s.eta,
                schedule.spd_horizon,
                s.seed,
                &opts,
            ),
            Algorithm::SpdCentral => spd_run_centralized(
                &self.model,
                &self.chain,
                &self.features,
                s.eta,
                schedule.spd_horizon,
                s.seed,
                &opts,
            ),
        }
        .context(|| format!("running {}", s.algorithm))
    }
}

pub fn run_options(cfg: &ExperimentConfig, schedule: &Schedule) -> RunOptions {
    RunOptions {
        checkpoint_growth: cfg.output.checkpoint_growth,
        threads: cfg.solver.threads,
        tau: Some(schedule.tau),
        ..Default::default()
    }
}

/// Writes the problem bundle and returns its manifest.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<KeyValues> {
    let layout = Layout::new(cfg);
    let dir = layout.bundle();
    create_dir(&dir)?;
    let problem = Problem::generate(cfg)?;
    let schedule = problem.schedule(cfg)?;
    let ctx = || format!("writing bundle to {}", dir.display());
    problem.chain.write_csv(&dir).context(ctx)?;
    problem.features.write_csv(&dir.join("phi.csv")).context(ctx)?;
    problem.model.write_bundle(&dir).context(ctx)?;
    problem.graph.write_edge_list(&dir.join("graph.txt")).context(ctx)?;
    problem.w.write_csv(&dir.join("W.csv")).context(ctx)?;
    let manifest = problem.manifest(&schedule);
    write_file(&layout.manifest(), manifest.render())?;
    Ok(manifest)
}

/// Output of [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub trace: RunTrace,
    pub meta: KeyValues,
}

fn load_checked(cfg: &ExperimentConfig) -> Result<Problem> {
    let layout = Layout::new(cfg);
    if !layout.manifest().exists() {
        return Err(CliError::Mismatch(format!(
            "no problem bundle at {}; run `generate` first",
            layout.bundle().display()
        )));
    }
    let problem = Problem::load(&layout.bundle())?;
    if problem.signature != cfg.problem_signature() {
        return Err(CliError::Mismatch(format!(
            "bundle at {} was generated for a different problem",
            layout.bundle().display()
        )));
    }
    Ok(problem)
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let problem = load_checked(cfg)?;
    let schedule = problem.schedule(cfg)?;
    let trace = problem.execute(cfg, &schedule)?;
    let s = &cfg.solver;
    let mut meta = KeyValues::new();
    meta.push("problem", &problem.signature);
    meta.push("algorithm", s.algorithm);
    meta.push("seed", s.seed);
    match s.algorithm {
        Algorithm::Dhpd => {
            meta.push_real("eta1", schedule.dhpd.eta1);
            meta.push("t1", schedule.dhpd.t1);
            meta.push("rounds", schedule.dhpd.rounds);
        }
        Algorithm::SpdDist | Algorithm::SpdCentral => {
            meta.push_real("eta", s.eta);
            meta.push("horizon", schedule.spd_horizon);
        }
    }
    meta.push("tau", schedule.tau);
    meta.push("samples", trace.samples);
    meta.push("checkpoints", trace.checkpoints.len());
    if let Some(last) = trace.checkpoints.last() {
        meta.push_real("final_mean_gap", last.mean_gap());
    }
    for (i, w) in trace.warnings.iter().enumerate() {
        meta.push(&format!("warning_{}", i + 1), w);
    }
    let dir = Layout::new(cfg).run_dir(&cfg.run_name());
    create_dir(&dir)?;
    write_file(&dir.join("trace.csv"), trace.to_csv())?;
    write_file(&dir.join("meta.txt"), meta.render())?;
    Ok(RunSummary { dir, trace, meta })
}

/// Mean-gap curves of several runs on their shared sample grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub grid: Vec<usize>,
    /// `curves[r][i]` is run `r`'s mean gap at `grid[i]`.
    pub curves: Vec<Vec<f64>>,
}

impl Comparison {
    /// `run,samples,mean_gap`, run-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,samples,mean_gap\n");
        for (label, curve) in self.labels.iter().zip(&self.curves) {
            for (s, g) in self.grid.iter().zip(curve) {
                out.push_str(&format!("{label},{s},{}\n", fmt_real(*g)));
            }
        }
        out
    }
}

fn mean_gaps(rows: &[(usize, usize, f64)]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (s, _, g) in rows {
        let e = acc.entry(*s).or_insert((0.0, 0));
        e.0 += g;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

/// Aligns finished runs and writes `compare.csv` and `compare.svg` under
/// `<out>/compare`.
pub fn cmd_compare(cfgs: &[ExperimentConfig], out: &Path) -> Result<Comparison> {
    if cfgs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configurations".into()));
    }
    let mut labels = Vec::new();
    let mut maps = Vec::new();
    let mut problem: Option<String> = None;
    for cfg in cfgs {
        let name = cfg.run_name();
        let dir = Layout::new(cfg).run_dir(&name);
        let meta = KeyValues::parse(&read_file(&dir.join("meta.txt"))?)
            .context(|| format!("parsing {}", dir.join("meta.txt").display()))?;
        let p = meta
            .require("problem")
            .context(|| format!("reading {}", dir.display()))?
            .to_string();
        match &problem {
            None => problem = Some(p),
            Some(first) if *first != p => {
                return Err(CliError::Mismatch(format!(
                    "run {name} was produced on a different problem than {}",
                    labels[0]
                )))
            }
            Some(_) => {}
        }
        let rows = trace_from_csv(&read_file(&dir.join("trace.csv"))?)
            .context(|| format!("parsing {}", dir.join("trace.csv").display()))?;
        let mut label = name.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{name}-{k}");
            k += 1;
        }
        labels.push(label);
        maps.push(mean_gaps(&rows));
    }
    let grid: Vec<usize> = maps[0]
        .keys()
        .copied()
        .filter(|s| maps[1..].iter().all(|m| m.contains_key(s)))
        .collect();
    if grid.is_empty() {
        return Err(CliError::Mismatch("runs share no checkpoint".into()));
    }
    let curves: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| grid.iter().map(|s| m[s]).collect())
        .collect();
    let cmp = Comparison {
        labels,
        grid,
        curves,
    };
    let dir = out.join("compare");
    create_dir(&dir)?;
    write_file(&dir.join("compare.csv"), cmp.to_csv())?;
    let series: Vec<Series> = cmp
        .labels
        .iter()
        .zip(&cmp.curves)
        .map(|(l, c)| Series {
            label: l.clone(),
            points: cmp.grid.iter().zip(c).map(|(s, g)| (*s as f64, *g)).collect(),
        })
        .collect();
    write_file(
        &dir.join("compare.svg"),
        loglog_svg("Mean optimality gap", "samples", "mean gap", &series),
    )?;
    Ok(cmp)
}

/// Number of Monte-Carlo trials per horizon of the martingale check.
const MARTINGALE_TRIALS: usize = 1000;

/// Runs every check on the bundle, writes `report.csv` and `report.txt`,
/// and fails if any check fails.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let problem = load_checked(cfg)?;
    let rows = verification_rows(&problem, cfg)?;
    let dir = Layout::new(cfg).verify_dir();
    create_dir(&dir)?;
    write_file(&dir.join("report.csv"), report_csv(&rows))?;
    write_file(&dir.join("report.txt"), report_text(&rows))?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: rows.len(),
        });
    }
    Ok(rows)
}

/// The full invariant suite on one problem; the restart schedule is run
/// regardless of `solver.algorithm`.
pub fn verification_rows(problem: &Problem, cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let seed = cfg.solver.seed;
    let model = &problem.model;
    let mut rows = check_fenchel(model, 200, 1e-8, seed);
    rows.extend(check_gradients(model, 100, 1e-6, 1e-5, seed));
    rows.extend(verify_lemma2(100, seed));
    for t in [10, 100, 1000] {
        let rep = verify_lemma3(1.0, t, MARTINGALE_TRIALS, seed.wrapping_add(t as u64))
            .context(|| "martingale check".into())?;
        rows.push(CheckRow {
            check: "lemma3_martingale".into(),
            round: None,
            agent: Some(t),
            lhs: rep.estimate,
            rhs: rep.tolerance_bound,
            pass: rep.pass,
        });
    }

    let schedule = problem.schedule(cfg)?;
    let trace = dhpd_run(
        model,
        &problem.chain,
        &problem.features,
        &problem.w,
        &schedule.dhpd,
        &run_options(cfg, &schedule),
    )
    .context(|| "running the restart schedule".into())?;
    let oracle = GapOracle::new(model).context(|| "gap oracle".into())?;
    let g = problem.constants.g;
    rows.extend(verify_checkpoints(
        &oracle,
        &trace,
        problem.constants.rho_cert,
        problem.constants.rho_y,
    ));
    rows.extend(verify_lemma1(&trace, g, problem.w.sigma2()));
    rows.extend(verify_lemma6(&oracle, &trace, g));
    rows.extend(verify_schedule(&trace));
    let iterations: usize = trace.rounds.iter().map(|r| r.horizon).sum();
    rows.push(CheckRow::within(
        "total_iterations",
        None,
        None,
        (iterations as f64 - schedule.dhpd.total_iterations() as f64).abs(),
        0.0,
    ));
    let eps = 1.0 / schedule.dhpd.total_iterations() as f64;
    rows.push(verify_mixing_time(&problem.chain, &problem.mixing, eps).context(|| "mixing time".into())?);
    Ok(rows)
}
