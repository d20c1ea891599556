//! Experiment configuration: flat `section.key = value` lines.
//!
//! Every key has a default (the desk-scale reference problem), unknown and
//! repeated keys are rejected, and [`ExperimentConfig::render`] writes every
//! key so that parsing the result gives back the same configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` is repeated")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: `{key}`: {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Random,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Ring,
    Complete,
    ErdosRenyi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Dhpd,
    SpdCentral,
    SpdDist,
}

/// A count that may be derived from the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Auto {
    Auto,
    Fixed(usize),
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of {}", [$($name),+].join(", "))),
                }
            }
        }
    };
}

keyword_enum!(FeatureKind { "random" => FeatureKind::Random, "tabular" => FeatureKind::Tabular });
keyword_enum!(TopologyKind {
    "ring" => TopologyKind::Ring,
    "complete" => TopologyKind::Complete,
    "erdos_renyi" => TopologyKind::ErdosRenyi,
});
keyword_enum!(Algorithm {
    "dhpd" => Algorithm::Dhpd,
    "spd_central" => Algorithm::SpdCentral,
    "spd_dist" => Algorithm::SpdDist,
});

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Auto::Auto => f.write_str("auto"),
            Auto::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Auto {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Auto::Auto);
        }
        s.parse()
            .map(Auto::Fixed)
            .map_err(|_| "expected `auto` or a nonnegative integer".to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub n_states: usize,
    pub n_agents: usize,
    pub d: usize,
    pub gamma: f64,
    pub branching: usize,
    pub features: FeatureKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSection {
    pub algorithm: Algorithm,
    /// Initial step of the restart schedule.
    pub eta1: f64,
    /// Fixed step of the SPD baselines.
    pub eta: f64,
    /// `auto`: `max(tau, 512)` with `tau` taken at accuracy `1/T`.
    pub t1: Auto,
    pub rounds: usize,
    /// SPD horizon; `auto` matches the sample budget of the restart schedule.
    pub horizon: Auto,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Subdirectory of `runs/`; empty means the algorithm name.
    pub run_name: String,
    pub checkpoint_growth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub topology: TopologySection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

const KEYS: [&str; 20] = [
    "problem.n_states",
    "problem.n_agents",
    "problem.d",
    "problem.gamma",
    "problem.branching",
    "problem.features",
    "problem.seed",
    "topology.kind",
    "topology.p",
    "solver.algorithm",
    "solver.eta1",
    "solver.eta",
    "solver.t1",
    "solver.rounds",
    "solver.horizon",
    "solver.seed",
    "solver.threads",
    "output.directory",
    "output.run_name",
    "output.checkpoint_growth",
];

impl ExperimentConfig {
    /// Desk-scale reference problem: 50 states, 10 agents, 8 features,
    /// discount 0.95, Erdos-Renyi graph with `p = 0.3`, `eta1 = 0.1`,
    /// automatic `T1`, seven rounds.
    pub fn reference() -> Self {
        Self {
            problem: ProblemSection {
                n_states: 50,
                n_agents: 10,
                d: 8,
                gamma: 0.95,
                branching: 3,
                features: FeatureKind::Random,
                seed: 1,
            },
            topology: TopologySection {
                kind: TopologyKind::ErdosRenyi,
                p: 0.3,
            },
            solver: SolverSection {
                algorithm: Algorithm::Dhpd,
                eta1: 0.1,
                eta: 0.1,
                t1: Auto::Auto,
                rounds: 7,
                horizon: Auto::Auto,
                seed: 0,
                threads: 1,
            },
            output: OutputSection {
                directory: PathBuf::from("out"),
                run_name: String::new(),
                checkpoint_growth: 1.1,
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::reference();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `section.key = value`, found {body:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })?;
            if seen.contains(known) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            cfg.set(key, value).map_err(|message| ConfigError::Value {
                line,
                key: key.to_string(),
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
        }
        match key {
            "problem.n_states" => self.problem.n_states = p(value)?,
            "problem.n_agents" => self.problem.n_agents = p(value)?,
            "problem.d" => self.problem.d = p(value)?,
            "problem.gamma" => self.problem.gamma = p(value)?,
            "problem.branching" => self.problem.branching = p(value)?,
            "problem.features" => self.problem.features = p(value)?,
            "problem.seed" => self.problem.seed = p(value)?,
            "topology.kind" => self.topology.kind = p(value)?,
            "topology.p" => self.topology.p = p(value)?,
            "solver.algorithm" => self.solver.algorithm = p(value)?,
            "solver.eta1" => self.solver.eta1 = p(value)?,
            "solver.eta" => self.solver.eta = p(value)?,
            "solver.t1" => self.solver.t1 = p(value)?,
            "solver.rounds" => self.solver.rounds = p(value)?,
            "solver.horizon" => self.solver.horizon = p(value)?,
            "solver.seed" => self.solver.seed = p(value)?,
            "solver.threads" => self.solver.threads = p(value)?,
            "output.directory" => self.output.directory = PathBuf::from(value),
            "output.run_name" => self.output.run_name = value.to_string(),
            "output.checkpoint_growth" => self.output.checkpoint_growth = p(value)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let pr = &self.problem;
        if pr.n_states == 0 || pr.n_agents == 0 || pr.d == 0 {
            return bad("n_states, n_agents and d must be positive".into());
        }
        if pr.d > pr.n_states {
            return bad(format!("d = {} exceeds n_states = {}", pr.d, pr.n_states));
        }
        if pr.features == FeatureKind::Tabular && pr.d != pr.n_states {
            return bad("tabular features need d = n_states".into());
        }
        if !(pr.gamma > 0.0 && pr.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", pr.gamma));
        }
        if pr.branching == 0 || pr.branching > pr.n_states {
            return bad(format!(
                "branching must lie in 1..={}, got {}",
                pr.n_states, pr.branching
            ));
        }
        if !(self.topology.p > 0.0 && self.topology.p <= 1.0) {
            return bad(format!("topology.p must lie in (0, 1], got {}", self.topology.p));
        }
        let s = &self.solver;
        if !(s.eta1 > 0.0 && s.eta1.is_finite() && s.eta > 0.0 && s.eta.is_finite()) {
            return bad("step sizes must be positive and finite".into());
        }
        if s.rounds == 0 || s.rounds > 40 {
            return bad(format!("rounds must lie in 1..=40, got {}", s.rounds));
        }
        if s.t1 == Auto::Fixed(0) || s.horizon == Auto::Fixed(0) {
            return bad("t1 and horizon must be positive".into());
        }
        if s.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if !(self.output.checkpoint_growth > 1.0 && self.output.checkpoint_growth.is_finite()) {
            return bad("checkpoint_growth must exceed 1".into());
        }
        if !self
            .output
            .run_name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad(format!(
                "run_name {:?} may only contain letters, digits, `_` and `-`",
                self.output.run_name
            ));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let pr = &self.problem;
        let s = &self.solver;
        let values: Vec<String> = vec![
            pr.n_states.to_string(),
            pr.n_agents.to_string(),
            pr.d.to_string(),
            pr.gamma.to_string(),
            pr.branching.to_string(),
            pr.features.to_string(),
            pr.seed.to_string(),
            self.topology.kind.to_string(),
            self.topology.p.to_string(),
            s.algorithm.to_string(),
            s.eta1.to_string(),
            s.eta.to_string(),
            s.t1.to_string(),
            s.rounds.to_string(),
            s.horizon.to_string(),
            s.seed.to_string(),
            s.threads.to_string(),
            self.output.directory.display().to_string(),
            self.output.run_name.clone(),
            self.output.checkpoint_growth.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Problem and topology keys only; two runs are comparable when these agree.
    pub fn problem_signature(&self) -> String {
        self.render()
            .lines()
            .filter(|l| l.starts_with("problem.") || l.starts_with("topology."))
            .map(|l| l.replace(' ', ""))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn run_name(&self) -> String {
        if self.output.run_name.is_empty() {
            self.solver.algorithm.to_string()
        } else {
            self.output.run_name.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips() {
        let cfg = ExperimentConfig::reference();
        let text = cfg.render();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("solver.t1 = auto\n"));
        assert_eq!(text.lines().count(), 20);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "# comment\n\nproblem.gamma = 0.3333333333333333\nsolver.t1 = 64\nsolver.algorithm = spd_dist\noutput.run_name = a-b_1\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.problem.gamma, 1.0 / 3.0);
        assert_eq!(cfg.solver.t1, Auto::Fixed(64));
        assert_eq!(cfg.run_name(), "a-b_1");
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
        let again = ExperimentConfig::parse(&cfg.render()).unwrap().render();
        assert_eq!(again, cfg.render());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("problem.d = 4\n\nproblem.colour = red\n").unwrap_err();
        assert_eq!(err.to_string(), "line 3: unknown key `problem.colour`");
        let err = ExperimentConfig::parse("solver.rounds = many").unwrap_err();
        assert!(err.to_string().starts_with("line 1: `solver.rounds`"), "{err}");
        let err = ExperimentConfig::parse("problem.d = 4\nproblem.d = 5").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { line: 2, .. }));
        let err = ExperimentConfig::parse("x\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = ExperimentConfig::parse("topology.kind = star").unwrap_err();
        assert!(err.to_string().contains("ring, complete, erdos_renyi"));
    }

    #[test]
    fn cross_field_rules() {
        for text in [
            "problem.d = 60",
            "problem.features = tabular",
            "problem.gamma = 1",
            "problem.branching = 0",
            "topology.p = 0",
            "solver.eta1 = -1",
            "solver.t1 = 0",
            "solver.threads = 0",
            "output.checkpoint_growth = 1",
            "output.run_name = ../escape",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(ConfigError::Invalid(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn signature_ignores_solver_and_output() {
        let a = ExperimentConfig::reference();
        let mut b = a.clone();
        b.solver.algorithm = Algorithm::SpdCentral;
        b.output.directory = PathBuf::from("elsewhere");
        assert_eq!(a.problem_signature(), b.problem_signature());
        b.problem.seed = 2;
        assert_ne!(a.problem_signature(), b.problem_signature());
    }
}
