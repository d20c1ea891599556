use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dhpd_cli::{
    cmd_compare, cmd_generate, cmd_run, cmd_verify, CliError, ExperimentConfig, Layout,
};

/// Distributed homotopy primal-dual policy evaluation experiments.
#[derive(Parser)]
#[command(name = "dhpd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the problem bundle.
    Generate(Common),
    /// Run the configured solver on an existing bundle.
    Run(Common),
    /// Align finished runs and plot their mean gaps.
    Compare(Common),
    /// Run the invariant suite; exits with 1 if any check fails.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file; repeat for `compare`. Defaults to the reference problem.
    #[arg(long, num_args = 1)]
    config: Vec<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both `problem.seed` and `solver.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn configs(&self) -> Result<Vec<ExperimentConfig>, CliError> {
        let mut cfgs = if self.config.is_empty() {
            vec![ExperimentConfig::reference()]
        } else {
            self.config
                .iter()
                .map(|p| ExperimentConfig::from_file(p))
                .collect::<Result<_, _>>()?
        };
        for c in &mut cfgs {
            if let Some(dir) = &self.out {
                c.output.directory = dir.clone();
            }
            if let Some(seed) = self.seed {
                c.problem.seed = seed;
                c.solver.seed = seed;
            }
        }
        Ok(cfgs)
    }

    fn single(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfgs = self.configs()?;
        if cfgs.len() != 1 {
            return Err(CliError::Usage("expected exactly one --config".into()));
        }
        Ok(cfgs.remove(0))
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.single()?;
            let m = cmd_generate(&cfg)?;
            println!("wrote {}", Layout::new(&cfg).bundle().display());
            for key in ["sigma2", "rho_cert", "rho_y", "g", "l", "tau", "t1"] {
                println!("  {key} = {}", m.get(key).unwrap_or("?"));
            }
        }
        Command::Run(c) => {
            let cfg = c.single()?;
            let s = cmd_run(&cfg)?;
            println!("wrote {}", s.dir.display());
            for w in &s.trace.warnings {
                println!("  warning: {w}");
            }
            if let Some(g) = s.meta.get("final_mean_gap") {
                println!("  samples = {}, final mean gap = {g}", s.trace.samples);
            }
        }
        Command::Compare(c) => {
            let cfgs = c.configs()?;
            let out = cfgs[0].output.directory.clone();
            let cmp = cmd_compare(&cfgs, &out)?;
            println!("wrote {}", Layout::new(&cfgs[0]).compare_dir().display());
            for (label, curve) in cmp.labels.iter().zip(&cmp.curves) {
                println!("  {label}: final mean gap {:e}", curve.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::Verify(c) => {
            let cfg = c.single()?;
            let dir = Layout::new(&cfg).verify_dir();
            match cmd_verify(&cfg) {
                Ok(rows) => println!("{} checks passed; report in {}", rows.len(), dir.display()),
                Err(e @ CliError::ChecksFailed { .. }) => {
                    eprintln!("report in {}", dir.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
