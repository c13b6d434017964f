//! Command-line entry point.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use minfo_cli::commands::{self, CmdOutput, SolverFlags};
use minfo_cli::CliError;

/// Minimum-information reactive policies for finite POMDPs.
#[derive(Debug, Parser)]
#[command(name = "minfo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Charge for clock information (the price of periodicity).
    #[arg(long = "clock-cost", value_name = "BOOL", default_value_t = true, action = ArgAction::Set)]
    clock_cost: bool,
    /// Cap on the representable policy period.
    #[arg(long = "max-period", value_name = "N", default_value_t = 16)]
    max_period: usize,
    /// Seed for the symmetry-breaking perturbation and the rollout sampler.
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    seed: u64,
    /// Magnitude of the seeded perturbation of the initial policy.
    #[arg(long, value_name = "SCALE", default_value_t = 1e-3)]
    perturbation: f64,
    /// Threshold on the free-energy change per outer iteration.
    #[arg(long = "tol-fe", value_name = "TOL", default_value_t = 1e-9)]
    tol_fe: f64,
    /// Threshold for cycle closure and per-iteration policy drift.
    #[arg(long = "tol-cycle", value_name = "TOL", default_value_t = 1e-8)]
    tol_cycle: f64,
    /// Cap on outer iterations per solve stage.
    #[arg(long = "max-iterations", value_name = "N", default_value_t = 10_000)]
    max_iterations: usize,
}

impl SolverArgs {
    fn flags(&self) -> SolverFlags {
        SolverFlags {
            clock_cost: self.clock_cost,
            max_period: self.max_period,
            seed: self.seed,
            perturbation: self.perturbation,
            tol_fe: self.tol_fe,
            tol_cycle: self.tol_cycle,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one model at one rate; writes report.json and policy.json.
    /// Exits 0 only when the solve converged.
    Solve {
        /// Model file, or builtin:two-state / builtin:robot.
        #[arg(long, value_name = "PATH|builtin:NAME")]
        model: String,
        /// Trade-off rate between information and external cost.
        #[arg(long, value_name = "RATE", allow_negative_numbers = true)]
        beta: f64,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Solve across a log-spaced rate grid; writes sweep.csv and
    /// bifurcations.csv. Unconverged points land in the CSV, not the exit
    /// status.
    Sweep {
        /// Model file, or builtin:two-state / builtin:robot.
        #[arg(long, value_name = "PATH|builtin:NAME")]
        model: String,
        /// Smallest rate of the grid.
        #[arg(long = "beta-min", value_name = "RATE", allow_negative_numbers = true)]
        beta_min: f64,
        /// Largest rate of the grid.
        #[arg(long = "beta-max", value_name = "RATE", allow_negative_numbers = true)]
        beta_max: f64,
        /// Number of grid points.
        #[arg(long = "beta-steps", value_name = "N")]
        beta_steps: usize,
        /// Carry each converged policy to the next grid point (default).
        #[arg(long, conflicts_with = "cold")]
        warm: bool,
        /// Restart every grid point from a perturbed uniform policy.
        #[arg(long)]
        cold: bool,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Flatten a retentive (memory) agent into its two-phase model and
    /// check the construction reproduces the agent's behavior; writes
    /// reduced.json and equivalence.json.
    Reduce {
        /// Retentive setup file.
        #[arg(long, value_name = "PATH")]
        setup: PathBuf,
        /// Charge this cost to out-of-phase actions instead of masking them.
        #[arg(long, value_name = "COST", allow_negative_numbers = true)]
        penalty: Option<f64>,
        /// Deviation bound for the equivalence check.
        #[arg(long, value_name = "TOL", default_value_t = 1e-9)]
        tolerance: f64,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Monte Carlo rollout of a policy; writes rollout.json.
    Simulate {
        /// Model file, or builtin:two-state / builtin:robot.
        #[arg(long, value_name = "PATH|builtin:NAME")]
        model: String,
        /// Policy file; when absent the model is solved at --beta first.
        #[arg(long, value_name = "PATH")]
        policy: Option<PathBuf>,
        /// Trade-off rate for the solve (and the value tables).
        #[arg(long, value_name = "RATE", allow_negative_numbers = true)]
        beta: Option<f64>,
        /// Steps to collect after burn-in.
        #[arg(long, value_name = "N", default_value_t = 100_000)]
        steps: usize,
        /// Steps to discard before collecting.
        #[arg(long = "burn-in", value_name = "N", default_value_t = 0)]
        burn_in: usize,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Write a builtin example model as a JSON file named after it.
    Example {
        /// two-state or robot.
        name: String,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<CmdOutput, CliError> {
    match cli.command {
        Command::Solve {
            model,
            beta,
            solver,
            out,
        } => commands::cmd_solve(&model, beta, &solver.flags(), &out),
        Command::Sweep {
            model,
            beta_min,
            beta_max,
            beta_steps,
            warm: _,
            cold,
            solver,
            out,
        } => commands::cmd_sweep(
            &model,
            beta_min,
            beta_max,
            beta_steps,
            cold,
            &solver.flags(),
            &out,
        ),
        Command::Reduce {
            setup,
            penalty,
            tolerance,
            out,
        } => commands::cmd_reduce(&setup, penalty, tolerance, &out),
        Command::Simulate {
            model,
            policy,
            beta,
            steps,
            burn_in,
            solver,
            out,
        } => commands::cmd_simulate(
            &model,
            policy.as_deref(),
            beta,
            steps,
            burn_in,
            &solver.flags(),
            &out,
        ),
        Command::Example { name, out } => commands::cmd_example(&name, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(output) => {
            print!("{}", output.summary);
            if let Some(failure) = output.failure {
                eprintln!("{failure}");
                std::process::exit(3);
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
