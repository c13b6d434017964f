//! The five commands behind the binary: solve, sweep, reduce, simulate,
//! and example.

use std::fs;
use std::path::Path;

use minfo_core::info::marginal_policy;
use minfo_core::model::{
    compute_beliefs, stationary_phase_distributions, PhasedPomdp, ReactivePolicy, STATIONARY_TOL,
};
use minfo_core::models::{robot, two_state};
use minfo_core::reduction::{build_reduced_pomdp, build_reduced_pomdp_with_penalty};
use minfo_core::sim::{crosscheck, rollout, SimError};
use minfo_core::solver::{
    evaluate_values, solve, SolverError, SolverOptions, SolverState, Solution,
};
use minfo_core::sweep::{detect_bifurcations, log_grid, sweep, SweepMode};

use crate::formats::{
    bifurcations_csv, doc_from_periodic, doc_from_stationary, equivalence_doc, failure_string,
    model_from_doc, policy_doc, policy_from_doc, read_json, report_doc, setup_from_doc,
    simulation_doc, sweep_csv, write_json, LoadedModel, ModelDoc, PolicyDoc, SetupDoc,
};
use crate::CliError;

/// Names accepted by `example` and by `--model builtin:<name>`.
pub const BUILTIN_NAMES: [&str; 2] = ["two-state", "robot"];

/// Solver knobs shared by the solving commands.
#[derive(Debug, Clone)]
pub struct SolverFlags {
    /// Charge for clock information.
    pub clock_cost: bool,
    /// Cap on the representable policy period.
    pub max_period: usize,
    /// Seed for perturbation noise and rollout sampling.
    pub seed: u64,
    /// Magnitude of the symmetry-breaking perturbation.
    pub perturbation: f64,
    /// Free-energy settling threshold.
    pub tol_fe: f64,
    /// Cycle-closure and drift threshold.
    pub tol_cycle: f64,
    /// Outer iteration cap per stage.
    pub max_iterations: usize,
}

impl SolverFlags {
    /// Options for one solve at the given rate; values are checked by the
    /// solver itself.
    pub fn options(&self, beta: f64) -> SolverOptions {
        SolverOptions {
            beta,
            clock_aware: self.clock_cost,
            max_period: self.max_period,
            cycle_tolerance: self.tol_cycle,
            fe_tolerance: self.tol_fe,
            max_outer_iterations: self.max_iterations,
            perturbation_scale: self.perturbation,
            rng_seed: self.seed,
        }
    }
}

/// What a finished command hands back to the entry point.
#[derive(Debug)]
pub struct CmdOutput {
    /// Text for stdout; ends with a newline.
    pub summary: String,
    /// Set when the work completed but fell short of convergence; the entry
    /// point reports it and exits with the non-convergence status.
    pub failure: Option<String>,
}

fn map_solver_err(e: SolverError) -> CliError {
    match e {
        SolverError::InvalidOptions { .. }
        | SolverError::PeriodInfeasible { .. }
        | SolverError::BadInitPeriod { .. } => CliError::Usage(e.to_string()),
        SolverError::Model(_) | SolverError::Info(_) => CliError::Validation(e.to_string()),
        _ => CliError::NonConvergence(e.to_string()),
    }
}

fn map_sim_err(e: SimError) -> CliError {
    match e {
        SimError::TooFewSteps { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn builtin(name: &str) -> Option<minfo_core::model::PomdpModel> {
    match name {
        "two-state" => Some(two_state()),
        "robot" => Some(robot()),
        _ => None,
    }
}

/// Load `builtin:<name>` or a model JSON file.
pub fn load_model(reference: &str) -> Result<LoadedModel, CliError> {
    if let Some(name) = reference.strip_prefix("builtin:") {
        return builtin(name).map(LoadedModel::Stationary).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown builtin model '{name}'; available: {}",
                BUILTIN_NAMES.join(", ")
            ))
        });
    }
    let doc: ModelDoc = read_json(Path::new(reference))?;
    model_from_doc(&doc)
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))
}

fn dispatch_solve(model: &LoadedModel, options: &SolverOptions) -> Result<Solution, CliError> {
    match model {
        LoadedModel::Stationary(m) => solve(m, options),
        LoadedModel::Periodic(m) => solve(m, options),
    }
    .map_err(map_solver_err)
}

/// Solve one model at one rate; writes `report.json` and `policy.json`.
pub fn cmd_solve(
    model_ref: &str,
    beta: f64,
    flags: &SolverFlags,
    out: &Path,
) -> Result<CmdOutput, CliError> {
    let model = load_model(model_ref)?;
    let solution = dispatch_solve(&model, &flags.options(beta))?;
    ensure_out_dir(out)?;
    let report_path = out.join("report.json");
    let policy_path = out.join("policy.json");
    write_json(&report_path, &report_doc(&solution.report))?;
    write_json(
        &policy_path,
        &policy_doc(&solution.policy, model.observations(), model.actions()),
    )?;
    let r = &solution.report;
    let summary = format!(
        "beta {} period {} free_energy {:.9} external_cost {:.9} info {:.9} nats converged {}\nwrote {}, {}\n",
        r.beta,
        r.detected_period,
        r.free_energy,
        r.external_cost,
        r.info.total(),
        r.converged,
        report_path.display(),
        policy_path.display()
    );
    let failure = if r.converged {
        None
    } else {
        let cause = r
            .failure
            .as_ref()
            .map(failure_string)
            .unwrap_or_else(|| String::from("convergence criteria not met"));
        Some(format!("solve did not converge: {cause}"))
    };
    Ok(CmdOutput { summary, failure })
}

/// Solve across a log-spaced rate grid; writes `sweep.csv` and
/// `bifurcations.csv`. Per-point shortfalls land in the `converged` column
/// rather than the exit status.
pub fn cmd_sweep(
    model_ref: &str,
    beta_min: f64,
    beta_max: f64,
    beta_steps: usize,
    cold: bool,
    flags: &SolverFlags,
    out: &Path,
) -> Result<CmdOutput, CliError> {
    if !(beta_min > 0.0) || !beta_min.is_finite() {
        return Err(CliError::Usage(format!(
            "--beta-min {beta_min} must be positive and finite"
        )));
    }
    if !beta_max.is_finite() || beta_max < beta_min {
        return Err(CliError::Usage(format!(
            "--beta-max {beta_max} must be finite and at least --beta-min {beta_min}"
        )));
    }
    if beta_steps < 1 {
        return Err(CliError::Usage(String::from(
            "--beta-steps must be at least 1",
        )));
    }
    if beta_steps > 1 && beta_max == beta_min {
        return Err(CliError::Usage(String::from(
            "--beta-max must exceed --beta-min for a multi-point grid",
        )));
    }
    let model = load_model(model_ref)?;
    let grid = log_grid(beta_min, beta_max, beta_steps);
    let options = flags.options(beta_min);
    let mode = if cold { SweepMode::Cold } else { SweepMode::Warm };
    let points = match &model {
        LoadedModel::Stationary(m) => sweep(m, &grid, &options, mode),
        LoadedModel::Periodic(m) => sweep(m, &grid, &options, mode),
    }
    .map_err(map_solver_err)?;
    let events = detect_bifurcations(&points);
    ensure_out_dir(out)?;
    let sweep_path = out.join("sweep.csv");
    let events_path = out.join("bifurcations.csv");
    fs::write(
        &sweep_path,
        sweep_csv(&points, model.observations(), model.actions()),
    )
    .map_err(|e| CliError::Validation(format!("{}: {e}", sweep_path.display())))?;
    fs::write(&events_path, bifurcations_csv(&events))
        .map_err(|e| CliError::Validation(format!("{}: {e}", events_path.display())))?;
    let converged = points.iter().filter(|p| p.converged).count();
    let summary = format!(
        "{} points ({} converged), {} bifurcation events\nwrote {}, {}\n",
        points.len(),
        converged,
        events.len(),
        sweep_path.display(),
        events_path.display()
    );
    Ok(CmdOutput {
        summary,
        failure: None,
    })
}

/// Flatten a retentive setup into its two-phase model and check that the
/// construction reproduces the agent's behavior; writes `reduced.json` and
/// `equivalence.json`.
pub fn cmd_reduce(
    setup_path: &Path,
    penalty: Option<f64>,
    tolerance: f64,
    out: &Path,
) -> Result<CmdOutput, CliError> {
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(CliError::Usage(format!(
            "--tolerance {tolerance} must be positive and finite"
        )));
    }
    let doc: SetupDoc = read_json(setup_path)?;
    let setup = setup_from_doc(&doc)?;
    let reduced = match penalty {
        Some(p) => build_reduced_pomdp_with_penalty(&setup, p),
        None => build_reduced_pomdp(&setup),
    }
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let report = minfo_core::reduction::check_equivalence(&setup, &reduced, tolerance)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    ensure_out_dir(out)?;
    let reduced_path = out.join("reduced.json");
    let equivalence_path = out.join("equivalence.json");
    write_json(&reduced_path, &doc_from_periodic(&reduced.model))?;
    write_json(&equivalence_path, &equivalence_doc(&report))?;
    let base = &reduced.model.phases[0];
    let summary = format!(
        "reduced model: {} phases, {} states, {} observations, {} actions; joint deviation {:e} (equivalent {})\nwrote {}, {}\n",
        reduced.model.phases.len(),
        base.states.len(),
        base.observations.len(),
        base.actions.len(),
        report.max_joint_deviation,
        report.equivalent,
        reduced_path.display(),
        equivalence_path.display()
    );
    Ok(CmdOutput {
        summary,
        failure: None,
    })
}

fn analytic_state<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    beta: f64,
    clock_aware: bool,
) -> Result<SolverState, CliError> {
    let dist = stationary_phase_distributions(model, policy, STATIONARY_TOL)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let beliefs = compute_beliefs(model, &dist);
    let marginals = marginal_policy(policy, &beliefs);
    let values = evaluate_values(model, policy, &dist, &marginals, beta, clock_aware)
        .map_err(map_solver_err)?;
    Ok(SolverState {
        dist,
        beliefs,
        marginals,
        values,
    })
}

fn simulate_on<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    state: &SolverState,
    steps: usize,
    burn_in: usize,
    seed: u64,
    out: &Path,
) -> Result<CmdOutput, CliError> {
    let stats = rollout(model, policy, steps, burn_in, seed).map_err(map_sim_err)?;
    let check = crosscheck(model, policy, &stats, state).map_err(map_sim_err)?;
    ensure_out_dir(out)?;
    let path = out.join("rollout.json");
    write_json(&path, &simulation_doc(&stats, &check))?;
    let summary = format!(
        "{} steps over {} cycles: cost {:.6} (se {:.2e}), analytic {:.6}, z {:.2}, occupancy deviation {:.2e}\nwrote {}\n",
        stats.steps,
        stats.cycles,
        stats.empirical_cost,
        stats.cost_standard_error,
        check.analytic_cost,
        check.cost_z,
        check.occupancy_sup_deviation,
        path.display()
    );
    Ok(CmdOutput {
        summary,
        failure: None,
    })
}

/// Monte Carlo rollout of a policy against a model; writes `rollout.json`.
/// The policy comes from `--policy`, or from solving the model at `--beta`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    model_ref: &str,
    policy_path: Option<&Path>,
    beta: Option<f64>,
    steps: usize,
    burn_in: usize,
    flags: &SolverFlags,
    out: &Path,
) -> Result<CmdOutput, CliError> {
    let model = load_model(model_ref)?;
    let (policy, state) = match policy_path {
        Some(path) => {
            let doc: PolicyDoc = read_json(path)?;
            let policy = policy_from_doc(&doc)?;
            let state = match &model {
                LoadedModel::Stationary(m) => {
                    analytic_state(m, &policy, beta.unwrap_or(1.0), flags.clock_cost)
                }
                LoadedModel::Periodic(m) => {
                    analytic_state(m, &policy, beta.unwrap_or(1.0), flags.clock_cost)
                }
            }?;
            (policy, state)
        }
        None => {
            let beta = beta.ok_or_else(|| {
                CliError::Usage(String::from("simulate needs --policy or --beta"))
            })?;
            let solution = dispatch_solve(&model, &flags.options(beta))?;
            if !solution.report.converged {
                let cause = solution
                    .report
                    .failure
                    .as_ref()
                    .map(failure_string)
                    .unwrap_or_else(|| String::from("convergence criteria not met"));
                return Err(CliError::NonConvergence(format!(
                    "refusing to simulate an unconverged solve: {cause}"
                )));
            }
            (solution.policy, solution.state)
        }
    };
    match &model {
        LoadedModel::Stationary(m) => {
            simulate_on(m, &policy, &state, steps, burn_in, flags.seed, out)
        }
        LoadedModel::Periodic(m) => {
            simulate_on(m, &policy, &state, steps, burn_in, flags.seed, out)
        }
    }
}

/// Write a builtin example model as JSON; the file is named after it.
pub fn cmd_example(name: &str, out: &Path) -> Result<CmdOutput, CliError> {
    let model = builtin(name).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown example '{name}'; available: {}",
            BUILTIN_NAMES.join(", ")
        ))
    })?;
    ensure_out_dir(out)?;
    let path = out.join(format!("{name}.json"));
    write_json(&path, &doc_from_stationary(&model))?;
    Ok(CmdOutput {
        summary: format!("wrote {}\n", path.display()),
        failure: None,
    })
}
