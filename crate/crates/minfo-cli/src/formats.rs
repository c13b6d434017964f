//! On-disk document formats: model, policy, and retentive-setup JSON, the
//! solver and simulation reports, and the sweep CSV tables.

use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use minfo_core::model::{Ergodicity, PeriodicPomdpModel, PomdpModel, ReactivePolicy};
use minfo_core::reduction::{EquivalenceReport, RetentiveSetup};
use minfo_core::sim::{CrosscheckReport, RolloutStats};
use minfo_core::solver::{SolveFailure, SolverReport};
use minfo_core::sweep::{BifurcationEvent, SweepPoint};

use crate::CliError;

/// Read and parse a JSON document, naming the file in any failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Write a document as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// One phase block of a periodic model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseDoc {
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `observation[s][o]`.
    pub observation: Vec<Vec<f64>>,
    /// `cost[s][a]`.
    pub cost: Vec<Vec<f64>>,
}

/// Model document. A stationary model carries `transition`, `observation`,
/// and `cost` at the top level; a periodic model instead carries `phases`
/// (one block of those three tables per phase) and optionally
/// `allowed_actions` (per-phase lists of permitted action labels, all
/// actions when absent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    /// State labels.
    pub states: Vec<String>,
    /// Observation labels.
    pub observations: Vec<String>,
    /// Action labels.
    pub actions: Vec<String>,
    /// Stationary transition table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<Vec<f64>>>>,
    /// Stationary observation table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Vec<Vec<f64>>>,
    /// Stationary cost table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Vec<Vec<f64>>>,
    /// Per-phase tables of a periodic model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<PhaseDoc>>,
    /// Per-phase admissible action labels of a periodic model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_actions: Option<Vec<Vec<String>>>,
}

/// A model in either stationary or periodic form.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    /// One phase, every action allowed.
    Stationary(PomdpModel),
    /// Several phases with per-phase admissible actions.
    Periodic(PeriodicPomdpModel),
}

impl LoadedModel {
    /// Observation labels.
    pub fn observations(&self) -> &[String] {
        match self {
            LoadedModel::Stationary(m) => &m.observations,
            LoadedModel::Periodic(m) => &m.phases[0].observations,
        }
    }

    /// Action labels.
    pub fn actions(&self) -> &[String] {
        match self {
            LoadedModel::Stationary(m) => &m.actions,
            LoadedModel::Periodic(m) => &m.phases[0].actions,
        }
    }
}

fn action_mask(actions: &[String], allowed: &[String]) -> Result<Vec<bool>, CliError> {
    let mut mask = vec![false; actions.len()];
    for label in allowed {
        match actions.iter().position(|a| a == label) {
            Some(i) => mask[i] = true,
            None => {
                return Err(CliError::Validation(format!(
                    "allowed action '{label}' is not an action of the model"
                )))
            }
        }
    }
    Ok(mask)
}

/// Build and validate the model a document describes.
pub fn model_from_doc(doc: &ModelDoc) -> Result<LoadedModel, CliError> {
    let invalid = |e: minfo_core::model::ModelError| CliError::Validation(e.to_string());
    if let Some(phases) = &doc.phases {
        if doc.transition.is_some() || doc.observation.is_some() || doc.cost.is_some() {
            return Err(CliError::Validation(String::from(
                "model document mixes top-level tables with `phases`",
            )));
        }
        let mut built = Vec::with_capacity(phases.len());
        for phase in phases {
            built.push(
                PomdpModel::new(
                    doc.states.clone(),
                    doc.observations.clone(),
                    doc.actions.clone(),
                    phase.transition.clone(),
                    phase.observation.clone(),
                    phase.cost.clone(),
                )
                .map_err(invalid)?,
            );
        }
        let masks = match &doc.allowed_actions {
            Some(lists) => {
                if lists.len() != built.len() {
                    return Err(CliError::Validation(format!(
                        "allowed_actions lists {} phases, model has {}",
                        lists.len(),
                        built.len()
                    )));
                }
                lists
                    .iter()
                    .map(|list| action_mask(&doc.actions, list))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => vec![vec![true; doc.actions.len()]; built.len()],
        };
        PeriodicPomdpModel::new(built, masks)
            .map(LoadedModel::Periodic)
            .map_err(invalid)
    } else {
        let missing =
            |field: &str| CliError::Validation(format!("model document is missing `{field}`"));
        let transition = doc.transition.clone().ok_or_else(|| missing("transition"))?;
        let observation = doc.observation.clone().ok_or_else(|| missing("observation"))?;
        let cost = doc.cost.clone().ok_or_else(|| missing("cost"))?;
        PomdpModel::new(
            doc.states.clone(),
            doc.observations.clone(),
            doc.actions.clone(),
            transition,
            observation,
            cost,
        )
        .map(LoadedModel::Stationary)
        .map_err(invalid)
    }
}

/// Document for a stationary model.
pub fn doc_from_stationary(model: &PomdpModel) -> ModelDoc {
    ModelDoc {
        states: model.states.clone(),
        observations: model.observations.clone(),
        actions: model.actions.clone(),
        transition: Some(model.transition.clone()),
        observation: Some(model.observation.clone()),
        cost: Some(model.cost.clone()),
        phases: None,
        allowed_actions: None,
    }
}

/// Document for a periodic model, admissible actions spelled out as labels.
pub fn doc_from_periodic(model: &PeriodicPomdpModel) -> ModelDoc {
    let base = &model.phases[0];
    let allowed = model
        .allowed_actions
        .iter()
        .map(|mask| {
            mask.iter()
                .zip(&base.actions)
                .filter(|(ok, _)| **ok)
                .map(|(_, a)| a.clone())
                .collect()
        })
        .collect();
    ModelDoc {
        states: base.states.clone(),
        observations: base.observations.clone(),
        actions: base.actions.clone(),
        transition: None,
        observation: None,
        cost: None,
        phases: Some(
            model
                .phases
                .iter()
                .map(|p| PhaseDoc {
                    transition: p.transition.clone(),
                    observation: p.observation.clone(),
                    cost: p.cost.clone(),
                })
                .collect(),
        ),
        allowed_actions: Some(allowed),
    }
}

/// Periodic policy document; rows are `kernels[t][o][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDoc {
    /// Number of phases.
    pub period: usize,
    /// Observation labels the rows are indexed by.
    pub observations: Vec<String>,
    /// Action labels the columns are indexed by.
    pub actions: Vec<String>,
    /// `kernels[t][o][a]`.
    pub kernels: Vec<Vec<Vec<f64>>>,
}

/// Document for a solved policy, labeled with the model's vocabularies.
pub fn policy_doc(policy: &ReactivePolicy, observations: &[String], actions: &[String]) -> PolicyDoc {
    PolicyDoc {
        period: policy.period(),
        observations: observations.to_vec(),
        actions: actions.to_vec(),
        kernels: policy.kernels.clone(),
    }
}

/// Build and validate the policy a document describes.
pub fn policy_from_doc(doc: &PolicyDoc) -> Result<ReactivePolicy, CliError> {
    if doc.kernels.len() != doc.period {
        return Err(CliError::Validation(format!(
            "policy document declares period {} but has {} kernels",
            doc.period,
            doc.kernels.len()
        )));
    }
    ReactivePolicy::new(doc.kernels.clone()).map_err(|e| CliError::Validation(e.to_string()))
}

/// Retentive (memory) agent document: a base model, memory labels, the
/// inference rows `inference[m][o][m']`, the control rows `control[m][a]`,
/// and the starting memory index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetupDoc {
    /// Base model document (stationary form).
    pub base: ModelDoc,
    /// Memory-state labels.
    pub memory: Vec<String>,
    /// `inference[m][o][m']`.
    pub inference: Vec<Vec<Vec<f64>>>,
    /// `control[m][a]`.
    pub control: Vec<Vec<f64>>,
    /// Starting memory index.
    pub initial_memory: usize,
}

/// Build and validate the retentive setup a document describes.
pub fn setup_from_doc(doc: &SetupDoc) -> Result<RetentiveSetup, CliError> {
    let base = match model_from_doc(&doc.base)? {
        LoadedModel::Stationary(m) => m,
        LoadedModel::Periodic(_) => {
            return Err(CliError::Validation(String::from(
                "retentive setup base must be a stationary model",
            )))
        }
    };
    RetentiveSetup::new(
        base,
        doc.memory.clone(),
        doc.inference.clone(),
        doc.control.clone(),
        doc.initial_memory,
    )
    .map_err(|e| CliError::Validation(e.to_string()))
}

/// Flat JSON view of a solver report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    /// Trade-off rate the solve ran at.
    pub beta: f64,
    /// Whether clock information was charged.
    pub clock_aware: bool,
    /// Final free energy.
    pub free_energy: f64,
    /// Final average external cost per step.
    pub external_cost: f64,
    /// Observation information, nats per step.
    pub obs_info_nats: f64,
    /// Clock information, nats per step.
    pub clock_info_nats: f64,
    /// Total charged information, nats per step.
    pub total_info_nats: f64,
    /// Effective period of the final policy.
    pub detected_period: usize,
    /// Outer iterations across all stages.
    pub outer_iterations: usize,
    /// Forward-recursion self-consistency violation.
    pub residual_forward: f64,
    /// Action-marginal self-consistency violation.
    pub residual_marginal: f64,
    /// Backward-recursion self-consistency violation.
    pub residual_backward: f64,
    /// Policy-update self-consistency violation.
    pub residual_policy: f64,
    /// Whether every convergence criterion was met.
    pub converged: bool,
    /// Reachability diagnosis of the final closed loop.
    pub ergodicity: String,
    /// Free energy of the (perturbed) initial policy.
    pub initial_free_energy: f64,
    /// Largest single-iteration free-energy increase observed.
    pub max_fe_step_increase: f64,
    /// Why the solve fell short, when it did.
    pub failure: Option<String>,
}

fn ergodicity_string(ergodicity: &Ergodicity) -> String {
    match ergodicity {
        Ergodicity::Ergodic => String::from("ergodic"),
        Ergodicity::Reducible {
            communicating_classes,
        } => format!("reducible({communicating_classes} classes)"),
        Ergodicity::PeriodicChain { period } => format!("periodic-chain({period})"),
    }
}

/// Human-readable rendering of a solve shortfall.
pub fn failure_string(failure: &SolveFailure) -> String {
    match failure {
        SolveFailure::CycleNotClosed {
            best_period,
            mismatch,
        } => format!("cycle failed to close (best period {best_period}, mismatch {mismatch:e})"),
        SolveFailure::OuterIterationCap => String::from("outer iteration cap reached"),
        SolveFailure::ResidualGate { max_residual } => {
            format!("residuals above the acceptance gate ({max_residual:e})")
        }
        SolveFailure::Stalled { reason } => format!("stalled: {reason}"),
    }
}

/// Flatten a solver report for emission.
pub fn report_doc(report: &SolverReport) -> ReportDoc {
    ReportDoc {
        beta: report.beta,
        clock_aware: report.clock_aware,
        free_energy: report.free_energy,
        external_cost: report.external_cost,
        obs_info_nats: report.info.obs_info,
        clock_info_nats: report.info.clock_info,
        total_info_nats: report.info.total(),
        detected_period: report.detected_period,
        outer_iterations: report.outer_iterations,
        residual_forward: report.residuals.forward,
        residual_marginal: report.residuals.marginal,
        residual_backward: report.residuals.backward,
        residual_policy: report.residuals.policy,
        converged: report.converged,
        ergodicity: ergodicity_string(&report.ergodicity),
        initial_free_energy: report.initial_free_energy,
        max_fe_step_increase: report.max_fe_step_increase,
        failure: report.failure.as_ref().map(failure_string),
    }
}

/// Rollout statistics joined with the analytic crosscheck.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationDoc {
    /// Steps collected after burn-in (whole cycles only).
    pub steps: usize,
    /// Burn-in steps consumed.
    pub burn_in: usize,
    /// Sampler seed.
    pub seed: u64,
    /// Policy period.
    pub period: usize,
    /// Whole cycles collected.
    pub cycles: usize,
    /// Mean cost per step.
    pub empirical_cost: f64,
    /// Standard error of the per-cycle cost means.
    pub cost_standard_error: f64,
    /// Plug-in observation-information estimate, nats per step.
    pub empirical_obs_info_nats: f64,
    /// Plug-in clock-information estimate, nats per step.
    pub empirical_clock_info_nats: f64,
    /// `occupancy[t][s]`: per-phase visit frequencies.
    pub occupancy: Vec<Vec<f64>>,
    /// Analytic mean cost per step of the same policy.
    pub analytic_cost: f64,
    /// Cost discrepancy in standard errors.
    pub cost_z: f64,
    /// Sup deviation between empirical and analytic occupancies.
    pub occupancy_sup_deviation: f64,
    /// Whether the cost discrepancy is within three standard errors.
    pub cost_within_3se: bool,
    /// Whether the occupancy deviation is within the sampling threshold.
    pub occupancy_consistent: bool,
}

/// Join rollout statistics with their crosscheck for emission.
pub fn simulation_doc(stats: &RolloutStats, check: &CrosscheckReport) -> SimulationDoc {
    SimulationDoc {
        steps: stats.steps,
        burn_in: stats.burn_in,
        seed: stats.seed,
        period: stats.period,
        cycles: stats.cycles,
        empirical_cost: stats.empirical_cost,
        cost_standard_error: stats.cost_standard_error,
        empirical_obs_info_nats: stats.empirical_obs_info,
        empirical_clock_info_nats: stats.empirical_clock_info,
        occupancy: stats.occupancy.clone(),
        analytic_cost: check.analytic_cost,
        cost_z: check.cost_z,
        occupancy_sup_deviation: check.occupancy_sup_deviation,
        cost_within_3se: check.cost_within_3se,
        occupancy_consistent: check.occupancy_consistent,
    }
}

/// Equivalence verdict of a reduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceDoc {
    /// Largest joint-distribution deviation found.
    pub max_joint_deviation: f64,
    /// Average cost per step of the retentive agent.
    pub retentive_cost: f64,
    /// Average cost per original step of the reduced agent.
    pub reduced_cost: f64,
    /// Whether the deviation is within tolerance.
    pub equivalent: bool,
}

/// Flatten an equivalence report for emission.
pub fn equivalence_doc(report: &EquivalenceReport) -> EquivalenceDoc {
    EquivalenceDoc {
        max_joint_deviation: report.max_joint_deviation,
        retentive_cost: report.retentive_cost,
        reduced_cost: report.reduced_cost,
        equivalent: report.equivalent,
    }
}

/// Sweep table: one row per grid point, scalar columns first, then the
/// policy flattened as `pi[t][o][a]` columns labeled with the model's
/// vocabularies. Points of shorter period are extended cyclically to the
/// widest period in the table.
pub fn sweep_csv(points: &[SweepPoint], observations: &[String], actions: &[String]) -> String {
    let t_cols = points.iter().map(|p| p.period).max().unwrap_or(1);
    let mut out = String::from(
        "beta,free_energy,external_cost,obs_info_nats,clock_info_nats,obs_info_bits,clock_info_bits,period,converged",
    );
    for t in 0..t_cols {
        for o in observations {
            for a in actions {
                out.push_str(&format!(",pi[{t}][{o}][{a}]"));
            }
        }
    }
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            p.beta,
            p.free_energy,
            p.external_cost,
            p.obs_info_nats,
            p.clock_info_nats,
            p.obs_info_nats / LN_2,
            p.clock_info_nats / LN_2,
            p.period,
            p.converged
        ));
        let snapshot_period = p.policy_snapshot.period();
        for t in 0..t_cols {
            let table = &p.policy_snapshot.kernels[t % snapshot_period];
            for row in table {
                for value in row {
                    out.push_str(&format!(",{value}"));
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Bifurcation table: one row per detected period change.
pub fn bifurcations_csv(events: &[BifurcationEvent]) -> String {
    let mut out = String::from("beta_low,beta_high,period_before,period_after\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.beta_low, e.beta_high, e.period_before, e.period_after
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use minfo_core::models::two_state;

    #[test]
    fn stationary_model_round_trips_through_its_document() {
        let model = two_state();
        let doc = doc_from_stationary(&model);
        let text = serde_json::to_string(&doc).unwrap();
        let back: ModelDoc = serde_json::from_str(&text).unwrap();
        match model_from_doc(&back).unwrap() {
            LoadedModel::Stationary(m) => assert_eq!(m, model),
            LoadedModel::Periodic(_) => panic!("stationary model came back periodic"),
        }
    }

    #[test]
    fn stationary_document_serializes_without_phase_fields() {
        let doc = doc_from_stationary(&two_state());
        let text = serde_json::to_string(&doc).unwrap();
        assert!(!text.contains("phases"));
        assert!(!text.contains("allowed_actions"));
    }

    #[test]
    fn missing_table_is_named_in_the_error() {
        let mut doc = doc_from_stationary(&two_state());
        doc.cost = None;
        let err = model_from_doc(&doc).unwrap_err();
        assert!(err.to_string().contains("cost"), "{err}");
    }

    #[test]
    fn unknown_allowed_action_label_is_rejected() {
        let model = two_state();
        let doc = ModelDoc {
            states: model.states.clone(),
            observations: model.observations.clone(),
            actions: model.actions.clone(),
            transition: None,
            observation: None,
            cost: None,
            phases: Some(vec![PhaseDoc {
                transition: model.transition.clone(),
                observation: model.observation.clone(),
                cost: model.cost.clone(),
            }]),
            allowed_actions: Some(vec![vec![String::from("jump")]]),
        };
        let err = model_from_doc(&doc).unwrap_err();
        assert!(err.to_string().contains("jump"), "{err}");
    }

    #[test]
    fn policy_document_round_trips() {
        let policy = ReactivePolicy::new(vec![
            vec![vec![1.0, 0.0]],
            vec![vec![0.25, 0.75]],
        ])
        .unwrap();
        let doc = policy_doc(
            &policy,
            &[String::from("none")],
            &[String::from("left"), String::from("right")],
        );
        let text = serde_json::to_string(&doc).unwrap();
        let back: PolicyDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(policy_from_doc(&back).unwrap(), policy);
    }

    #[test]
    fn policy_period_mismatch_is_rejected() {
        let doc = PolicyDoc {
            period: 2,
            observations: vec![String::from("none")],
            actions: vec![String::from("left"), String::from("right")],
            kernels: vec![vec![vec![0.5, 0.5]]],
        };
        assert!(policy_from_doc(&doc).is_err());
    }

    #[test]
    fn sweep_csv_extends_short_periods_cyclically() {
        let one = ReactivePolicy::new(vec![vec![vec![0.5, 0.5]]]).unwrap();
        let two = ReactivePolicy::new(vec![
            vec![vec![0.9, 0.1]],
            vec![vec![0.1, 0.9]],
        ])
        .unwrap();
        let points = vec![
            SweepPoint {
                beta: 0.5,
                free_energy: -0.5,
                external_cost: -0.5,
                obs_info_nats: 0.0,
                clock_info_nats: 0.0,
                period: 1,
                policy_snapshot: one,
                converged: true,
            },
            SweepPoint {
                beta: 2.0,
                free_energy: -0.75,
                external_cost: -0.8,
                obs_info_nats: 0.0,
                clock_info_nats: 0.1,
                period: 2,
                policy_snapshot: two,
                converged: true,
            },
        ];
        let obs = [String::from("none")];
        let act = [String::from("left"), String::from("right")];
        let csv = sweep_csv(&points, &obs, &act);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("beta,free_energy,external_cost,obs_info_nats,clock_info_nats,obs_info_bits,clock_info_bits,period,converged"));
        assert!(header.ends_with("pi[0][none][left],pi[0][none][right],pi[1][none][left],pi[1][none][right]"));
        let first = lines.next().unwrap();
        // The period-1 point repeats its single row in both phase blocks.
        assert!(first.ends_with("0.5,0.5,0.5,0.5"), "{first}");
        let second = lines.next().unwrap();
        assert!(second.ends_with("0.9,0.1,0.1,0.9"), "{second}");
        assert!(lines.next().is_none());
    }

    #[test]
    fn bifurcations_csv_lists_events_in_order() {
        let events = vec![BifurcationEvent {
            beta_low: 0.9,
            beta_high: 1.1,
            period_before: 1,
            period_after: 2,
        }];
        assert_eq!(
            bifurcations_csv(&events),
            "beta_low,beta_high,period_before,period_after\n0.9,1.1,1,2\n"
        );
    }
}
