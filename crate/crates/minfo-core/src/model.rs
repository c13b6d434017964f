//! Model and policy containers plus the closed-loop quantities everything
//! else builds on: induced state kernels, stationary phase distributions,
//! beliefs and average external cost.
//!
//! Conventions used throughout the crate:
//!
//! * `transition[s][a][s']` is `p(s'|s,a)`, `observation[s][o]` is `o(o|s)`,
//!   `cost[s][a]` is `c(s,a)`; rewards are negative costs.
//! * A policy is periodic with period `T`; `kernels[t][o][a]` is `pi_t(a|o)`.
//! * Probability rows must sum to one within [`ROW_SUM_TOL`].
//! * All averages over a cycle divide by `T` (per-phase convention).

use crate::math::{abs, sup_diff};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

/// Tolerance on `|row sum - 1|` for every probability row held by validated
/// types.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Acceptance tolerance for externally supplied model tables. Rows within
/// this bound of summing to 1 are renormalized exactly; rows beyond it are
/// rejected.
pub const MODEL_PARSE_TOL: f64 = 1e-9;

/// Default sup-norm tolerance for stationary distribution fixed points.
pub const STATIONARY_TOL: f64 = 1e-12;

/// Iteration cap for the stationary power iteration.
pub const STATIONARY_MAX_ITER: usize = 100_000;

/// Validation and consistency failures for models, policies and their
/// induced chains.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// A label list is empty or contains duplicates.
    #[error("bad {kind} labels: {detail}")]
    BadLabels {
        /// Which label list is malformed.
        kind: &'static str,
        /// Human-readable cause.
        detail: String,
    },
    /// A table's shape disagrees with the label lists.
    #[error("dimension mismatch in {table}: {detail}")]
    DimensionMismatch {
        /// Which table is malformed.
        table: &'static str,
        /// Human-readable cause.
        detail: String,
    },
    /// A probability entry is negative, above one, or not finite.
    #[error("invalid probability {value} in {table} row {row}")]
    InvalidProbability {
        /// Which table holds the entry.
        table: &'static str,
        /// Row position, e.g. `(s=1, a=0)`.
        row: String,
        /// Offending value.
        value: f64,
    },
    /// A probability row does not sum to one within tolerance.
    #[error("row {row} of {table} sums to {sum}, beyond tolerance {tolerance}")]
    RowNotStochastic {
        /// Which table holds the row.
        table: &'static str,
        /// Row position, e.g. `(s=1, a=0)`.
        row: String,
        /// Actual row sum.
        sum: f64,
        /// Acceptance tolerance that was applied.
        tolerance: f64,
    },
    /// A cost entry is not finite.
    #[error("non-finite cost at state {state}, action {action}")]
    NonFiniteCost {
        /// State index.
        state: usize,
        /// Action index.
        action: usize,
    },
    /// Periodic model phases disagree on labels, or a mask row is malformed.
    #[error("bad periodic structure: {0}")]
    BadPeriodicStructure(String),
    /// Policy dimensions do not match the model, or the period is not a
    /// multiple of the model's phase count.
    #[error("policy incompatible with model: {0}")]
    PolicyMismatch(String),
    /// The policy puts probability mass on an action disallowed in its phase.
    #[error("policy puts mass {mass} on disallowed action {action} at phase {phase}")]
    DisallowedAction {
        /// Policy phase.
        phase: usize,
        /// Action index.
        action: usize,
        /// Offending mass.
        mass: f64,
    },
    /// Power iteration for the stationary distribution did not converge
    /// within the iteration cap; usually a sign of a non-ergodic chain.
    #[error("stationary distribution did not converge: residual {residual} after {iterations} iterations")]
    StationaryNotConverged {
        /// Iterations performed.
        iterations: usize,
        /// Final sup-norm residual.
        residual: f64,
    },
    /// A phase distribution row is malformed.
    #[error("bad phase distribution: {0}")]
    BadDistribution(String),
}

/// Finite POMDP with states, observations, actions, transition and
/// observation kernels and a cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct PomdpModel {
    /// State labels.
    pub states: Vec<String>,
    /// Observation labels.
    pub observations: Vec<String>,
    /// Action labels.
    pub actions: Vec<String>,
    /// `transition[s][a][s'] = p(s'|s,a)`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `observation[s][o] = o(o|s)`.
    pub observation: Vec<Vec<f64>>,
    /// `cost[s][a] = c(s,a)`.
    pub cost: Vec<Vec<f64>>,
}

impl PomdpModel {
    /// Build and validate a model.
    pub fn new(
        states: Vec<String>,
        observations: Vec<String>,
        actions: Vec<String>,
        transition: Vec<Vec<Vec<f64>>>,
        observation: Vec<Vec<f64>>,
        cost: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            states,
            observations,
            actions,
            transition,
            observation,
            cost,
        };
        validate_model(&model)
    }

    /// Number of states.
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Number of observations.
    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    /// Number of actions.
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }
}

fn check_labels(kind: &'static str, labels: &[String]) -> Result<(), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::BadLabels {
            kind,
            detail: String::from("empty label list"),
        });
    }
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() {
            return Err(ModelError::BadLabels {
                kind,
                detail: format!("label {i} is empty"),
            });
        }
        if labels[..i].contains(l) {
            return Err(ModelError::BadLabels {
                kind,
                detail: format!("duplicate label '{l}'"),
            });
        }
    }
    Ok(())
}

/// Checks entries and the row sum against `tolerance`; returns the sum so
/// the caller may renormalize.
fn check_prob_row(
    table: &'static str,
    row_desc: impl Fn() -> String,
    row: &[f64],
    tolerance: f64,
) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < 0.0 || v > 1.0 + tolerance {
            return Err(ModelError::InvalidProbability {
                table,
                row: row_desc(),
                value: v,
            });
        }
        sum += v;
    }
    if abs(sum - 1.0) > tolerance {
        return Err(ModelError::RowNotStochastic {
            table,
            row: row_desc(),
            sum,
            tolerance,
        });
    }
    Ok(sum)
}

fn renormalize_checked_row(row: &mut [f64], sum: f64) {
    if sum != 1.0 {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Validate label lists, table shapes, probability rows and cost finiteness,
/// returning a copy whose probability rows are renormalized to sum to 1
/// exactly. Rows off by more than [`MODEL_PARSE_TOL`] are rejected, with the
/// offending row named in the error.
pub fn validate_model(model: &PomdpModel) -> Result<PomdpModel, ModelError> {
    check_labels("state", &model.states)?;
    check_labels("observation", &model.observations)?;
    check_labels("action", &model.actions)?;
    let (ns, no, na) = (
        model.num_states(),
        model.num_observations(),
        model.num_actions(),
    );
    let mut out = model.clone();
    if out.transition.len() != ns {
        return Err(ModelError::DimensionMismatch {
            table: "transition",
            detail: format!("{} state rows, expected {ns}", out.transition.len()),
        });
    }
    for (s, per_action) in out.transition.iter_mut().enumerate() {
        if per_action.len() != na {
            return Err(ModelError::DimensionMismatch {
                table: "transition",
                detail: format!("state {s} has {} action rows, expected {na}", per_action.len()),
            });
        }
        for (a, row) in per_action.iter_mut().enumerate() {
            if row.len() != ns {
                return Err(ModelError::DimensionMismatch {
                    table: "transition",
                    detail: format!("row (s={s}, a={a}) has {} entries, expected {ns}", row.len()),
                });
            }
            let sum = check_prob_row(
                "transition",
                || format!("(s={s}, a={a})"),
                row,
                MODEL_PARSE_TOL,
            )?;
            renormalize_checked_row(row, sum);
        }
    }
    if out.observation.len() != ns {
        return Err(ModelError::DimensionMismatch {
            table: "observation",
            detail: format!("{} state rows, expected {ns}", out.observation.len()),
        });
    }
    for (s, row) in out.observation.iter_mut().enumerate() {
        if row.len() != no {
            return Err(ModelError::DimensionMismatch {
                table: "observation",
                detail: format!("row {s} has {} entries, expected {no}", row.len()),
            });
        }
        let sum = check_prob_row("observation", || format!("(s={s})"), row, MODEL_PARSE_TOL)?;
        renormalize_checked_row(row, sum);
    }
    if out.cost.len() != ns {
        return Err(ModelError::DimensionMismatch {
            table: "cost",
            detail: format!("{} state rows, expected {ns}", out.cost.len()),
        });
    }
    for (s, row) in out.cost.iter().enumerate() {
        if row.len() != na {
            return Err(ModelError::DimensionMismatch {
                table: "cost",
                detail: format!("row {s} has {} entries, expected {na}", row.len()),
            });
        }
        for (a, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(ModelError::NonFiniteCost { state: s, action: a });
            }
        }
    }
    Ok(out)
}

/// Cyclic model whose tables change with the phase `t mod M`, with per-phase
/// action admissibility masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicPomdpModel {
    /// Per-phase model tables; all phases share the same label lists.
    pub phases: Vec<PomdpModel>,
    /// `allowed_actions[phase][action]`; every phase allows at least one.
    pub allowed_actions: Vec<Vec<bool>>,
}

impl PeriodicPomdpModel {
    /// Build and validate a periodic model.
    pub fn new(
        phases: Vec<PomdpModel>,
        allowed_actions: Vec<Vec<bool>>,
    ) -> Result<Self, ModelError> {
        if phases.is_empty() {
            return Err(ModelError::BadPeriodicStructure(String::from(
                "no phases",
            )));
        }
        let phases: Vec<PomdpModel> = phases
            .iter()
            .map(validate_model)
            .collect::<Result<_, _>>()?;
        for (t, phase) in phases.iter().enumerate() {
            if phase.states != phases[0].states
                || phase.observations != phases[0].observations
                || phase.actions != phases[0].actions
            {
                return Err(ModelError::BadPeriodicStructure(format!(
                    "phase {t} labels differ from phase 0"
                )));
            }
        }
        if allowed_actions.len() != phases.len() {
            return Err(ModelError::BadPeriodicStructure(format!(
                "{} mask rows for {} phases",
                allowed_actions.len(),
                phases.len()
            )));
        }
        let na = phases[0].num_actions();
        for (t, mask) in allowed_actions.iter().enumerate() {
            if mask.len() != na {
                return Err(ModelError::BadPeriodicStructure(format!(
                    "mask row {t} has {} entries, expected {na}",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&x| x) {
                return Err(ModelError::BadPeriodicStructure(format!(
                    "phase {t} allows no action"
                )));
            }
        }
        Ok(Self {
            phases,
            allowed_actions,
        })
    }

    /// Wrap a stationary model as a single-phase periodic one.
    pub fn from_stationary(model: PomdpModel) -> Self {
        let na = model.num_actions();
        Self {
            phases: vec![model],
            allowed_actions: vec![vec![true; na]],
        }
    }

    /// Number of model phases `M`.
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }
}

/// Uniform access to stationary and periodic models. Phase arguments are
/// taken modulo the model's phase count, so policy phases (period a multiple
/// of `M`) index directly.
pub trait PhasedPomdp {
    /// Number of model phases `M` (1 for stationary models).
    fn model_phases(&self) -> usize;
    /// Tables in effect at phase `t` (taken mod `M`).
    fn phase(&self, t: usize) -> &PomdpModel;
    /// Admissibility mask at phase `t`, or `None` when every action is
    /// allowed.
    fn allowed(&self, t: usize) -> Option<&[bool]>;

    /// Number of states.
    fn num_states(&self) -> usize {
        self.phase(0).num_states()
    }
    /// Number of observations.
    fn num_observations(&self) -> usize {
        self.phase(0).num_observations()
    }
    /// Number of actions.
    fn num_actions(&self) -> usize {
        self.phase(0).num_actions()
    }
    /// Whether action `a` is admissible at phase `t`.
    fn action_allowed(&self, t: usize, a: usize) -> bool {
        self.allowed(t).map_or(true, |m| m[a])
    }
}

impl PhasedPomdp for PomdpModel {
    fn model_phases(&self) -> usize {
        1
    }
    fn phase(&self, _t: usize) -> &PomdpModel {
        self
    }
    fn allowed(&self, _t: usize) -> Option<&[bool]> {
        None
    }
}

impl PhasedPomdp for PeriodicPomdpModel {
    fn model_phases(&self) -> usize {
        self.phases.len()
    }
    fn phase(&self, t: usize) -> &PomdpModel {
        &self.phases[t % self.phases.len()]
    }
    fn allowed(&self, t: usize) -> Option<&[bool]> {
        Some(&self.allowed_actions[t % self.allowed_actions.len()])
    }
}

/// Periodic reactive policy; `kernels[t][o][a] = pi_t(a|o)` for
/// `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactivePolicy {
    /// Per-phase conditional action tables.
    pub kernels: Vec<Vec<Vec<f64>>>,
}

impl ReactivePolicy {
    /// Build and validate a policy: every row must be a distribution.
    pub fn new(kernels: Vec<Vec<Vec<f64>>>) -> Result<Self, ModelError> {
        if kernels.is_empty() {
            return Err(ModelError::PolicyMismatch(String::from("empty policy")));
        }
        let no = kernels[0].len();
        for (t, table) in kernels.iter().enumerate() {
            if table.len() != no {
                return Err(ModelError::PolicyMismatch(format!(
                    "phase {t} has {} observation rows, expected {no}",
                    table.len()
                )));
            }
            for (o, row) in table.iter().enumerate() {
                if row.len() != kernels[0][0].len() {
                    return Err(ModelError::PolicyMismatch(format!(
                        "row (t={t}, o={o}) has {} entries",
                        row.len()
                    )));
                }
                check_prob_row("policy", || format!("(t={t}, o={o})"), row, ROW_SUM_TOL)?;
            }
        }
        Ok(Self { kernels })
    }

    /// Uniform policy with the given period over `num_obs` observations and
    /// `num_actions` actions.
    pub fn uniform(period: usize, num_obs: usize, num_actions: usize) -> Self {
        let row = vec![1.0 / num_actions as f64; num_actions];
        Self {
            kernels: vec![vec![row; num_obs]; period],
        }
    }

    /// Period `T`.
    pub fn period(&self) -> usize {
        self.kernels.len()
    }

    /// Check dimensions against a model, that the period is a positive
    /// multiple of the model's phase count, and that no phase puts mass on a
    /// disallowed action.
    pub fn validate_against<M: PhasedPomdp>(&self, model: &M) -> Result<(), ModelError> {
        let t_len = self.period();
        let m = model.model_phases();
        if t_len % m != 0 {
            return Err(ModelError::PolicyMismatch(format!(
                "period {t_len} is not a multiple of the model's {m} phases"
            )));
        }
        for (t, table) in self.kernels.iter().enumerate() {
            if table.len() != model.num_observations() {
                return Err(ModelError::PolicyMismatch(format!(
                    "phase {t} has {} observation rows, model has {}",
                    table.len(),
                    model.num_observations()
                )));
            }
            for row in table {
                if row.len() != model.num_actions() {
                    return Err(ModelError::PolicyMismatch(format!(
                        "phase {t} rows have {} actions, model has {}",
                        row[..].len(),
                        model.num_actions()
                    )));
                }
            }
            if let Some(mask) = model.allowed(t) {
                for row in table {
                    for (a, &p) in row.iter().enumerate() {
                        if !mask[a] && p > 0.0 {
                            return Err(ModelError::DisallowedAction {
                                phase: t,
                                action: a,
                                mass: p,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-phase state marginals `p_t(s)`, the closed loop's stationary
/// description over one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDistribution {
    /// `dists[t][s]`, each row a distribution over states.
    pub dists: Vec<Vec<f64>>,
}

impl PhaseDistribution {
    /// Period covered by the distribution.
    pub fn period(&self) -> usize {
        self.dists.len()
    }
}

/// Posterior beliefs `b_t(s|o)` with their observation marginals.
///
/// Observations with zero probability at a phase are flagged unsupported;
/// their belief rows are zero-filled and must not be consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTable {
    /// `beliefs[t][o][s] = b_t(s|o)` where supported.
    pub beliefs: Vec<Vec<Vec<f64>>>,
    /// `obs_marginals[t][o]`: observation probability at phase `t`.
    pub obs_marginals: Vec<Vec<f64>>,
    /// `support[t][o]`: whether the observation has positive probability.
    pub support: Vec<Vec<bool>>,
}

/// Induced state kernel of one policy phase:
/// `P[s][s'] = sum_{o,a} o(o|s) pi_t(a|o) p(s'|s,a)`.
///
/// Rows are stochastic whenever model and policy rows are.
pub fn policy_state_kernel<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    phase: usize,
) -> Vec<Vec<f64>> {
    let tables = model.phase(phase);
    let pi = &policy.kernels[phase % policy.period()];
    action_given_state(tables, pi)
        .iter()
        .enumerate()
        .map(|(s, ag)| {
            let mut row = vec![0.0; tables.num_states()];
            for (a, &w) in ag.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (sp, &p) in tables.transition[s][a].iter().enumerate() {
                    row[sp] += w * p;
                }
            }
            row
        })
        .collect()
}

/// `ag[s][a] = sum_o o(o|s) pi(a|o)`: action distribution conditioned on the
/// underlying state.
pub(crate) fn action_given_state(tables: &PomdpModel, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let na = tables.num_actions();
    tables
        .observation
        .iter()
        .map(|obs_row| {
            let mut ag = vec![0.0; na];
            for (o, &po) in obs_row.iter().enumerate() {
                if po == 0.0 {
                    continue;
                }
                for (a, &pa) in pi[o].iter().enumerate() {
                    ag[a] += po * pa;
                }
            }
            ag
        })
        .collect()
}

/// Stationary per-phase state marginals of the closed loop, by power
/// iteration on the `T`-step kernel at phase 0 followed by forward
/// propagation through the remaining phases.
///
/// Uniqueness presumes an ergodic induced chain; non-convergence within
/// [`STATIONARY_MAX_ITER`] is reported as an error and usually signals a
/// non-ergodic chain (see [`ergodicity_check`]).
pub fn stationary_phase_distributions<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    tolerance: f64,
) -> Result<PhaseDistribution, ModelError> {
    policy.validate_against(model)?;
    let kernels: Vec<Vec<Vec<f64>>> = (0..policy.period())
        .map(|t| policy_state_kernel(model, policy, t))
        .collect();
    stationary_from_kernels(&kernels, tolerance, None)
}

/// Same computation, reusing prebuilt per-phase kernels and an optional warm
/// starting vector for phase 0.
pub(crate) fn stationary_from_kernels(
    kernels: &[Vec<Vec<f64>>],
    tolerance: f64,
    warm_start: Option<&[f64]>,
) -> Result<PhaseDistribution, ModelError> {
    let ns = kernels[0].len();
    let cycle = compose_kernels(kernels);
    let mut x = match warm_start {
        Some(w) if w.len() == ns => w.to_vec(),
        _ => vec![1.0 / ns as f64; ns],
    };
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITER {
        let mut next = vec![0.0; ns];
        for (s, &mass) in x.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (sp, &p) in cycle[s].iter().enumerate() {
                next[sp] += mass * p;
            }
        }
        crate::math::normalize_l1(&mut next);
        residual = sup_diff(&x, &next);
        x = next;
        if residual < tolerance {
            let mut dists = Vec::with_capacity(kernels.len());
            dists.push(x.clone());
            for kernel in &kernels[..kernels.len() - 1] {
                let prev = dists.last().unwrap();
                let mut nxt = vec![0.0; ns];
                for (s, &mass) in prev.iter().enumerate() {
                    if mass == 0.0 {
                        continue;
                    }
                    for (sp, &p) in kernel[s].iter().enumerate() {
                        nxt[sp] += mass * p;
                    }
                }
                dists.push(nxt);
            }
            return Ok(PhaseDistribution { dists });
        }
    }
    Err(ModelError::StationaryNotConverged {
        iterations: STATIONARY_MAX_ITER,
        residual,
    })
}

fn compose_kernels(kernels: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let ns = kernels[0].len();
    let mut cycle: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            let mut row = vec![0.0; ns];
            row[s] = 1.0;
            row
        })
        .collect();
    for kernel in kernels {
        cycle = cycle
            .iter()
            .map(|row| {
                let mut out = vec![0.0; ns];
                for (mid, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (sp, &p) in kernel[mid].iter().enumerate() {
                        out[sp] += w * p;
                    }
                }
                out
            })
            .collect();
    }
    cycle
}

/// Structural diagnosis of the induced `T`-step chain at phase 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ergodicity {
    /// Irreducible and aperiodic: the stationary distribution is unique and
    /// power iteration converges.
    Ergodic,
    /// Some states cannot reach each other; the stationary distribution may
    /// depend on the initial condition.
    Reducible {
        /// Number of mutual-reachability classes.
        communicating_classes: usize,
    },
    /// Irreducible but the chain itself cycles with the given period, so the
    /// marginals oscillate instead of mixing.
    PeriodicChain {
        /// Period of the chain's cyclic structure.
        period: usize,
    },
}

/// Reachability diagnosis of the induced `T`-step chain. Purely diagnostic:
/// the solver and stationary computation proceed regardless and report their
/// own failures.
pub fn ergodicity_check<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
) -> Result<Ergodicity, ModelError> {
    policy.validate_against(model)?;
    let kernels: Vec<Vec<Vec<f64>>> = (0..policy.period())
        .map(|t| policy_state_kernel(model, policy, t))
        .collect();
    let cycle = compose_kernels(&kernels);
    let n = cycle.len();
    let adj: Vec<Vec<bool>> = cycle
        .iter()
        .map(|row| row.iter().map(|&p| p > 0.0).collect())
        .collect();
    let mut reach = adj.clone();
    for s in 0..n {
        reach[s][s] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut class_of = vec![usize::MAX; n];
    let mut classes = 0;
    for i in 0..n {
        if class_of[i] != usize::MAX {
            continue;
        }
        class_of[i] = classes;
        for j in (i + 1)..n {
            if reach[i][j] && reach[j][i] {
                class_of[j] = classes;
            }
        }
        classes += 1;
    }
    if classes > 1 {
        return Ok(Ergodicity::Reducible {
            communicating_classes: classes,
        });
    }
    // Irreducible: period of the chain is the gcd of d[u] + 1 - d[v] over
    // edges (u, v), with d the BFS levels from any root.
    let mut depth = vec![usize::MAX; n];
    let mut queue = alloc::collections::VecDeque::new();
    depth[0] = 0;
    queue.push_back(0usize);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if adj[u][v] && depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g: i64 = 0;
    for u in 0..n {
        for v in 0..n {
            if adj[u][v] {
                let diff = depth[u] as i64 + 1 - depth[v] as i64;
                g = gcd(g, diff.abs());
            }
        }
    }
    if g <= 1 {
        Ok(Ergodicity::Ergodic)
    } else {
        Ok(Ergodicity::PeriodicChain { period: g as usize })
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Posterior beliefs `b_t(s|o) = p_t(s) o(o|s) / obs_marginal_t(o)` per phase.
/// Zero-probability observations are flagged unsupported and excluded from
/// every downstream average.
pub fn compute_beliefs<M: PhasedPomdp>(model: &M, dist: &PhaseDistribution) -> BeliefTable {
    let mut beliefs = Vec::with_capacity(dist.period());
    let mut obs_marginals = Vec::with_capacity(dist.period());
    let mut support = Vec::with_capacity(dist.period());
    for (t, p_bar) in dist.dists.iter().enumerate() {
        let tables = model.phase(t);
        let no = tables.num_observations();
        let ns = tables.num_states();
        let mut sigma = vec![0.0; no];
        for (s, &mass) in p_bar.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (o, &po) in tables.observation[s].iter().enumerate() {
                sigma[o] += mass * po;
            }
        }
        let mut b_t = vec![vec![0.0; ns]; no];
        let mut sup_t = vec![false; no];
        for o in 0..no {
            if sigma[o] > 0.0 {
                sup_t[o] = true;
                for s in 0..ns {
                    b_t[o][s] = p_bar[s] * tables.observation[s][o] / sigma[o];
                }
            }
        }
        beliefs.push(b_t);
        obs_marginals.push(sigma);
        support.push(sup_t);
    }
    BeliefTable {
        beliefs,
        obs_marginals,
        support,
    }
}

/// Average external cost per step:
/// `C = (1/T) sum_t sum_{s,o,a} p_t(s) o(o|s) pi_t(a|o) c(s,a)`.
pub fn external_cost<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    dist: &PhaseDistribution,
) -> f64 {
    let t_len = policy.period();
    let mut total = 0.0;
    for t in 0..t_len {
        let tables = model.phase(t);
        let ag = action_given_state(tables, &policy.kernels[t]);
        let p_bar = &dist.dists[t % dist.period()];
        for (s, &mass) in p_bar.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &w) in ag[s].iter().enumerate() {
                total += mass * w * tables.cost[s][a];
            }
        }
    }
    total / t_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{robot, two_state};

    fn deterministic_two_state_policy() -> ReactivePolicy {
        // Phase 0 takes "right", phase 1 takes "left".
        ReactivePolicy::new(vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]]).unwrap()
    }

    #[test]
    fn validates_builtin_models() {
        validate_model(&two_state()).unwrap();
        validate_model(&robot()).unwrap();
    }

    #[test]
    fn rejects_bad_row_sum() {
        let mut m = two_state();
        m.transition[0][0][0] = 0.9;
        assert!(matches!(
            validate_model(&m),
            Err(ModelError::RowNotStochastic { table: "transition", .. })
        ));
    }

    #[test]
    fn near_stochastic_rows_renormalized() {
        let mut m = two_state();
        m.observation[0][0] = 1.0 - 3e-10;
        let v = validate_model(&m).unwrap();
        assert_eq!(v.observation[0][0], 1.0);
    }

    #[test]
    fn row_sum_error_names_state_and_action() {
        let mut m = two_state();
        m.transition[1][0][0] = 0.9;
        m.transition[1][0][1] = 0.0;
        match validate_model(&m) {
            Err(ModelError::RowNotStochastic { table, row, .. }) => {
                assert_eq!(table, "transition");
                assert_eq!(row, "(s=1, a=0)");
            }
            other => panic!("expected row-sum error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_probability() {
        let mut m = two_state();
        m.observation[0][0] = -0.1;
        assert!(matches!(
            validate_model(&m),
            Err(ModelError::InvalidProbability { table: "observation", .. })
        ));
    }

    #[test]
    fn rejects_duplicate_labels() {
        let mut m = two_state();
        m.states[1] = m.states[0].clone();
        assert!(matches!(validate_model(&m), Err(ModelError::BadLabels { .. })));
    }

    #[test]
    fn kernel_rows_are_stochastic_and_match_hand_computation() {
        let m = two_state();
        let pi = ReactivePolicy::new(vec![vec![vec![0.25, 0.75]]]).unwrap();
        let k = policy_state_kernel(&m, &pi, 0);
        // With a single uninformative observation the next state follows the
        // action distribution regardless of the current state.
        for row in &k {
            assert!(abs(row[0] - 0.25) < 1e-15);
            assert!(abs(row[1] - 0.75) < 1e-15);
        }
    }

    #[test]
    fn uniform_two_state_stationary_is_uniform() {
        let m = two_state();
        let pi = ReactivePolicy::uniform(1, 1, 2);
        let d = stationary_phase_distributions(&m, &pi, STATIONARY_TOL).unwrap();
        assert!(abs(d.dists[0][0] - 0.5) < 1e-12);
        assert!(abs(d.dists[0][1] - 0.5) < 1e-12);
        assert!(
            abs(external_cost(&m, &pi, &d) - (-0.5)) < 1e-12,
            "uniform closed loop earns the switch reward half the time"
        );
    }

    #[test]
    fn alternating_two_state_marginals_and_cost() {
        let m = two_state();
        let pi = deterministic_two_state_policy();
        let d = stationary_phase_distributions(&m, &pi, STATIONARY_TOL).unwrap();
        // Phase 0 sits on L (the phase-1 policy just moved left), phase 1 on R.
        assert!(sup_diff(&d.dists[0], &[1.0, 0.0]) < 1e-12);
        assert!(sup_diff(&d.dists[1], &[0.0, 1.0]) < 1e-12);
        assert!(abs(external_cost(&m, &pi, &d) - (-1.0)) < 1e-12);
    }

    #[test]
    fn stationary_advances_consistently() {
        let m = robot();
        let pi = ReactivePolicy::new(vec![vec![
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.7, 0.1, 0.1, 0.1],
        ]])
        .unwrap();
        let d = stationary_phase_distributions(&m, &pi, STATIONARY_TOL).unwrap();
        let k = policy_state_kernel(&m, &pi, 0);
        let mut advanced = vec![0.0; 4];
        for (s, &mass) in d.dists[0].iter().enumerate() {
            for (sp, &p) in k[s].iter().enumerate() {
                advanced[sp] += mass * p;
            }
        }
        assert!(sup_diff(&advanced, &d.dists[0]) < 10.0 * STATIONARY_TOL);
    }

    #[test]
    fn ergodicity_diagnoses() {
        let m = two_state();
        let uniform = ReactivePolicy::uniform(1, 1, 2);
        assert_eq!(ergodicity_check(&m, &uniform).unwrap(), Ergodicity::Ergodic);

        // "Always left" abandons R: reducible.
        let left = ReactivePolicy::new(vec![vec![vec![1.0, 0.0]]]).unwrap();
        assert!(matches!(
            ergodicity_check(&m, &left).unwrap(),
            Ergodicity::Reducible { .. }
        ));

        // Identity transitions freeze every state: reducible with |S| classes.
        let frozen = PomdpModel::new(
            vec!["a".into(), "b".into()],
            vec!["o".into()],
            vec!["stay".into()],
            vec![
                vec![vec![1.0, 0.0]],
                vec![vec![0.0, 1.0]],
            ],
            vec![vec![1.0], vec![1.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let stay = ReactivePolicy::uniform(1, 1, 1);
        assert_eq!(
            ergodicity_check(&frozen, &stay).unwrap(),
            Ergodicity::Reducible {
                communicating_classes: 2
            }
        );

        // Deterministic swap chain is irreducible but 2-periodic.
        let swap = PomdpModel::new(
            vec!["a".into(), "b".into()],
            vec!["o".into()],
            vec!["go".into()],
            vec![
                vec![vec![0.0, 1.0]],
                vec![vec![1.0, 0.0]],
            ],
            vec![vec![1.0], vec![1.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        assert_eq!(
            ergodicity_check(&swap, &stay).unwrap(),
            Ergodicity::PeriodicChain { period: 2 }
        );
    }

    #[test]
    fn beliefs_recover_bayes_rule() {
        let m = robot();
        let d = PhaseDistribution {
            dists: vec![vec![0.1, 0.2, 0.3, 0.4]],
        };
        let b = compute_beliefs(&m, &d);
        for o in 0..4 {
            assert!(b.support[0][o]);
            let mut sum = 0.0;
            let mut sigma = 0.0;
            for s in 0..4 {
                sigma += d.dists[0][s] * m.observation[s][o];
            }
            assert!(abs(sigma - b.obs_marginals[0][o]) < 1e-15);
            for s in 0..4 {
                let expect = d.dists[0][s] * m.observation[s][o] / sigma;
                assert!(abs(b.beliefs[0][o][s] - expect) < 1e-14);
                sum += b.beliefs[0][o][s];
            }
            assert!(abs(sum - 1.0) < 1e-12);
        }
        // Law of total probability: sum_o sigma(o) b(s|o) = p(s).
        for s in 0..4 {
            let mut tot = 0.0;
            for o in 0..4 {
                tot += b.obs_marginals[0][o] * b.beliefs[0][o][s];
            }
            assert!(abs(tot - d.dists[0][s]) < 1e-12);
        }
    }

    #[test]
    fn zero_probability_observation_masked() {
        // Second observation never occurs.
        let m = PomdpModel::new(
            vec!["s0".into(), "s1".into()],
            vec!["seen".into(), "never".into()],
            vec!["stay".into()],
            vec![
                vec![vec![0.5, 0.5]],
                vec![vec![0.5, 0.5]],
            ],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let d = PhaseDistribution {
            dists: vec![vec![0.5, 0.5]],
        };
        let b = compute_beliefs(&m, &d);
        assert!(b.support[0][0]);
        assert!(!b.support[0][1]);
        assert_eq!(b.obs_marginals[0][1], 0.0);
    }

    #[test]
    fn policy_mask_enforcement() {
        let base = two_state();
        let periodic = PeriodicPomdpModel::new(
            vec![base.clone(), base],
            vec![vec![true, false], vec![false, true]],
        )
        .unwrap();
        let ok = ReactivePolicy::new(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]).unwrap();
        ok.validate_against(&periodic).unwrap();
        let bad = ReactivePolicy::uniform(2, 1, 2);
        assert!(matches!(
            bad.validate_against(&periodic),
            Err(ModelError::DisallowedAction { .. })
        ));
        let wrong_period = ReactivePolicy::uniform(3, 1, 2);
        assert!(matches!(
            wrong_period.validate_against(&periodic),
            Err(ModelError::PolicyMismatch(_))
        ));
    }
}
