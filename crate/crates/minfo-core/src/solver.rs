//! The free-energy optimizer: periodic backward value evaluation, the
//! exponential-family policy update, and the alternating schedule with
//! limit-cycle detection.
//!
//! One outer iteration: freeze the action marginals and the value function
//! for the current policy, then run the forward map (advance the state
//! marginal one step, re-derive that phase's policy from the frozen values)
//! until the trajectory of (marginal, policy) pairs closes a cycle. The
//! working period is a fixed buffer length (the largest admissible power of
//! two times the model's phase count, capped by `max_period`), so that
//! slowly growing oscillatory modes near a period-doubling point are never
//! truncated mid-flight; the effective period is classified afterwards by
//! cyclic-shift comparison, the buffer is collapsed to it, and the solution
//! is re-polished at the collapsed period.

use crate::info::{
    free_energy, information_costs, marginal_policy, InfoBreakdown, InfoError, MarginalSet,
    PhaseDistortion, Variant,
};
use crate::linalg;
use crate::math::{exp, ln, sup_diff, sup_diff_nested};
use crate::model::{
    compute_beliefs, external_cost, stationary_from_kernels, BeliefTable, Ergodicity,
    ModelError, PhaseDistribution, PhasedPomdp, PomdpModel, ReactivePolicy,
};
use crate::model::{ergodicity_check, STATIONARY_TOL};
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// A reported solution must reproduce itself through all four
/// self-consistency equations below this sup-norm bound to count as
/// converged.
pub const RESIDUAL_GATE: f64 = 1e-6;

/// Sup-norm tolerance for deciding that two phases of the working buffer
/// carry the same policy when classifying the effective period. Looser than
/// `cycle_tolerance` so that critical slowing near a bifurcation cannot
/// smear a genuine period across the classification.
const CLASSIFY_TOL: f64 = 1e-5;

/// Cap on forward steps inside one outer iteration.
const FORWARD_STEP_CAP: usize = 50_000;

/// Cap and tolerance for the damped value iteration fallback.
const VALUE_ITER_CAP: usize = 100_000;
const VALUE_ITER_TOL: f64 = 1e-12;
const VALUE_ITER_DAMPING: f64 = 0.9;

/// Unknown-count threshold up to which the periodic value system is solved
/// directly; larger systems fall back to damped iteration.
const DIRECT_SOLVE_LIMIT: usize = 512;

/// Hard failures: structurally invalid inputs or numerically degenerate
/// systems. Soft failures (non-convergence with a best-so-far answer) are
/// reported through [`SolveFailure`] instead.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    /// Options violate their invariants.
    #[error("invalid solver options: {reason}")]
    InvalidOptions {
        /// Human-readable cause.
        reason: String,
    },
    /// Model or policy validation failed.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Information computation failed (inconsistent supports).
    #[error(transparent)]
    Info(#[from] InfoError),
    /// No admissible action has positive updated weight for an observation.
    #[error("degenerate policy update at phase {phase}, observation {observation}: no admissible action has positive weight")]
    DegenerateUpdate {
        /// Phase of the failing update.
        phase: usize,
        /// Observation index.
        observation: usize,
    },
    /// The periodic value system is singular (degenerate closed loop).
    #[error("periodic value system is singular")]
    SingularValueSystem,
    /// The damped value iteration hit its cap.
    #[error("value iteration did not converge: residual {residual}")]
    ValueIterationDiverged {
        /// Final sup-norm residual.
        residual: f64,
    },
    /// `max_period` cannot accommodate the model's phase count.
    #[error("max_period {max_period} is below the model's {model_phases} phases")]
    PeriodInfeasible {
        /// Requested cap.
        max_period: usize,
        /// Phases of the model.
        model_phases: usize,
    },
    /// An initial policy's period does not divide the working period.
    #[error("initial policy period {period} does not divide the working period {working}")]
    BadInitPeriod {
        /// Period of the supplied policy.
        period: usize,
        /// Working buffer period.
        working: usize,
    },
}

/// Why a solve ended without a converged solution. The returned state is the
/// last fully evaluated one.
#[derive(Debug, Clone, PartialEq)]
pub enum SolveFailure {
    /// The forward trajectory did not close a cycle at the working period;
    /// carries the best cyclic candidate seen and its mismatch.
    CycleNotClosed {
        /// Lag with the smallest recent mismatch.
        best_period: usize,
        /// Sup-norm mismatch at that lag.
        mismatch: f64,
    },
    /// The outer loop hit `max_outer_iterations`.
    OuterIterationCap,
    /// The outer criteria were met but the final residuals exceed
    /// [`RESIDUAL_GATE`].
    ResidualGate {
        /// Largest residual.
        max_residual: f64,
    },
    /// A mid-run numeric failure; the state preceding it is returned.
    Stalled {
        /// Human-readable cause.
        reason: String,
    },
}

/// Tuning knobs for [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Trade-off rate between information and external cost.
    pub beta: f64,
    /// Charge for clock information and use the phase-averaged prior.
    pub clock_aware: bool,
    /// Cap on the representable policy period.
    pub max_period: usize,
    /// Sup-norm threshold for cycle closure and per-iteration policy drift.
    pub cycle_tolerance: f64,
    /// Threshold on the free-energy change across one outer iteration.
    pub fe_tolerance: f64,
    /// Cap on outer iterations per stage.
    pub max_outer_iterations: usize,
    /// Magnitude of the seeded symmetry-breaking noise added to the initial
    /// policy; zero keeps the initial policy exact.
    pub perturbation_scale: f64,
    /// Seed for the perturbation noise.
    pub rng_seed: u64,
}

impl SolverOptions {
    /// Defaults for a given trade-off rate.
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            clock_aware: true,
            max_period: 16,
            cycle_tolerance: 1e-8,
            fe_tolerance: 1e-9,
            max_outer_iterations: 10_000,
            perturbation_scale: 1e-3,
            rng_seed: 0,
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        let bad = |reason: String| Err(SolverError::InvalidOptions { reason });
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta {} must be positive and finite", self.beta));
        }
        if self.max_period < 1 {
            return bad(String::from("max_period must be at least 1"));
        }
        if !(self.cycle_tolerance > 0.0) {
            return bad(format!(
                "cycle_tolerance {} must be positive",
                self.cycle_tolerance
            ));
        }
        if !(self.fe_tolerance > 0.0) {
            return bad(format!("fe_tolerance {} must be positive", self.fe_tolerance));
        }
        if self.max_outer_iterations < 1 {
            return bad(String::from("max_outer_iterations must be at least 1"));
        }
        if !(self.perturbation_scale >= 0.0) || !self.perturbation_scale.is_finite() {
            return bad(format!(
                "perturbation_scale {} must be non-negative and finite",
                self.perturbation_scale
            ));
        }
        Ok(())
    }
}

/// Periodic relative values and per-phase free-energy offsets, under the
/// gauge `sum_s p_t(s) nu_t(s) = 0` per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    /// `nu[t][s]`: fluctuation of state `s` at phase `t` from the average
    /// free energy.
    pub nu: Vec<Vec<f64>>,
    /// `phi[t]`: per-phase free-energy offset; the phase average equals the
    /// free energy.
    pub phi: Vec<f64>,
    /// Which objective the values were computed under.
    pub variant: Variant,
}

/// Everything the solver derives from one policy: marginals, beliefs,
/// action marginals, and values.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Stationary per-phase state marginals.
    pub dist: PhaseDistribution,
    /// Beliefs and observation marginals.
    pub beliefs: BeliefTable,
    /// Per-phase and phase-averaged action marginals.
    pub marginals: MarginalSet,
    /// Relative values and offsets.
    pub values: ValueFunction,
}

/// Sup-norm self-consistency violations of the four stationarity equations:
/// forward marginal propagation, action marginal, backward value recursion,
/// and the exponential policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// One-step forward recursion violation.
    pub forward: f64,
    /// Action-marginal consistency violation.
    pub marginal: f64,
    /// Backward value recursion violation.
    pub backward: f64,
    /// Policy update self-consistency violation.
    pub policy: f64,
}

impl Residuals {
    /// Largest of the four residuals.
    pub fn max(&self) -> f64 {
        let mut m = self.forward;
        for v in [self.marginal, self.backward, self.policy] {
            if v > m {
                m = v;
            }
        }
        m
    }
}

/// Outcome summary of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    /// Trade-off rate the solve ran at.
    pub beta: f64,
    /// Whether the clock-aware objective was used.
    pub clock_aware: bool,
    /// Final free energy.
    pub free_energy: f64,
    /// Final average external cost per step.
    pub external_cost: f64,
    /// Final information breakdown.
    pub info: InfoBreakdown,
    /// Effective period of the final policy.
    pub detected_period: usize,
    /// Total outer iterations across all stages.
    pub outer_iterations: usize,
    /// Final self-consistency residuals.
    pub residuals: Residuals,
    /// Whether the outer criteria and the residual gate were both met.
    pub converged: bool,
    /// Reachability diagnosis of the final closed loop.
    pub ergodicity: Ergodicity,
    /// Free energy of the (perturbed) initial policy.
    pub initial_free_energy: f64,
    /// Largest single-iteration increase of the free energy observed; the
    /// schedule has no monotonicity guarantee, so increases are recorded
    /// rather than hidden.
    pub max_fe_step_increase: f64,
    /// Why the solve fell short, when it did.
    pub failure: Option<SolveFailure>,
}

/// A solved policy with its derived state and report.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// The final periodic policy.
    pub policy: ReactivePolicy,
    /// Derived stationary quantities for that policy.
    pub state: SolverState,
    /// Outcome summary.
    pub report: SolverReport,
}

/// Largest `model_phases * 2^k` not exceeding `max_period`.
fn working_period(model_phases: usize, max_period: usize) -> Result<usize, SolverError> {
    if max_period < model_phases {
        return Err(SolverError::PeriodInfeasible {
            max_period,
            model_phases,
        });
    }
    let mut t = model_phases;
    while t * 2 <= max_period {
        t *= 2;
    }
    Ok(t)
}

/// Expected running cost per state at one phase:
/// `r(s) = sum_{o,a} sigma(o|s) pi(a|o) ((1/beta) ln(pi(a|o)/prior(a)) + c(s,a))`.
///
/// Zero policy mass contributes nothing; an exactly zero log ratio
/// contributes nothing regardless of `beta`, which keeps the expression
/// defined at `beta = 0` on exact fixed points.
fn phase_running_cost(
    tables: &PomdpModel,
    pi_rows: &[Vec<f64>],
    prior: &[f64],
    beta: f64,
    phase: usize,
) -> Result<Vec<f64>, SolverError> {
    let na = tables.num_actions();
    // Per-(o,a) instantaneous cost component shared across states.
    let mut f_info = vec![vec![0.0; na]; pi_rows.len()];
    for (o, row) in pi_rows.iter().enumerate() {
        for (a, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if prior[a] == 0.0 {
                return Err(SolverError::Info(InfoError::UndefinedDivergence {
                    phase,
                    action: a,
                }));
            }
            let i = ln(p / prior[a]);
            f_info[o][a] = if i == 0.0 { 0.0 } else { i / beta };
        }
    }
    Ok((0..tables.num_states())
        .map(|s| {
            let mut r = 0.0;
            for (o, &po) in tables.observation[s].iter().enumerate() {
                if po == 0.0 {
                    continue;
                }
                for (a, &pa) in pi_rows[o].iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    r += po * pa * (f_info[o][a] + tables.cost[s][a]);
                }
            }
            r
        })
        .collect())
}

fn prior_for<'a>(marginals: &'a MarginalSet, variant: Variant, t: usize) -> &'a [f64] {
    match variant {
        Variant::Plain => &marginals.per_phase[t],
        Variant::ClockAware => &marginals.phase_averaged,
    }
}

/// Solve the periodic backward recursion for the relative values `nu` and
/// offsets `phi` under the per-phase gauge, directly as a linear system when
/// small enough, otherwise by damped backward sweeps.
pub fn evaluate_values<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    dist: &PhaseDistribution,
    marginals: &MarginalSet,
    beta: f64,
    clock_aware: bool,
) -> Result<ValueFunction, SolverError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(SolverError::InvalidOptions {
            reason: format!("beta {beta} must be non-negative and finite"),
        });
    }
    let t_len = policy.period();
    assert_eq!(t_len, dist.period(), "distribution must cover the period");
    assert_eq!(t_len, marginals.period(), "marginals must cover the period");
    let variant = Variant::from_clock_aware(clock_aware);
    let ns = model.num_states();
    let kernels: Vec<Vec<Vec<f64>>> = (0..t_len)
        .map(|t| crate::model::policy_state_kernel(model, policy, t))
        .collect();
    let costs: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            phase_running_cost(
                model.phase(t),
                &policy.kernels[t],
                prior_for(marginals, variant, t),
                beta,
                t,
            )
        })
        .collect::<Result<_, _>>()?;

    let unknowns = t_len * ns + t_len;
    if unknowns <= DIRECT_SOLVE_LIMIT {
        // Rows 0..T*S: nu_t(s) + phi_t - sum_s' P_t(s,s') nu_{t+1}(s') = r_t(s).
        // Rows T*S..: gauge sum_s p_t(s) nu_t(s) = 0.
        let n = unknowns;
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for t in 0..t_len {
            let tn = (t + 1) % t_len;
            for s in 0..ns {
                let row = t * ns + s;
                a[row * n + t * ns + s] += 1.0;
                a[row * n + t_len * ns + t] += 1.0;
                for (sp, &p) in kernels[t][s].iter().enumerate() {
                    a[row * n + tn * ns + sp] -= p;
                }
                b[row] = costs[t][s];
            }
            let row = t_len * ns + t;
            for s in 0..ns {
                a[row * n + t * ns + s] = dist.dists[t][s];
            }
            b[row] = 0.0;
        }
        linalg::solve_dense(&mut a, &mut b, n, 1e-12)
            .map_err(|_| SolverError::SingularValueSystem)?;
        let nu = (0..t_len)
            .map(|t| b[t * ns..(t + 1) * ns].to_vec())
            .collect();
        let phi = b[t_len * ns..].to_vec();
        return Ok(ValueFunction { nu, phi, variant });
    }

    // Damped cyclic backward sweeps with per-sweep gauge re-centering.
    let mut nu = vec![vec![0.0; ns]; t_len];
    let mut phi = vec![0.0; t_len];
    let mut residual = f64::INFINITY;
    for _ in 0..VALUE_ITER_CAP {
        residual = 0.0;
        for t in (0..t_len).rev() {
            let tn = (t + 1) % t_len;
            let mut raw = vec![0.0; ns];
            for s in 0..ns {
                let mut v = costs[t][s];
                for (sp, &p) in kernels[t][s].iter().enumerate() {
                    v += p * nu[tn][sp];
                }
                raw[s] = v;
            }
            let mut offset = 0.0;
            for s in 0..ns {
                offset += dist.dists[t][s] * raw[s];
            }
            phi[t] = offset;
            for s in 0..ns {
                let target = raw[s] - offset;
                let step = target - nu[t][s];
                let d = if step < 0.0 { -step } else { step };
                if d > residual {
                    residual = d;
                }
                nu[t][s] += VALUE_ITER_DAMPING * step;
            }
        }
        if residual < VALUE_ITER_TOL {
            // Final exact re-centering pass without damping.
            for t in (0..t_len).rev() {
                let tn = (t + 1) % t_len;
                let mut raw = vec![0.0; ns];
                for s in 0..ns {
                    let mut v = costs[t][s];
                    for (sp, &p) in kernels[t][s].iter().enumerate() {
                        v += p * nu[tn][sp];
                    }
                    raw[s] = v;
                }
                let mut offset = 0.0;
                for s in 0..ns {
                    offset += dist.dists[t][s] * raw[s];
                }
                phi[t] = offset;
                for s in 0..ns {
                    nu[t][s] = raw[s] - offset;
                }
            }
            return Ok(ValueFunction { nu, phi, variant });
        }
    }
    Err(SolverError::ValueIterationDiverged { residual })
}

/// One phase of the exponential-family policy update:
/// `pi(a|o) = prior(a) exp(-beta d(o,a)) / Z(o)` over admissible actions,
/// with max-subtraction inside the exponent for stability.
///
/// Rows for unsupported observations are filled with the prior restricted
/// to admissible actions (they carry no weight in any objective). With
/// `beta = 0` every row reduces to the restricted prior.
pub fn policy_update(
    beliefs: &BeliefTable,
    marginals: &MarginalSet,
    distortion: &PhaseDistortion,
    beta: f64,
) -> Result<Vec<Vec<f64>>, SolverError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(SolverError::InvalidOptions {
            reason: format!("beta {beta} must be non-negative and finite"),
        });
    }
    let t = distortion.phase;
    assert!(
        t < beliefs.support.len() && t < marginals.period(),
        "distortion phase out of range"
    );
    let prior = prior_for(marginals, distortion.variant, t);
    let na = distortion.allowed.len();
    let mut rows = Vec::with_capacity(distortion.values.len());
    for (o, d_row) in distortion.values.iter().enumerate() {
        let row = if distortion.supported[o] {
            update_row(prior, d_row, &distortion.allowed, beta)
                .ok_or(SolverError::DegenerateUpdate {
                    phase: t,
                    observation: o,
                })?
        } else {
            restricted_prior(prior, &distortion.allowed).ok_or(
                SolverError::DegenerateUpdate {
                    phase: t,
                    observation: o,
                },
            )?
        };
        debug_assert_eq!(row.len(), na);
        rows.push(row);
    }
    Ok(rows)
}

/// `prior(a) exp(-beta (d(o,a) - min_d))` over admissible actions with
/// positive prior, normalized; `None` when no such action exists.
fn update_row(prior: &[f64], d_row: &[f64], allowed: &[bool], beta: f64) -> Option<Vec<f64>> {
    let mut min_d = f64::INFINITY;
    for (a, &d) in d_row.iter().enumerate() {
        if allowed[a] && prior[a] > 0.0 && d < min_d {
            min_d = d;
        }
    }
    if min_d == f64::INFINITY {
        return None;
    }
    let mut row = vec![0.0; prior.len()];
    let mut z = 0.0;
    for (a, &d) in d_row.iter().enumerate() {
        if allowed[a] && prior[a] > 0.0 {
            let w = prior[a] * exp(-beta * (d - min_d));
            row[a] = w;
            z += w;
        }
    }
    if !(z > 0.0) || !z.is_finite() {
        return None;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
    Some(row)
}

fn restricted_prior(prior: &[f64], allowed: &[bool]) -> Option<Vec<f64>> {
    let mut row = vec![0.0; prior.len()];
    let mut z = 0.0;
    for (a, &p) in prior.iter().enumerate() {
        if allowed[a] && p > 0.0 {
            row[a] = p;
            z += p;
        }
    }
    if z > 0.0 {
        for v in row.iter_mut() {
            *v /= z;
        }
        Some(row)
    } else {
        None
    }
}

/// Self-consistency residuals of a (policy, state) pair: sup-norm violations
/// of the forward recursion, the action marginal, the backward recursion,
/// and the policy update. Unsupported observations are excluded from the
/// policy equation.
pub fn residuals<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    state: &SolverState,
    beta: f64,
    clock_aware: bool,
) -> Result<Residuals, SolverError> {
    let t_len = policy.period();
    let ns = model.num_states();
    let variant = Variant::from_clock_aware(clock_aware);
    let kernels: Vec<Vec<Vec<f64>>> = (0..t_len)
        .map(|t| crate::model::policy_state_kernel(model, policy, t))
        .collect();

    let mut forward: f64 = 0.0;
    for t in 0..t_len {
        let next = &state.dist.dists[(t + 1) % t_len];
        let mut pred = vec![0.0; ns];
        for (s, &mass) in state.dist.dists[t].iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (sp, &p) in kernels[t][s].iter().enumerate() {
                pred[sp] += mass * p;
            }
        }
        let d = sup_diff(&pred, next);
        if d > forward {
            forward = d;
        }
    }

    let fresh = marginal_policy(policy, &state.beliefs);
    let mut marginal = sup_diff_nested(&fresh.per_phase, &state.marginals.per_phase);
    let d = sup_diff(&fresh.phase_averaged, &state.marginals.phase_averaged);
    if d > marginal {
        marginal = d;
    }

    let mut backward: f64 = 0.0;
    for t in 0..t_len {
        let r = phase_running_cost(
            model.phase(t),
            &policy.kernels[t],
            prior_for(&state.marginals, variant, t),
            beta,
            t,
        )?;
        let nu_next = &state.values.nu[(t + 1) % t_len];
        for s in 0..ns {
            let mut pred = r[s] - state.values.phi[t];
            for (sp, &p) in kernels[t][s].iter().enumerate() {
                pred += p * nu_next[sp];
            }
            let d = state.values.nu[t][s] - pred;
            let d = if d < 0.0 { -d } else { d };
            if d > backward {
                backward = d;
            }
        }
    }

    let mut policy_res: f64 = 0.0;
    for t in 0..t_len {
        let dist_t = crate::info::distortion(model, &state.beliefs, &state.values, t);
        let target = policy_update(&state.beliefs, &state.marginals, &dist_t, beta)?;
        for (o, row) in policy.kernels[t].iter().enumerate() {
            if !state.beliefs.support[t][o] {
                continue;
            }
            let d = sup_diff(row, &target[o]);
            if d > policy_res {
                policy_res = d;
            }
        }
    }

    Ok(Residuals {
        forward,
        marginal,
        backward,
        policy: policy_res,
    })
}

/// Everything derived from one policy in one outer iteration.
struct Analysis {
    dist: PhaseDistribution,
    beliefs: BeliefTable,
    marginals: MarginalSet,
    external: f64,
    info: InfoBreakdown,
    fe: f64,
    values: ValueFunction,
}

fn analyze<M: PhasedPomdp>(
    model: &M,
    kernels_policy: &[Vec<Vec<f64>>],
    beta: f64,
    clock_aware: bool,
    warm_start: Option<&[f64]>,
) -> Result<Analysis, SolverError> {
    let policy = ReactivePolicy {
        kernels: kernels_policy.to_vec(),
    };
    let state_kernels: Vec<Vec<Vec<f64>>> = (0..policy.period())
        .map(|t| crate::model::policy_state_kernel(model, &policy, t))
        .collect();
    let dist = stationary_from_kernels(&state_kernels, STATIONARY_TOL, warm_start)?;
    let beliefs = compute_beliefs(model, &dist);
    let marginals = marginal_policy(&policy, &beliefs);
    let external = external_cost(model, &policy, &dist);
    let info = information_costs(&policy, &beliefs, &marginals)?;
    let fe = free_energy(&info, external, beta, clock_aware)?;
    let values = evaluate_values(model, &policy, &dist, &marginals, beta, clock_aware)?;
    Ok(Analysis {
        dist,
        beliefs,
        marginals,
        external,
        info,
        fe,
        values,
    })
}

struct Snapshot {
    p: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn snapshot_distance(a: &Snapshot, b: &Snapshot) -> f64 {
    let d1 = sup_diff(&a.p, &b.p);
    let d2 = sup_diff_nested(&a.rows, &b.rows);
    if d1 > d2 {
        d1
    } else {
        d2
    }
}

/// One forward pass: iterate (advance marginal, update policy) until the
/// trajectory closes a cycle of length `t_len`. Returns the cycled policy
/// or the best cyclic candidate on failure.
fn forward_pass<M: PhasedPomdp>(
    model: &M,
    policy: &[Vec<Vec<f64>>],
    analysis: &Analysis,
    beta: f64,
    clock_aware: bool,
    cycle_tolerance: f64,
) -> Result<Result<Vec<Vec<Vec<f64>>>, SolveFailure>, SolverError> {
    let t_len = policy.len();
    let ns = model.num_states();
    let variant = Variant::from_clock_aware(clock_aware);
    let m_phases = model.model_phases();

    // Frozen per-phase cost-to-go tables from the frozen values.
    let togo: Vec<Vec<Vec<f64>>> = (0..t_len)
        .map(|t| {
            let tables = model.phase(t);
            let nu_next = &analysis.values.nu[(t + 1) % t_len];
            (0..ns)
                .map(|s| {
                    (0..tables.num_actions())
                        .map(|a| {
                            let mut v = tables.cost[s][a];
                            for (sp, &p) in tables.transition[s][a].iter().enumerate() {
                                if p != 0.0 {
                                    v += p * nu_next[sp];
                                }
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut new_policy = policy.to_vec();
    let mut p = analysis.dist.dists[0].clone();
    let mut window: VecDeque<Snapshot> = VecDeque::with_capacity(2 * t_len + 2);
    let mut consec = 0usize;

    for step in 0..FORWARD_STEP_CAP {
        let t = step % t_len;
        let tables = model.phase(t);
        let (no, na) = (tables.num_observations(), tables.num_actions());

        // Beliefs under the running marginal.
        let mut sigma = vec![0.0; no];
        for (s, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (o, &po) in tables.observation[s].iter().enumerate() {
                sigma[o] += mass * po;
            }
        }
        let prior = prior_for(&analysis.marginals, variant, t);
        let allowed = model.allowed(t);
        for o in 0..no {
            if sigma[o] == 0.0 {
                continue; // unsupported: row left as-is
            }
            let mut d_row = vec![0.0; na];
            for s in 0..ns {
                let b = p[s] * tables.observation[s][o] / sigma[o];
                if b == 0.0 {
                    continue;
                }
                for a in 0..na {
                    d_row[a] += b * togo[t][s][a];
                }
            }
            let all_allowed = vec![true; na];
            let mask = allowed.unwrap_or(&all_allowed);
            new_policy[t][o] =
                update_row(prior, &d_row, mask, beta).ok_or(SolverError::DegenerateUpdate {
                    phase: t,
                    observation: o,
                })?;
        }

        // Advance the marginal under the freshly updated phase policy.
        let mut next = vec![0.0; ns];
        for (s, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let mut ag = vec![0.0; na];
            for (o, &po) in tables.observation[s].iter().enumerate() {
                if po == 0.0 {
                    continue;
                }
                for (a, &pa) in new_policy[t][o].iter().enumerate() {
                    ag[a] += po * pa;
                }
            }
            for (a, &w) in ag.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (sp, &pr) in tables.transition[s][a].iter().enumerate() {
                    next[sp] += mass * w * pr;
                }
            }
        }
        crate::math::normalize_l1(&mut next);

        window.push_back(Snapshot {
            p: p.clone(),
            rows: new_policy[t].clone(),
        });
        if window.len() > 2 * t_len + 1 {
            window.pop_front();
        }
        if window.len() > t_len {
            let a = &window[window.len() - 1];
            let b = &window[window.len() - 1 - t_len];
            if snapshot_distance(a, b) < cycle_tolerance {
                consec += 1;
                if consec >= t_len {
                    return Ok(Ok(new_policy));
                }
            } else {
                consec = 0;
            }
        }
        p = next;
    }

    // Not closed: report the most nearly cyclic lag over the final window.
    let w = window.len();
    let mut best_period = t_len;
    let mut best_mismatch = f64::INFINITY;
    let mut lag = m_phases;
    while lag <= t_len && lag < w {
        let checks = if lag < w - lag { lag } else { w - lag };
        let mut mismatch: f64 = 0.0;
        for i in 0..checks {
            let d = snapshot_distance(&window[w - 1 - i], &window[w - 1 - i - lag]);
            if d > mismatch {
                mismatch = d;
            }
        }
        if mismatch < best_mismatch {
            best_mismatch = mismatch;
            best_period = lag;
        }
        lag += m_phases;
    }
    Ok(Err(SolveFailure::CycleNotClosed {
        best_period,
        mismatch: best_mismatch,
    }))
}

/// Smallest admissible period (a multiple of the model's phase count,
/// dividing the buffer length) under which the buffer repeats within the
/// classification tolerance.
fn classify_period(
    policy: &[Vec<Vec<f64>>],
    dists: &[Vec<f64>],
    m_phases: usize,
) -> usize {
    let t_rep = policy.len();
    let mut p = m_phases;
    while p < t_rep {
        if t_rep % p == 0 {
            let mut ok = true;
            for t in 0..t_rep {
                let u = (t + p) % t_rep;
                if sup_diff_nested(&policy[t], &policy[u]) >= CLASSIFY_TOL
                    || sup_diff(&dists[t], &dists[u]) >= CLASSIFY_TOL
                {
                    ok = false;
                    break;
                }
            }
            if ok {
                return p;
            }
        }
        p *= 2;
    }
    t_rep
}

/// Average the buffer's repeats down to the classified period.
fn collapse_policy(policy: &[Vec<Vec<f64>>], period: usize) -> Vec<Vec<Vec<f64>>> {
    let reps = policy.len() / period;
    (0..period)
        .map(|t| {
            let (no, na) = (policy[t].len(), policy[t][0].len());
            let mut table = vec![vec![0.0; na]; no];
            for k in 0..reps {
                for o in 0..no {
                    for a in 0..na {
                        table[o][a] += policy[t + k * period][o][a];
                    }
                }
            }
            for row in table.iter_mut() {
                for v in row.iter_mut() {
                    *v /= reps as f64;
                }
                crate::math::normalize_l1(row);
            }
            table
        })
        .collect()
}

enum StageStatus {
    Converged,
    Failed(SolveFailure),
}

struct StageOutcome {
    status: StageStatus,
    policy: Vec<Vec<Vec<f64>>>,
    analysis: Analysis,
    iterations: usize,
}

/// Shared free-energy bookkeeping threaded across stages.
struct Bookkeeping {
    initial_fe: Option<f64>,
    prev_fe: Option<f64>,
    max_step_increase: f64,
}

/// Run the outer loop at a fixed working period until the free energy and
/// the per-iteration policy drift both settle.
fn run_stage<M: PhasedPomdp>(
    model: &M,
    options: &SolverOptions,
    mut policy: Vec<Vec<Vec<f64>>>,
    books: &mut Bookkeeping,
) -> Result<StageOutcome, SolverError> {
    let mut warm: Option<Vec<f64>> = None;
    let mut last_drift = f64::INFINITY;
    let mut iterations = 0usize;
    let mut prev_good: Option<(Vec<Vec<Vec<f64>>>, Analysis)> = None;

    loop {
        let analysis = match analyze(model, &policy, options.beta, options.clock_aware, warm.as_deref()) {
            Ok(a) => a,
            Err(e) => {
                // Roll back to the last fully evaluated iterate if one exists.
                if let Some((p, a)) = prev_good {
                    return Ok(StageOutcome {
                        status: StageStatus::Failed(SolveFailure::Stalled {
                            reason: format!("{e}"),
                        }),
                        policy: p,
                        analysis: a,
                        iterations,
                    });
                }
                return Err(e);
            }
        };
        warm = Some(analysis.dist.dists[0].clone());
        if books.initial_fe.is_none() {
            books.initial_fe = Some(analysis.fe);
        }
        let fe_settled = match books.prev_fe {
            Some(prev) => {
                let step = analysis.fe - prev;
                if step > books.max_step_increase {
                    books.max_step_increase = step;
                }
                let d = if step < 0.0 { -step } else { step };
                d < options.fe_tolerance
            }
            None => false,
        };
        books.prev_fe = Some(analysis.fe);
        if fe_settled && last_drift < options.cycle_tolerance {
            return Ok(StageOutcome {
                status: StageStatus::Converged,
                policy,
                analysis,
                iterations,
            });
        }
        if iterations >= options.max_outer_iterations {
            return Ok(StageOutcome {
                status: StageStatus::Failed(SolveFailure::OuterIterationCap),
                policy,
                analysis,
                iterations,
            });
        }
        let pass = forward_pass(
            model,
            &policy,
            &analysis,
            options.beta,
            options.clock_aware,
            options.cycle_tolerance,
        )?;
        iterations += 1;
        match pass {
            Ok(new_policy) => {
                last_drift = sup_diff3(&new_policy, &policy);
                prev_good = Some((policy, analysis));
                policy = new_policy;
            }
            Err(failure) => {
                return Ok(StageOutcome {
                    status: StageStatus::Failed(failure),
                    policy,
                    analysis,
                    iterations,
                });
            }
        }
    }
}

fn sup_diff3(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut m: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = sup_diff_nested(x, y);
        if d > m {
            m = d;
        }
    }
    m
}

/// Uniform-over-admissible policy at the given period.
fn uniform_policy<M: PhasedPomdp>(model: &M, t_len: usize) -> Vec<Vec<Vec<f64>>> {
    let (no, na) = (model.num_observations(), model.num_actions());
    (0..t_len)
        .map(|t| {
            let row = match model.allowed(t) {
                Some(mask) => {
                    let k = mask.iter().filter(|&&x| x).count();
                    mask.iter()
                        .map(|&x| if x { 1.0 / k as f64 } else { 0.0 })
                        .collect::<Vec<f64>>()
                }
                None => vec![1.0 / na as f64; na],
            };
            vec![row; no]
        })
        .collect()
}

/// Add seeded symmetry-breaking noise of the given magnitude to every
/// admissible entry, clamping at zero and renormalizing. A zero scale
/// leaves the policy bit-identical.
fn perturb_policy<M: PhasedPomdp>(
    model: &M,
    policy: &mut [Vec<Vec<f64>>],
    scale: f64,
    seed: u64,
) {
    if scale == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (t, table) in policy.iter_mut().enumerate() {
        let allowed = model.allowed(t).map(|m| m.to_vec());
        for row in table.iter_mut() {
            let mut total = 0.0;
            for (a, v) in row.iter_mut().enumerate() {
                if allowed.as_ref().map_or(true, |m| m[a]) {
                    let noise: f64 = rng.gen_range(-1.0..1.0);
                    *v += scale * noise;
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                } else {
                    *v = 0.0;
                }
                total += *v;
            }
            if total > 0.0 {
                for v in row.iter_mut() {
                    *v /= total;
                }
            } else {
                // All mass clamped away: fall back to uniform over admissible.
                let k = match &allowed {
                    Some(m) => m.iter().filter(|&&x| x).count(),
                    None => row.len(),
                };
                for (a, v) in row.iter_mut().enumerate() {
                    *v = if allowed.as_ref().map_or(true, |m| m[a]) {
                        1.0 / k as f64
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Minimize the free energy from the default (uniform plus seeded noise)
/// initialization. Returns a hard error for invalid inputs; non-convergence
/// is reported softly through the report's `converged` and `failure` fields.
pub fn solve<M: PhasedPomdp>(model: &M, options: &SolverOptions) -> Result<Solution, SolverError> {
    options.validate()?;
    let t_rep = working_period(model.model_phases(), options.max_period)?;
    let init = ReactivePolicy {
        kernels: uniform_policy(model, t_rep),
    };
    solve_with_init(model, options, &init)
}

/// Minimize the free energy starting from a given policy (extended
/// cyclically to the working period), with the options' seeded perturbation
/// applied on top.
pub fn solve_with_init<M: PhasedPomdp>(
    model: &M,
    options: &SolverOptions,
    init: &ReactivePolicy,
) -> Result<Solution, SolverError> {
    options.validate()?;
    let t_rep = working_period(model.model_phases(), options.max_period)?;
    init.validate_against(model)?;
    if t_rep % init.period() != 0 {
        return Err(SolverError::BadInitPeriod {
            period: init.period(),
            working: t_rep,
        });
    }
    let mut policy: Vec<Vec<Vec<f64>>> = (0..t_rep)
        .map(|t| init.kernels[t % init.period()].clone())
        .collect();
    perturb_policy(model, &mut policy, options.perturbation_scale, options.rng_seed);

    let mut books = Bookkeeping {
        initial_fe: None,
        prev_fe: None,
        max_step_increase: 0.0,
    };
    let mut total_iterations = 0usize;
    let mut period = t_rep;
    let mut outcome = run_stage(model, options, policy, &mut books)?;
    total_iterations += outcome.iterations;
    while matches!(outcome.status, StageStatus::Converged) {
        let classified = classify_period(
            &outcome.policy,
            &outcome.analysis.dist.dists,
            model.model_phases(),
        );
        if classified == period {
            break;
        }
        period = classified;
        let collapsed = collapse_policy(&outcome.policy, classified);
        outcome = run_stage(model, options, collapsed, &mut books)?;
        total_iterations += outcome.iterations;
    }

    let policy = ReactivePolicy::new(outcome.policy)?;
    let analysis = outcome.analysis;
    let state = SolverState {
        dist: analysis.dist,
        beliefs: analysis.beliefs,
        marginals: analysis.marginals,
        values: analysis.values,
    };
    let res = residuals(model, &policy, &state, options.beta, options.clock_aware)?;
    let (mut converged, mut failure) = match outcome.status {
        StageStatus::Converged => (true, None),
        StageStatus::Failed(f) => (false, Some(f)),
    };
    if converged && res.max() >= RESIDUAL_GATE {
        converged = false;
        failure = Some(SolveFailure::ResidualGate {
            max_residual: res.max(),
        });
    }
    let detected_period = classify_period(
        &policy.kernels,
        &state.dist.dists,
        model.model_phases(),
    );
    let ergodicity = ergodicity_check(model, &policy)?;
    let report = SolverReport {
        beta: options.beta,
        clock_aware: options.clock_aware,
        free_energy: analysis.fe,
        external_cost: analysis.external,
        info: analysis.info,
        detected_period,
        outer_iterations: total_iterations,
        residuals: res,
        converged,
        ergodicity,
        initial_free_energy: books.initial_fe.unwrap_or(analysis.fe),
        max_fe_step_increase: books.max_step_increase,
        failure,
    };
    Ok(Solution {
        policy,
        state,
        report,
    })
}
