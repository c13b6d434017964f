//! Trade-off sweeps: solve across a grid of rates, locate period changes,
//! and refine their brackets by bisection.

use crate::math::{exp, ln};
use crate::model::{PhasedPomdp, ReactivePolicy};
use crate::solver::{solve, solve_with_init, Solution, SolverError, SolverOptions};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Retry budget for non-converged solves during refinement.
const REFINE_RETRIES: usize = 3;
/// Cap on total solve calls in one refinement.
const REFINE_EVAL_CAP: usize = 60;

/// How successive sweep points are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Start each point from the previous converged point's policy (plus the
    /// seeded perturbation), tracking one solution branch.
    Warm,
    /// Start every point from the uniform policy independently.
    Cold,
}

/// One solved point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Trade-off rate of this point.
    pub beta: f64,
    /// Minimized free energy.
    pub free_energy: f64,
    /// Average external cost per step.
    pub external_cost: f64,
    /// Observation information in nats per step.
    pub obs_info_nats: f64,
    /// Clock information in nats per step.
    pub clock_info_nats: f64,
    /// Effective period of the solution.
    pub period: usize,
    /// The solved policy.
    pub policy_snapshot: ReactivePolicy,
    /// Whether the solve met every convergence criterion.
    pub converged: bool,
}

/// A change of effective period between two adjacent converged sweep points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BifurcationEvent {
    /// Rate of the last point with the old period.
    pub beta_low: f64,
    /// Rate of the first point with the new period.
    pub beta_high: f64,
    /// Period at and below `beta_low`.
    pub period_before: usize,
    /// Period at `beta_high`.
    pub period_after: usize,
}

/// Outcome of a bracket refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    /// The refined (or original, when lost) bracket.
    pub event: BifurcationEvent,
    /// True when the bracket could not be established or was destroyed by
    /// repeated non-convergence; `event` then holds the best known bracket.
    pub bracket_lost: bool,
    /// Total solve calls spent, retries included.
    pub evaluations: usize,
}

/// Logarithmically spaced grid from `min` to `max` inclusive.
pub fn log_grid(min: f64, max: f64, n: usize) -> Vec<f64> {
    assert!(min > 0.0, "grid minimum must be positive");
    assert!(max >= min, "grid maximum must not be below the minimum");
    assert!(n >= 1, "grid needs at least one point");
    if n == 1 {
        return alloc::vec![min];
    }
    let (lo, hi) = (ln(min), ln(max));
    (0..n)
        .map(|k| {
            if k == 0 {
                min
            } else if k == n - 1 {
                max
            } else {
                exp(lo + (hi - lo) * k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Solve along a strictly increasing grid of trade-off rates. Each point
/// draws its own perturbation seed from the options' seed, so the whole
/// sweep is reproducible; in warm mode each point starts from the most
/// recent converged policy.
pub fn sweep<M: PhasedPomdp>(
    model: &M,
    beta_grid: &[f64],
    options: &SolverOptions,
    mode: SweepMode,
) -> Result<Vec<SweepPoint>, SolverError> {
    for pair in beta_grid.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(SolverError::InvalidOptions {
                reason: format!(
                    "beta grid must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                ),
            });
        }
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(options.rng_seed);
    let mut points = Vec::with_capacity(beta_grid.len());
    let mut warm_policy: Option<ReactivePolicy> = None;
    for &beta in beta_grid {
        let point_options = SolverOptions {
            beta,
            rng_seed: seeder.next_u64(),
            ..options.clone()
        };
        let solution = match (mode, &warm_policy) {
            (SweepMode::Warm, Some(prev)) => solve_with_init(model, &point_options, prev)?,
            _ => solve(model, &point_options)?,
        };
        if mode == SweepMode::Warm && solution.report.converged {
            warm_policy = Some(solution.policy.clone());
        }
        points.push(to_point(beta, solution));
    }
    Ok(points)
}

fn to_point(beta: f64, solution: Solution) -> SweepPoint {
    SweepPoint {
        beta,
        free_energy: solution.report.free_energy,
        external_cost: solution.report.external_cost,
        obs_info_nats: solution.report.info.obs_info,
        clock_info_nats: solution.report.info.clock_info,
        period: solution.report.detected_period,
        policy_snapshot: solution.policy,
        converged: solution.report.converged,
    }
}

/// Adjacent converged sweep points whose effective periods differ.
/// Non-converged points are skipped, so each event brackets the change
/// between trusted solutions.
pub fn detect_bifurcations(points: &[SweepPoint]) -> Vec<BifurcationEvent> {
    let mut events = Vec::new();
    let mut prev: Option<&SweepPoint> = None;
    for p in points.iter().filter(|p| p.converged) {
        if let Some(q) = prev {
            if q.period != p.period {
                events.push(BifurcationEvent {
                    beta_low: q.beta,
                    beta_high: p.beta,
                    period_before: q.period,
                    period_after: p.period,
                });
            }
        }
        prev = Some(p);
    }
    events
}

/// Solve at one rate, retrying with fresh seeds until convergence or the
/// retry budget runs out. Returns `None` when no attempt converged.
fn converged_solve<M: PhasedPomdp>(
    model: &M,
    options: &SolverOptions,
    beta: f64,
    init: Option<&ReactivePolicy>,
    seeder: &mut ChaCha8Rng,
    evaluations: &mut usize,
) -> Result<Option<Solution>, SolverError> {
    for _ in 0..REFINE_RETRIES {
        if *evaluations >= REFINE_EVAL_CAP {
            return Ok(None);
        }
        let point_options = SolverOptions {
            beta,
            rng_seed: seeder.next_u64(),
            ..options.clone()
        };
        *evaluations += 1;
        let solution = match init {
            Some(prev) => solve_with_init(model, &point_options, prev)?,
            None => solve(model, &point_options)?,
        };
        if solution.report.converged {
            return Ok(Some(solution));
        }
    }
    Ok(None)
}

/// Narrow a period-change bracket by bisection until it is at most
/// `target_width` wide. Midpoints warm-start from the low side's policy;
/// a midpoint whose period differs from the low side's becomes the new high
/// side. Repeated non-convergence abandons the refinement with the best
/// bracket found so far.
pub fn refine_bifurcation<M: PhasedPomdp>(
    model: &M,
    event: &BifurcationEvent,
    options: &SolverOptions,
    target_width: f64,
) -> Result<RefineReport, SolverError> {
    if !(target_width > 0.0) || !target_width.is_finite() {
        return Err(SolverError::InvalidOptions {
            reason: String::from("target_width must be positive and finite"),
        });
    }
    if !(event.beta_low > 0.0) || !(event.beta_high > event.beta_low) {
        return Err(SolverError::InvalidOptions {
            reason: String::from("bifurcation bracket must satisfy 0 < beta_low < beta_high"),
        });
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(options.rng_seed);
    let mut evaluations = 0usize;
    let lost = |evaluations: usize, best: BifurcationEvent| RefineReport {
        event: best,
        bracket_lost: true,
        evaluations,
    };

    let low = match converged_solve(model, options, event.beta_low, None, &mut seeder, &mut evaluations)? {
        Some(s) => s,
        None => return Ok(lost(evaluations, *event)),
    };
    let high = match converged_solve(model, options, event.beta_high, None, &mut seeder, &mut evaluations)? {
        Some(s) => s,
        None => return Ok(lost(evaluations, *event)),
    };
    let period_before = low.report.detected_period;
    let mut current = BifurcationEvent {
        beta_low: event.beta_low,
        beta_high: event.beta_high,
        period_before,
        period_after: high.report.detected_period,
    };
    if current.period_after == period_before {
        return Ok(lost(evaluations, *event));
    }

    let mut low_policy = low.policy;
    while current.beta_high - current.beta_low > target_width
        && evaluations < REFINE_EVAL_CAP
    {
        let mid = 0.5 * (current.beta_low + current.beta_high);
        let solution = match converged_solve(
            model,
            options,
            mid,
            Some(&low_policy),
            &mut seeder,
            &mut evaluations,
        )? {
            Some(s) => s,
            None => return Ok(lost(evaluations, current)),
        };
        if solution.report.detected_period == period_before {
            current.beta_low = mid;
            low_policy = solution.policy;
        } else {
            current.beta_high = mid;
            current.period_after = solution.report.detected_period;
        }
    }
    Ok(RefineReport {
        event: current,
        bracket_lost: current.beta_high - current.beta_low > target_width,
        evaluations,
    })
}
