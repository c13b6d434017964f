//! Monte Carlo verification: sample the closed loop generatively and
//! compare empirical statistics against the analytic stationary quantities.

use crate::math::{kl_term, ln, sqrt};
use crate::model::{
    external_cost, stationary_phase_distributions, ModelError, PhasedPomdp, ReactivePolicy,
    STATIONARY_TOL,
};
use crate::solver::SolverState;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Burn-in floor applied when no analytic stationary start is available.
const FALLBACK_BURN_IN: usize = 1000;

/// Occupancy agreement threshold scale: the sup deviation of a multinomial
/// frequency over `n` cycles concentrates below about `2.5 / sqrt(n)`.
const OCCUPANCY_Z: f64 = 2.5;

/// Rollout and crosscheck failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    /// Policy or model rejected.
    #[error(transparent)]
    Model(#[from] ModelError),
    /// Too few steps for even one full period.
    #[error("{steps} steps cannot cover one period of {period}")]
    TooFewSteps {
        /// Requested steps.
        steps: usize,
        /// Policy period.
        period: usize,
    },
    /// Rollout and analytic state describe different periods.
    #[error("rollout period {rollout} does not match analytic period {analytic}")]
    PeriodMismatch {
        /// Period of the rollout statistics.
        rollout: usize,
        /// Period of the analytic state.
        analytic: usize,
    },
}

/// Empirical statistics of one seeded rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStats {
    /// Collected steps (whole cycles only).
    pub steps: usize,
    /// Burn-in steps actually consumed (rounded up to whole cycles).
    pub burn_in: usize,
    /// RNG seed.
    pub seed: u64,
    /// Policy period.
    pub period: usize,
    /// Mean cost per step.
    pub empirical_cost: f64,
    /// Standard error of the per-cycle cost means (infinite below 2 cycles).
    pub cost_standard_error: f64,
    /// `occupancy[t][s]`: visit frequency per phase.
    pub occupancy: Vec<Vec<f64>>,
    /// Plug-in estimate of the observation information, nats per step.
    pub empirical_obs_info: f64,
    /// Plug-in estimate of the clock information, nats per step.
    pub empirical_clock_info: f64,
    /// Number of collected cycles.
    pub cycles: usize,
}

/// Comparison of a rollout against the analytic stationary description.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscheckReport {
    /// Analytic mean cost per step.
    pub analytic_cost: f64,
    /// Cost discrepancy in standard errors (0 when exact).
    pub cost_z: f64,
    /// Sup deviation between empirical and analytic occupancies.
    pub occupancy_sup_deviation: f64,
    /// Whether the cost discrepancy is within three standard errors.
    pub cost_within_3se: bool,
    /// Whether the occupancy deviation is within the multinomial threshold.
    pub occupancy_consistent: bool,
}

fn sample(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left a sliver above the accumulated mass.
    last_positive
}

/// Sample the closed loop: state, observation, action, next state, phase by
/// phase. The start state is drawn from the analytic stationary marginal
/// when the power iteration converges; otherwise the start is uniform and
/// the burn-in is raised to at least [`FALLBACK_BURN_IN`]. Burn-in is
/// rounded up to whole cycles so collection always starts at phase 0, and
/// only whole cycles are collected.
pub fn rollout<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<RolloutStats, SimError> {
    policy.validate_against(model)?;
    let t_len = policy.period();
    let ns = model.num_states();
    let cycles = steps / t_len;
    if cycles == 0 {
        return Err(SimError::TooFewSteps {
            steps,
            period: t_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (mut s, burn_in) = match stationary_phase_distributions(model, policy, STATIONARY_TOL) {
        Ok(dist) => {
            let s0 = sample(&mut rng, &dist.dists[0]);
            (s0, burn_in.div_ceil(t_len) * t_len)
        }
        Err(_) => {
            let s0 = rng.gen_range(0..ns);
            let raised = if burn_in < FALLBACK_BURN_IN {
                FALLBACK_BURN_IN
            } else {
                burn_in
            };
            (s0, raised.div_ceil(t_len) * t_len)
        }
    };

    for tau in 0..burn_in {
        let t = tau % t_len;
        let tables = model.phase(t);
        let o = sample(&mut rng, &tables.observation[s]);
        let a = sample(&mut rng, &policy.kernels[t][o]);
        s = sample(&mut rng, &tables.transition[s][a]);
    }

    let na = model.num_actions();
    let no = model.num_observations();
    let mut occupancy_counts = vec![vec![0u64; ns]; t_len];
    let mut oa_counts = vec![vec![vec![0u64; na]; no]; t_len];
    let mut cycle_costs = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let mut cycle_cost = 0.0;
        for t in 0..t_len {
            let tables = model.phase(t);
            occupancy_counts[t][s] += 1;
            let o = sample(&mut rng, &tables.observation[s]);
            let a = sample(&mut rng, &policy.kernels[t][o]);
            cycle_cost += tables.cost[s][a];
            oa_counts[t][o][a] += 1;
            s = sample(&mut rng, &tables.transition[s][a]);
        }
        cycle_costs.push(cycle_cost / t_len as f64);
    }

    let n_c = cycles as f64;
    let empirical_cost = cycle_costs.iter().sum::<f64>() / n_c;
    let cost_standard_error = if cycles < 2 {
        f64::INFINITY
    } else {
        let var = cycle_costs
            .iter()
            .map(|&c| (c - empirical_cost) * (c - empirical_cost))
            .sum::<f64>()
            / (n_c - 1.0);
        sqrt(var / n_c)
    };
    let occupancy = occupancy_counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / n_c).collect())
        .collect();

    // Plug-in information estimates from the (phase, observation, action)
    // counts. Empirical marginals are exact count ratios, so no divergence
    // can be undefined.
    let mut obs_info = 0.0;
    let mut clock_info = 0.0;
    let mut grand_marginal = vec![0.0; na];
    let mut phase_marginals = vec![vec![0.0; na]; t_len];
    for t in 0..t_len {
        for o in 0..no {
            for a in 0..na {
                phase_marginals[t][a] += oa_counts[t][o][a] as f64 / n_c;
            }
        }
        for a in 0..na {
            grand_marginal[a] += phase_marginals[t][a] / t_len as f64;
        }
    }
    for t in 0..t_len {
        for o in 0..no {
            let n_o: u64 = oa_counts[t][o].iter().sum();
            if n_o == 0 {
                continue;
            }
            let w = n_o as f64 / n_c;
            let mut kl = 0.0;
            for a in 0..na {
                let c = oa_counts[t][o][a];
                if c == 0 {
                    continue;
                }
                let p = c as f64 / n_o as f64;
                kl += p * ln(p / phase_marginals[t][a]);
            }
            obs_info += w * if kl < 0.0 { 0.0 } else { kl };
        }
        let mut kl = 0.0;
        for a in 0..na {
            kl += kl_term(phase_marginals[t][a], grand_marginal[a]);
        }
        clock_info += if kl < 0.0 { 0.0 } else { kl };
    }

    Ok(RolloutStats {
        steps: cycles * t_len,
        burn_in,
        seed,
        period: t_len,
        empirical_cost,
        cost_standard_error,
        occupancy,
        empirical_obs_info: obs_info / t_len as f64,
        empirical_clock_info: clock_info / t_len as f64,
        cycles,
    })
}

/// Compare a rollout against the analytic stationary state of the same
/// policy: cost discrepancy in standard errors and sup deviation of the
/// per-phase occupancies. With fewer than two cycles the standard error is
/// infinite and the cost check is vacuously satisfied.
pub fn crosscheck<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    stats: &RolloutStats,
    analytic: &SolverState,
) -> Result<CrosscheckReport, SimError> {
    if stats.period != analytic.dist.period() {
        return Err(SimError::PeriodMismatch {
            rollout: stats.period,
            analytic: analytic.dist.period(),
        });
    }
    let analytic_cost = external_cost(model, policy, &analytic.dist);
    let diff = stats.empirical_cost - analytic_cost;
    let cost_z = if diff == 0.0 {
        0.0
    } else {
        diff / stats.cost_standard_error
    };
    let mut dev: f64 = 0.0;
    for (emp, ana) in stats.occupancy.iter().zip(&analytic.dist.dists) {
        let d = crate::math::sup_diff(emp, ana);
        if d > dev {
            dev = d;
        }
    }
    let abs_diff = if diff < 0.0 { -diff } else { diff };
    Ok(CrosscheckReport {
        analytic_cost,
        cost_z,
        occupancy_sup_deviation: dev,
        cost_within_3se: abs_diff <= 3.0 * stats.cost_standard_error,
        occupancy_consistent: dev <= OCCUPANCY_Z / sqrt(stats.cycles as f64),
    })
}
