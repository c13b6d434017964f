//! Information accounting for periodic reactive policies: action marginals,
//! observation- and clock-information, pointwise informational costs,
//! distortion tables, and the free-energy objective.
//!
//! All information quantities are in nats (natural log); bits views divide
//! by ln 2. The conventions `0 ln 0 = 0` and `0 ln(0/0) = 0` apply
//! throughout.

use crate::math::{kl_term, ln, LN_2};
use crate::model::{BeliefTable, PhasedPomdp, ReactivePolicy};
use crate::solver::ValueFunction;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

/// Which objective a table was computed under: the plain per-phase form, or
/// the clock-aware form that also charges for attention to the phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Per-phase prior and pointwise cost `ln(pi_t/pi_bar_t)`.
    Plain,
    /// Phase-averaged prior and pointwise cost `ln(pi_t/pi_bar)`.
    ClockAware,
}

impl Variant {
    /// Select the variant from a clock-aware flag.
    pub fn from_clock_aware(clock_aware: bool) -> Self {
        if clock_aware {
            Variant::ClockAware
        } else {
            Variant::Plain
        }
    }

    /// Whether this is the clock-aware variant.
    pub fn clock_aware(self) -> bool {
        matches!(self, Variant::ClockAware)
    }
}

/// Action marginals of a policy under the closed loop's observation
/// distribution: per phase, and averaged over the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    /// `per_phase[t][a]`: marginal action distribution at phase `t`.
    pub per_phase: Vec<Vec<f64>>,
    /// `phase_averaged[a] = (1/T) sum_t per_phase[t][a]`.
    pub phase_averaged: Vec<f64>,
}

impl MarginalSet {
    /// Period covered.
    pub fn period(&self) -> usize {
        self.per_phase.len()
    }
}

/// The two information charges on a periodic policy, in nats per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoBreakdown {
    /// Average observation information `(1/T) sum_t I[o_t; a_t]`.
    pub obs_info: f64,
    /// Clock information `I[t; a_t]`: average KL of per-phase marginals
    /// from the phase-averaged marginal.
    pub clock_info: f64,
}

impl InfoBreakdown {
    /// Total information charged by the clock-aware objective.
    pub fn total(&self) -> f64 {
        self.obs_info + self.clock_info
    }

    /// Observation information in bits.
    pub fn obs_info_bits(&self) -> f64 {
        self.obs_info / LN_2
    }

    /// Clock information in bits.
    pub fn clock_info_bits(&self) -> f64 {
        self.clock_info / LN_2
    }

    /// Total information in bits.
    pub fn total_bits(&self) -> f64 {
        self.total() / LN_2
    }
}

/// Faults in information computations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfoError {
    /// The policy puts mass on an action its prior marginal never takes;
    /// impossible for marginals computed from the same policy, checked
    /// defensively.
    #[error("undefined divergence at phase {phase}, action {action}: policy mass with zero prior")]
    UndefinedDivergence {
        /// Policy phase.
        phase: usize,
        /// Action index.
        action: usize,
    },
    /// The trade-off rate must be positive and finite.
    #[error("invalid beta {beta}: must be positive and finite")]
    InvalidBeta {
        /// Offending value.
        beta: f64,
    },
}

/// Action marginals `pi_bar_t(a) = sum_o obs_marginal_t(o) pi_t(a|o)` and
/// their phase average.
pub fn marginal_policy(policy: &ReactivePolicy, beliefs: &BeliefTable) -> MarginalSet {
    let t_len = policy.period();
    assert_eq!(
        t_len,
        beliefs.obs_marginals.len(),
        "policy and beliefs must cover the same period"
    );
    let na = policy.kernels[0][0].len();
    let mut per_phase = Vec::with_capacity(t_len);
    let mut phase_averaged = vec![0.0; na];
    for t in 0..t_len {
        let mut row = vec![0.0; na];
        for (o, &w) in beliefs.obs_marginals[t].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &p) in policy.kernels[t][o].iter().enumerate() {
                row[a] += w * p;
            }
        }
        for a in 0..na {
            phase_averaged[a] += row[a];
        }
        per_phase.push(row);
    }
    for v in phase_averaged.iter_mut() {
        *v /= t_len as f64;
    }
    MarginalSet {
        per_phase,
        phase_averaged,
    }
}

/// KL of one distribution from another with the `0 ln 0` convention; errors
/// on genuine mass-without-prior at the given phase. Tiny negative rounding
/// residue is clamped to zero.
fn kl_checked(p: &[f64], q: &[f64], phase: usize) -> Result<f64, InfoError> {
    let mut kl = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa > 0.0 && qa == 0.0 {
            return Err(InfoError::UndefinedDivergence { phase, action: a });
        }
        kl += kl_term(pa, qa);
    }
    Ok(if kl < 0.0 { 0.0 } else { kl })
}

/// Observation information `(1/T) sum_t E_{obs} KL[pi_t(.|o) || pi_bar_t]`
/// and clock information `(1/T) sum_t KL[pi_bar_t || pi_bar]`.
///
/// Unsupported observations carry zero weight and are skipped.
pub fn information_costs(
    policy: &ReactivePolicy,
    beliefs: &BeliefTable,
    marginals: &MarginalSet,
) -> Result<InfoBreakdown, InfoError> {
    let t_len = policy.period();
    assert_eq!(t_len, marginals.period(), "marginals must cover the period");
    let mut obs_info = 0.0;
    let mut clock_info = 0.0;
    for t in 0..t_len {
        for (o, &w) in beliefs.obs_marginals[t].iter().enumerate() {
            if !beliefs.support[t][o] || w == 0.0 {
                continue;
            }
            obs_info += w * kl_checked(&policy.kernels[t][o], &marginals.per_phase[t], t)?;
        }
        clock_info += kl_checked(&marginals.per_phase[t], &marginals.phase_averaged, t)?;
    }
    Ok(InfoBreakdown {
        obs_info: obs_info / t_len as f64,
        clock_info: clock_info / t_len as f64,
    })
}

/// Free energy `F = I/beta + C`, where `I` is the observation information
/// alone (plain) or the total including the clock term (clock-aware).
pub fn free_energy(
    info: &InfoBreakdown,
    external: f64,
    beta: f64,
    clock_aware: bool,
) -> Result<f64, InfoError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(InfoError::InvalidBeta { beta });
    }
    let i = if clock_aware {
        info.total()
    } else {
        info.obs_info
    };
    Ok(i / beta + external)
}

/// Pointwise informational cost `i_t(o,a) = ln(pi_t(a|o)/prior(a))` with the
/// prior chosen by `variant`.
///
/// Entries with zero policy mass are reported as 0 (they carry zero weight
/// in every average); positive mass on a zero prior yields infinity. These
/// tables are diagnostic; the objective itself uses the closed-form KL sums
/// of [`information_costs`].
pub fn pointwise_info(
    policy: &ReactivePolicy,
    marginals: &MarginalSet,
    variant: Variant,
) -> Vec<Vec<Vec<f64>>> {
    let t_len = policy.period();
    assert_eq!(t_len, marginals.period(), "marginals must cover the period");
    (0..t_len)
        .map(|t| {
            let prior = match variant {
                Variant::Plain => &marginals.per_phase[t],
                Variant::ClockAware => &marginals.phase_averaged,
            };
            policy.kernels[t]
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(prior)
                        .map(|(&p, &q)| {
                            if p == 0.0 {
                                0.0
                            } else if q == 0.0 {
                                f64::INFINITY
                            } else {
                                ln(p / q)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Distortion of one phase: the exponent of the policy update, with
/// support and admissibility bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDistortion {
    /// The phase this table belongs to.
    pub phase: usize,
    /// Objective variant of the value function it was built from.
    pub variant: Variant,
    /// `values[o][a]`: expected immediate cost plus next-phase value under
    /// the belief. Rows for unsupported observations are zero-filled.
    pub values: Vec<Vec<f64>>,
    /// `supported[o]`: whether the observation occurs at this phase.
    pub supported: Vec<bool>,
    /// `allowed[a]`: admissibility of each action at this phase.
    pub allowed: Vec<bool>,
}

/// Distortions for every phase of a period.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionTable {
    /// One entry per phase, in order.
    pub phases: Vec<PhaseDistortion>,
}

impl DistortionTable {
    /// Build the distortion of every phase from one value function.
    pub fn compute<M: PhasedPomdp>(
        model: &M,
        beliefs: &BeliefTable,
        values: &ValueFunction,
    ) -> Self {
        let t_len = beliefs.obs_marginals.len();
        DistortionTable {
            phases: (0..t_len)
                .map(|t| distortion(model, beliefs, values, t))
                .collect(),
        }
    }

    /// The distortion of phase `t` (taken modulo the period).
    pub fn phase(&self, t: usize) -> &PhaseDistortion {
        &self.phases[t % self.phases.len()]
    }
}

/// Distortion `d_t(o,a) = sum_s b_t(s|o) (c(s,a) + sum_s' p(s'|s,a)
/// nu_{t+1}(s'))` for one phase, using the next phase's values cyclically.
pub fn distortion<M: PhasedPomdp>(
    model: &M,
    beliefs: &BeliefTable,
    values: &ValueFunction,
    phase: usize,
) -> PhaseDistortion {
    let t_len = beliefs.obs_marginals.len();
    assert_eq!(t_len, values.nu.len(), "values must cover the period");
    assert!(phase < t_len, "phase out of range");
    let tables = model.phase(phase);
    let (ns, no, na) = (
        tables.num_states(),
        tables.num_observations(),
        tables.num_actions(),
    );
    let nu_next = &values.nu[(phase + 1) % t_len];
    // Cost-to-go per (state, action), shared by every observation row.
    let mut togo = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let mut v = tables.cost[s][a];
            for (sp, &p) in tables.transition[s][a].iter().enumerate() {
                if p != 0.0 {
                    v += p * nu_next[sp];
                }
            }
            togo[s][a] = v;
        }
    }
    let mut rows = vec![vec![0.0; na]; no];
    let mut supported = vec![false; no];
    for o in 0..no {
        if !beliefs.support[phase][o] {
            continue;
        }
        supported[o] = true;
        for (s, &b) in beliefs.beliefs[phase][o].iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for a in 0..na {
                rows[o][a] += b * togo[s][a];
            }
        }
    }
    let allowed = match model.allowed(phase) {
        Some(mask) => mask.to_vec(),
        None => vec![true; na],
    };
    PhaseDistortion {
        phase,
        variant: values.variant,
        values: rows,
        supported,
        allowed,
    }
}
