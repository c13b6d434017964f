//! Minimum-information reactive policies for finite partially observed Markov
//! decision processes.
//!
//! A reactive agent picks each action from the current observation alone
//! through a periodic stochastic policy `pi_t(a|o)` with period `T`. Under an
//! ergodic closed loop the long-run behaviour is summarised by per-phase state
//! marginals, and the agent is scored by a free-energy objective
//!
//! ```text
//! F = I / beta + C
//! ```
//!
//! where `C` is the average external cost and `I` the average information rate
//! of the policy, optionally including the cost of consulting the phase clock.
//! The crate provides:
//!
//! * [`model`]: model and policy containers, validation, induced state
//!   kernels, stationary phase distributions, beliefs, external cost;
//! * [`info`]: action marginals, information costs, free energy, distortions;
//! * [`solver`]: self-consistent solver for the optimality conditions, value
//!   functions, residual diagnostics;
//! * [`sweep`]: free-energy sweeps over the trade-off parameter `beta` and
//!   period-doubling bifurcation detection/refinement;
//! * [`reduction`]: flattening of a retentive (memory-carrying) agent into an
//!   equivalent two-phase reactive model;
//! * [`sim`]: seeded Monte Carlo rollouts cross-checking the analytic
//!   quantities;
//! * [`models`]: small built-in example models.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only toggles `std`-based error trait plumbing in dependencies.
//! All transcendental math goes through `libm`, so results are bit-identical
//! with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(missing_docs)]

extern crate alloc;

pub mod info;
mod linalg;
mod math;
pub mod model;
pub mod models;
pub mod reduction;
pub mod sim;
pub mod solver;
pub mod sweep;

pub use info::{
    distortion, free_energy, information_costs, marginal_policy, pointwise_info, DistortionTable,
    InfoBreakdown, InfoError, MarginalSet, PhaseDistortion, Variant,
};
pub use model::{
    compute_beliefs, ergodicity_check, external_cost, policy_state_kernel,
    stationary_phase_distributions, validate_model, BeliefTable, Ergodicity, ModelError,
    PeriodicPomdpModel, PhaseDistribution, PhasedPomdp, PomdpModel, ReactivePolicy,
};
pub use reduction::{
    build_reduced_pomdp, build_reduced_pomdp_with_penalty, check_equivalence,
    embed_retentive_policy, ActionKind, EquivalenceReport, ReducedModel, ReductionError,
    RetentiveSetup,
};
pub use sim::{crosscheck, rollout, CrosscheckReport, RolloutStats, SimError};
pub use solver::{
    evaluate_values, policy_update, residuals, solve, solve_with_init, Residuals, SolveFailure,
    Solution, SolverError, SolverOptions, SolverReport, SolverState, ValueFunction,
};
pub use sweep::{
    detect_bifurcations, log_grid, refine_bifurcation, sweep, BifurcationEvent, RefineReport,
    SweepMode, SweepPoint,
};
