//! Independently coded oracles shared by the integration tests.
//!
//! Everything here recomputes quantities from first principles with plain
//! `f64` arithmetic and deliberately avoids the library's internal helper
//! routines, so a shared bug cannot hide behind agreement between two
//! copies of the same code.

#![allow(dead_code)]

use minfo_core::model::{BeliefTable, PhasedPomdp, ReactivePolicy};
use minfo_core::reduction::RetentiveSetup;
use minfo_core::solver::SolverState;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `x ln x` with the `0 ln 0 = 0` convention.
fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Free energy of the alternating two-state policy family at offset `eps`.
///
/// Phase 0 plays the second action with probability `1/2 + eps`, phase 1
/// with `1/2 - eps`. Because the next state equals the previous action and
/// the cost is -1 exactly when the action switches sides, the external
/// cost is `-(1/2 + 2 eps^2)`. With a single observation the only
/// information charge is the clock term, the KL divergence of each phase
/// marginal from the uniform phase average, identical at both phases.
pub fn symmetric_family_fe(eps: f64, beta: f64) -> f64 {
    let p = 0.5 + eps;
    let q = 0.5 - eps;
    let clock = core::f64::consts::LN_2 + xlnx(p) + xlnx(q);
    let external = -(0.5 + 2.0 * eps * eps);
    clock / beta + external
}

/// Minimum of the symmetric family over `eps` in `[0, 1/2]`: a dense grid
/// scan followed by golden-section refinement of the bracketing interval.
/// Returns `(best_free_energy, best_eps)`.
pub fn symmetric_family_minimum(beta: f64) -> (f64, f64) {
    let n = 4096usize;
    let mut best_eps = 0.0;
    let mut best_fe = symmetric_family_fe(0.0, beta);
    for i in 1..=n {
        let eps = 0.5 * i as f64 / n as f64;
        let fe = symmetric_family_fe(eps, beta);
        if fe < best_fe {
            best_fe = fe;
            best_eps = eps;
        }
    }
    let step = 0.5 / n as f64;
    let mut lo = (best_eps - step).max(0.0);
    let mut hi = (best_eps + step).min(0.5);
    let ratio = 0.5 * (3.0 - 5f64.sqrt());
    for _ in 0..200 {
        let a = lo + ratio * (hi - lo);
        let b = hi - ratio * (hi - lo);
        if symmetric_family_fe(a, beta) < symmetric_family_fe(b, beta) {
            hi = b;
        } else {
            lo = a;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let eps = 0.5 * (lo + hi);
    (symmetric_family_fe(eps, beta), eps)
}

/// Softmax of `-beta * d` over all actions, with max-subtraction, written
/// without reference to the solver's update routine.
pub fn softmax_neg_beta_d(d: &[f64], beta: f64) -> Vec<f64> {
    let min_d = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = d.iter().map(|&x| (-beta * (x - min_d)).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

/// Closed-loop state kernel of one policy phase by direct triple
/// summation: `P[s][s'] = sum_{o,a} o(o|s) pi_t(a|o) p(s'|s,a)`.
pub fn brute_kernel<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    t: usize,
) -> Vec<Vec<f64>> {
    let tables = model.phase(t);
    let ns = tables.num_states();
    let no = tables.num_observations();
    let na = tables.num_actions();
    let rows = &policy.kernels[t % policy.period()];
    let mut kernel = vec![vec![0.0; ns]; ns];
    for s in 0..ns {
        for o in 0..no {
            for a in 0..na {
                let w = tables.observation[s][o] * rows[o][a];
                if w == 0.0 {
                    continue;
                }
                for sp in 0..ns {
                    kernel[s][sp] += w * tables.transition[s][a][sp];
                }
            }
        }
    }
    kernel
}

/// Stationary per-phase distributions by long plain power iteration from
/// the uniform start, using the given per-phase kernels cyclically. Runs
/// `cycles` full periods and then reads off one more period.
pub fn power_stationary(kernels: &[Vec<Vec<f64>>], cycles: usize) -> Vec<Vec<f64>> {
    let t_len = kernels.len();
    let ns = kernels[0].len();
    let mut dist = vec![1.0 / ns as f64; ns];
    let advance = |dist: &[f64], kernel: &[Vec<f64>]| -> Vec<f64> {
        let mut next = vec![0.0; ns];
        for (s, &mass) in dist.iter().enumerate() {
            for (sp, &p) in kernel[s].iter().enumerate() {
                next[sp] += mass * p;
            }
        }
        next
    };
    for _ in 0..cycles {
        for kernel in kernels {
            dist = advance(&dist, kernel);
        }
    }
    let mut phases = Vec::with_capacity(t_len);
    for kernel in kernels {
        phases.push(dist.clone());
        dist = advance(&dist, kernel);
    }
    phases
}

/// Beliefs and observation marginals at one phase by direct Bayes rule:
/// `w[o] = sum_s p(s) o(o|s)` and `b[o][s] = p(s) o(o|s) / w[o]`.
/// Unsupported observations get a zero belief row.
pub fn bayes_beliefs<M: PhasedPomdp>(
    model: &M,
    dist_t: &[f64],
    t: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let tables = model.phase(t);
    let ns = tables.num_states();
    let no = tables.num_observations();
    let mut weights = vec![0.0; no];
    let mut beliefs = vec![vec![0.0; ns]; no];
    for o in 0..no {
        for s in 0..ns {
            weights[o] += dist_t[s] * tables.observation[s][o];
        }
        if weights[o] > 0.0 {
            for s in 0..ns {
                beliefs[o][s] = dist_t[s] * tables.observation[s][o] / weights[o];
            }
        }
    }
    (beliefs, weights)
}

/// Sup-norm violation of the periodic backward equation
/// `nu_t(s) = r_t(s) - phi_t + sum_s' P_t[s][s'] nu_{t+1}(s')`,
/// reconstructing the expected per-step rate `r_t(s)` from scratch:
/// `r_t(s) = sum_o o(o|s) sum_a pi_t(a|o) (i_t(o,a)/beta + c(s,a))` with
/// the pointwise information `i_t(o,a) = ln(pi_t(a|o)/prior_t(a))` taken
/// against the per-phase marginal (plain) or the phase-averaged marginal
/// (clock-aware), matching the variant recorded in the values.
pub fn backward_equation_residual<M: PhasedPomdp>(
    model: &M,
    policy: &ReactivePolicy,
    state: &SolverState,
    beta: f64,
) -> f64 {
    let t_len = policy.period();
    let ns = model.num_states();
    let clock_aware = state.values.variant.clock_aware();
    let mut worst: f64 = 0.0;
    for t in 0..t_len {
        let tables = model.phase(t);
        let rows = &policy.kernels[t];
        let prior: &[f64] = if clock_aware {
            &state.marginals.phase_averaged
        } else {
            &state.marginals.per_phase[t]
        };
        let kernel = brute_kernel(model, policy, t);
        let nu_next = &state.values.nu[(t + 1) % t_len];
        for s in 0..ns {
            let mut rate = 0.0;
            for o in 0..tables.num_observations() {
                let wo = tables.observation[s][o];
                if wo == 0.0 {
                    continue;
                }
                for a in 0..tables.num_actions() {
                    let pa = rows[o][a];
                    if pa == 0.0 {
                        continue;
                    }
                    let info = (pa / prior[a]).ln();
                    rate += wo * pa * (info / beta + tables.cost[s][a]);
                }
            }
            let mut expected = rate - state.values.phi[t];
            for (sp, &p) in kernel[s].iter().enumerate() {
                expected += p * nu_next[sp];
            }
            let diff = (state.values.nu[t][s] - expected).abs();
            if diff > worst {
                worst = diff;
            }
        }
    }
    worst
}

/// Largest violation of the per-phase gauge `sum_s p_t(s) nu_t(s) = 0`.
pub fn gauge_residual(state: &SolverState) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, nu_t) in state.values.nu.iter().enumerate() {
        let mut dot = 0.0;
        for (s, &v) in nu_t.iter().enumerate() {
            dot += state.dist.dists[t][s] * v;
        }
        if dot.abs() > worst {
            worst = dot.abs();
        }
    }
    worst
}

/// Mean Shannon entropy (nats) over all phases and observation rows of a
/// policy, unweighted.
pub fn mean_policy_entropy(policy: &ReactivePolicy) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for phase in &policy.kernels {
        for row in phase {
            total -= row.iter().cloned().map(xlnx).sum::<f64>();
            rows += 1;
        }
    }
    total / rows as f64
}

/// A strictly positive stochastic row of length `n` drawn from `rng`.
pub fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| 0.05 + rng.gen::<f64>()).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// A random retentive setup with strictly positive rows everywhere, so the
/// induced product chain is ergodic. State, observation, action, and
/// memory space sizes are each drawn from `1..=3`.
pub fn random_setup(rng: &mut ChaCha8Rng) -> RetentiveSetup {
    use minfo_core::model::PomdpModel;
    let ns = rng.gen_range(1..=3usize);
    let no = rng.gen_range(1..=3usize);
    let na = rng.gen_range(1..=3usize);
    let nm = rng.gen_range(1..=3usize);
    let states = (0..ns).map(|i| format!("s{i}")).collect();
    let observations = (0..no).map(|i| format!("o{i}")).collect();
    let actions = (0..na).map(|i| format!("a{i}")).collect();
    let transition = (0..ns)
        .map(|_| (0..na).map(|_| random_row(rng, ns)).collect())
        .collect();
    let observation = (0..ns).map(|_| random_row(rng, no)).collect();
    let cost = (0..ns)
        .map(|_| (0..na).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
        .collect();
    let base = PomdpModel::new(states, observations, actions, transition, observation, cost)
        .expect("random base model is valid");
    let memory_labels = (0..nm).map(|i| format!("m{i}")).collect();
    let inference = (0..nm)
        .map(|_| (0..no).map(|_| random_row(rng, nm)).collect())
        .collect();
    let control = (0..nm).map(|_| random_row(rng, na)).collect();
    RetentiveSetup::new(base, memory_labels, inference, control, 0)
        .expect("random setup is valid")
}

/// A belief table stub covering `period` phases with `no` observations,
/// all supported, for exercising the policy update in isolation.
pub fn full_support_beliefs(period: usize, no: usize, ns: usize) -> BeliefTable {
    BeliefTable {
        beliefs: vec![vec![vec![1.0 / ns as f64; ns]; no]; period],
        obs_marginals: vec![vec![1.0 / no as f64; no]; period],
        support: vec![vec![true; no]; period],
    }
}

/// Sup-norm difference of two equal-length slices.
pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
