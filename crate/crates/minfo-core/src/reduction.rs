//! Reduction of a retentive (finite-memory) agent to a reactive policy on a
//! two-phase product model.
//!
//! The product state is (memory, base state). Phase 0 reveals the memory
//! together with the base observation and the agent commits the next memory
//! (a "commit" action, one per memory); phase 1 reveals only the memory (the
//! base observation is blanked) and the agent takes a base action. A
//! memoryless reactive policy on this alternation reproduces exactly the
//! base-step behavior of the retentive agent: inference becomes the phase-0
//! policy, control the phase-1 policy.

use crate::linalg;
use crate::model::{
    external_cost, policy_state_kernel, validate_model, ModelError, PeriodicPomdpModel,
    PhaseDistribution, PhasedPomdp, PomdpModel, ReactivePolicy,
};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

/// Row-sum tolerance for inference and control tables.
const ROW_TOL: f64 = 1e-12;

/// Failures of the reduction layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReductionError {
    /// Dimensions or values of the setup are inconsistent.
    #[error("invalid retentive setup: {detail}")]
    BadSetup {
        /// Human-readable cause.
        detail: String,
    },
    /// A label violates the product naming scheme.
    #[error("bad label: {detail}")]
    BadLabel {
        /// Human-readable cause.
        detail: String,
    },
    /// An inference or control row is not a distribution.
    #[error("{table} row {row} sums to {sum}, expected 1 within {ROW_TOL}")]
    RowNotStochastic {
        /// Which table.
        table: &'static str,
        /// Offending row.
        row: String,
        /// Its sum.
        sum: f64,
    },
    /// `initial_memory` out of range.
    #[error("memory index {index} out of range for {count} memories")]
    BadMemoryIndex {
        /// The offending index.
        index: usize,
        /// Number of memories.
        count: usize,
    },
    /// The joint (memory, state) chain has no unique stationary
    /// distribution, so per-step statistics are not well defined.
    #[error("the joint chain has no unique stationary distribution: {detail}")]
    NonErgodic {
        /// Human-readable cause.
        detail: String,
    },
    /// Base model validation failed.
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A finite-memory agent on a base model: a memory set, an inference kernel
/// `q(m'|m, o)` and a control kernel `pi(a|m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentiveSetup {
    /// The underlying model.
    pub base: PomdpModel,
    /// Memory labels; they double as commit-action labels in the product.
    pub memory_labels: Vec<String>,
    /// `inference[m][o][m']`: next-memory distribution.
    pub inference: Vec<Vec<Vec<f64>>>,
    /// `control[m][a]`: action distribution given the committed memory.
    pub control: Vec<Vec<f64>>,
    /// Starting memory (metadata for simulation; stationary analysis does
    /// not depend on it).
    pub initial_memory: usize,
}

impl RetentiveSetup {
    /// Build and validate a setup.
    pub fn new(
        base: PomdpModel,
        memory_labels: Vec<String>,
        inference: Vec<Vec<Vec<f64>>>,
        control: Vec<Vec<f64>>,
        initial_memory: usize,
    ) -> Result<Self, ReductionError> {
        let setup = Self {
            base: validate_model(&base)?,
            memory_labels,
            inference,
            control,
            initial_memory,
        };
        setup.validate()?;
        Ok(setup)
    }

    fn validate(&self) -> Result<(), ReductionError> {
        let m_count = self.memory_labels.len();
        if m_count == 0 {
            return Err(ReductionError::BadSetup {
                detail: String::from("no memories"),
            });
        }
        for (i, l) in self.memory_labels.iter().enumerate() {
            if l.is_empty() {
                return Err(ReductionError::BadLabel {
                    detail: format!("memory label {i} is empty"),
                });
            }
            if l.contains('|') {
                return Err(ReductionError::BadLabel {
                    detail: format!("memory label '{l}' contains '|'"),
                });
            }
            if self.memory_labels[..i].contains(l) {
                return Err(ReductionError::BadLabel {
                    detail: format!("duplicate memory label '{l}'"),
                });
            }
            if self.base.actions.contains(l) {
                return Err(ReductionError::BadLabel {
                    detail: format!("memory label '{l}' collides with a base action"),
                });
            }
        }
        for o in &self.base.observations {
            if o == "-" {
                return Err(ReductionError::BadLabel {
                    detail: String::from("base observation label '-' is reserved for the blank"),
                });
            }
        }
        let (no, na) = (self.base.num_observations(), self.base.num_actions());
        if self.inference.len() != m_count {
            return Err(ReductionError::BadSetup {
                detail: format!("{} inference rows for {m_count} memories", self.inference.len()),
            });
        }
        for (m, per_obs) in self.inference.iter().enumerate() {
            if per_obs.len() != no {
                return Err(ReductionError::BadSetup {
                    detail: format!(
                        "inference memory {m} has {} observation rows, expected {no}",
                        per_obs.len()
                    ),
                });
            }
            for (o, row) in per_obs.iter().enumerate() {
                check_dist_row("inference", || format!("(m={m}, o={o})"), row, m_count)?;
            }
        }
        if self.control.len() != m_count {
            return Err(ReductionError::BadSetup {
                detail: format!("{} control rows for {m_count} memories", self.control.len()),
            });
        }
        for (m, row) in self.control.iter().enumerate() {
            check_dist_row("control", || format!("(m={m})"), row, na)?;
        }
        if self.initial_memory >= m_count {
            return Err(ReductionError::BadMemoryIndex {
                index: self.initial_memory,
                count: m_count,
            });
        }
        Ok(())
    }

    /// Number of memories.
    pub fn num_memories(&self) -> usize {
        self.memory_labels.len()
    }
}

fn check_dist_row(
    table: &'static str,
    row_desc: impl Fn() -> String,
    row: &[f64],
    expected_len: usize,
) -> Result<(), ReductionError> {
    if row.len() != expected_len {
        return Err(ReductionError::BadSetup {
            detail: format!(
                "{table} row {} has {} entries, expected {expected_len}",
                row_desc(),
                row.len()
            ),
        });
    }
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < 0.0 {
            return Err(ReductionError::BadSetup {
                detail: format!("{table} row {} has invalid entry {v}", row_desc()),
            });
        }
        sum += v;
    }
    if crate::math::abs(sum - 1.0) > ROW_TOL {
        return Err(ReductionError::RowNotStochastic {
            table,
            row: row_desc(),
            sum,
        });
    }
    Ok(())
}

/// Which kind of product action an index denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    /// Commit the given memory (phase-0 action).
    Commit(usize),
    /// Take the given base action (phase-1 action).
    Base(usize),
}

/// The two-phase product model together with its index maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    /// The product model: phase 0 commits memory, phase 1 acts.
    pub model: PeriodicPomdpModel,
    num_memories: usize,
    num_base_states: usize,
    num_base_observations: usize,
    num_base_actions: usize,
}

impl ReducedModel {
    /// Number of memories.
    pub fn num_memories(&self) -> usize {
        self.num_memories
    }

    /// Product state index of (memory, base state).
    pub fn state_index(&self, memory: usize, base_state: usize) -> usize {
        memory * self.num_base_states + base_state
    }

    /// Inverse of [`state_index`](Self::state_index).
    pub fn state_parts(&self, index: usize) -> (usize, usize) {
        (index / self.num_base_states, index % self.num_base_states)
    }

    /// Product observation index of (memory, base observation); `None` is
    /// the blank observation shown in the acting phase.
    pub fn observation_index(&self, memory: usize, base_obs: Option<usize>) -> usize {
        memory * (self.num_base_observations + 1)
            + base_obs.unwrap_or(self.num_base_observations)
    }

    /// Inverse of [`observation_index`](Self::observation_index).
    pub fn observation_parts(&self, index: usize) -> (usize, Option<usize>) {
        let stride = self.num_base_observations + 1;
        let (m, o) = (index / stride, index % stride);
        (m, if o == self.num_base_observations { None } else { Some(o) })
    }

    /// Product action index of a commit or base action.
    pub fn action_index(&self, kind: ActionKind) -> usize {
        match kind {
            ActionKind::Commit(m) => m,
            ActionKind::Base(a) => self.num_memories + a,
        }
    }

    /// Which kind of action a product index denotes.
    pub fn action_kind(&self, index: usize) -> ActionKind {
        if index < self.num_memories {
            ActionKind::Commit(index)
        } else {
            ActionKind::Base(index - self.num_memories)
        }
    }
}

struct Dims {
    m: usize,
    ns: usize,
    no: usize,
    na: usize,
    states: usize,
    obs: usize,
    actions: usize,
}

fn dims(setup: &RetentiveSetup) -> Dims {
    let m = setup.num_memories();
    let (ns, no, na) = (
        setup.base.num_states(),
        setup.base.num_observations(),
        setup.base.num_actions(),
    );
    Dims {
        m,
        ns,
        no,
        na,
        states: m * ns,
        obs: m * (no + 1),
        actions: m + na,
    }
}

/// Build the two-phase product model with inapplicable actions masked out:
/// only commits are admissible in phase 0, only base actions in phase 1.
pub fn build_reduced_pomdp(setup: &RetentiveSetup) -> Result<ReducedModel, ReductionError> {
    build_reduced(setup, None)
}

/// Build the product model with every action admissible in both phases;
/// an action of the wrong kind for its phase leaves the state unchanged and
/// incurs `penalty`. With a large penalty the optimizer recovers the masked
/// model's behavior; with a small one it may exploit idling.
pub fn build_reduced_pomdp_with_penalty(
    setup: &RetentiveSetup,
    penalty: f64,
) -> Result<ReducedModel, ReductionError> {
    if !penalty.is_finite() {
        return Err(ReductionError::BadSetup {
            detail: format!("penalty {penalty} must be finite"),
        });
    }
    build_reduced(setup, Some(penalty))
}

fn build_reduced(
    setup: &RetentiveSetup,
    penalty: Option<f64>,
) -> Result<ReducedModel, ReductionError> {
    setup.validate()?;
    let d = dims(setup);
    let base = &setup.base;

    let mut state_labels = Vec::with_capacity(d.states);
    for ml in &setup.memory_labels {
        for sl in &base.states {
            state_labels.push(format!("{ml}|{sl}"));
        }
    }
    let mut obs_labels = Vec::with_capacity(d.obs);
    for ml in &setup.memory_labels {
        for ol in &base.observations {
            obs_labels.push(format!("{ml}|{ol}"));
        }
        obs_labels.push(format!("{ml}|-"));
    }
    let mut action_labels = Vec::with_capacity(d.actions);
    action_labels.extend(setup.memory_labels.iter().cloned());
    action_labels.extend(base.actions.iter().cloned());

    let sid = |m: usize, s: usize| m * d.ns + s;
    let oid = |m: usize, o: Option<usize>| m * (d.no + 1) + o.unwrap_or(d.no);

    let mut trans0 = vec![vec![vec![0.0; d.states]; d.actions]; d.states];
    let mut trans1 = vec![vec![vec![0.0; d.states]; d.actions]; d.states];
    let mut obs0 = vec![vec![0.0; d.obs]; d.states];
    let mut obs1 = vec![vec![0.0; d.obs]; d.states];
    let mut cost0 = vec![vec![0.0; d.actions]; d.states];
    let mut cost1 = vec![vec![0.0; d.actions]; d.states];

    for m in 0..d.m {
        for s in 0..d.ns {
            let z = sid(m, s);
            // Phase 0: the memory and the base observation are both shown.
            for (o, &po) in base.observation[s].iter().enumerate() {
                obs0[z][oid(m, Some(o))] = po;
            }
            // Phase 1: only the memory, via the blank observation.
            obs1[z][oid(m, None)] = 1.0;
            for mp in 0..d.m {
                // Commit in phase 0 rewrites the memory, nothing else.
                trans0[z][mp][sid(mp, s)] = 1.0;
                // Committing in phase 1 is a no-op (masked or penalized).
                trans1[z][mp][z] = 1.0;
            }
            for a in 0..d.na {
                let pa = d.m + a;
                // Base actions idle in phase 0 (masked or penalized).
                trans0[z][pa][z] = 1.0;
                // Phase 1 advances the base state and keeps the memory.
                for (sp, &p) in base.transition[s][a].iter().enumerate() {
                    trans1[z][pa][sid(m, sp)] = p;
                }
                cost1[z][pa] = base.cost[s][a];
            }
            if let Some(pen) = penalty {
                for a in 0..d.na {
                    cost0[z][d.m + a] = pen;
                }
                for mp in 0..d.m {
                    cost1[z][mp] = pen;
                }
            }
        }
    }

    let (mask0, mask1) = match penalty {
        Some(_) => (vec![true; d.actions], vec![true; d.actions]),
        None => {
            let mut m0 = vec![false; d.actions];
            let mut m1 = vec![false; d.actions];
            for i in 0..d.m {
                m0[i] = true;
            }
            for i in d.m..d.actions {
                m1[i] = true;
            }
            (m0, m1)
        }
    };

    let phase0 = PomdpModel {
        states: state_labels.clone(),
        observations: obs_labels.clone(),
        actions: action_labels.clone(),
        transition: trans0,
        observation: obs0,
        cost: cost0,
    };
    let phase1 = PomdpModel {
        states: state_labels,
        observations: obs_labels,
        actions: action_labels,
        transition: trans1,
        observation: obs1,
        cost: cost1,
    };
    let model = PeriodicPomdpModel::new(vec![phase0, phase1], vec![mask0, mask1])?;
    Ok(ReducedModel {
        model,
        num_memories: d.m,
        num_base_states: d.ns,
        num_base_observations: d.no,
        num_base_actions: d.na,
    })
}

/// Express the retentive agent as a period-2 reactive policy on the product:
/// phase 0 commits by the inference kernel read off the observed (memory,
/// base observation); phase 1 acts by the control kernel read off the
/// memory. Rows for observations that cannot occur in a phase are filled
/// uniformly over that phase's own action kind.
pub fn embed_retentive_policy(
    reduced: &ReducedModel,
    setup: &RetentiveSetup,
) -> Result<ReactivePolicy, ReductionError> {
    setup.validate()?;
    let d = dims(setup);
    if reduced.num_memories != d.m
        || reduced.num_base_states != d.ns
        || reduced.num_base_observations != d.no
        || reduced.num_base_actions != d.na
    {
        return Err(ReductionError::BadSetup {
            detail: String::from("reduced model dimensions do not match the setup"),
        });
    }
    let uniform_commit: Vec<f64> = (0..d.actions)
        .map(|i| if i < d.m { 1.0 / d.m as f64 } else { 0.0 })
        .collect();
    let uniform_base: Vec<f64> = (0..d.actions)
        .map(|i| if i >= d.m { 1.0 / d.na as f64 } else { 0.0 })
        .collect();

    let mut table0 = vec![Vec::new(); d.obs];
    let mut table1 = vec![Vec::new(); d.obs];
    for m in 0..d.m {
        for o in 0..d.no {
            let zo = reduced.observation_index(m, Some(o));
            let mut row = vec![0.0; d.actions];
            for (mp, &q) in setup.inference[m][o].iter().enumerate() {
                row[reduced.action_index(ActionKind::Commit(mp))] = q;
            }
            table0[zo] = row;
            // A non-blank observation cannot occur in the acting phase.
            table1[zo] = uniform_base.clone();
        }
        let blank = reduced.observation_index(m, None);
        // The blank observation cannot occur in the commit phase.
        table0[blank] = uniform_commit.clone();
        let mut row = vec![0.0; d.actions];
        for (a, &p) in setup.control[m].iter().enumerate() {
            row[reduced.action_index(ActionKind::Base(a))] = p;
        }
        table1[blank] = row;
    }
    ReactivePolicy::new(vec![table0, table1]).map_err(ReductionError::Model)
}

/// Per-base-step joint distribution over (state, observation, committed
/// memory, action) and average cost of the two descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Sup-norm deviation between the two joint distributions.
    pub max_joint_deviation: f64,
    /// Average cost per base step of the retentive agent.
    pub retentive_cost: f64,
    /// Average cost per base step (two product phases) of the embedded
    /// reactive policy on the product model.
    pub reduced_cost: f64,
    /// Whether the deviation is within the requested tolerance.
    pub equivalent: bool,
}

/// Verify that the embedded reactive policy on the product model reproduces
/// the retentive agent's stationary per-step joint distribution
/// `Pr(state, observation, committed memory, action)` and its average cost.
///
/// Both sides are computed independently: the retentive side directly from
/// the base tables and the (memory, state) pair chain, the reduced side
/// through the product tables under the embedded policy. Stationary
/// distributions are obtained by direct linear solve, so periodic closed
/// loops are handled; a chain with several recurrent classes has no unique
/// answer and is reported as [`ReductionError::NonErgodic`].
pub fn check_equivalence(
    setup: &RetentiveSetup,
    reduced: &ReducedModel,
    tolerance: f64,
) -> Result<EquivalenceReport, ReductionError> {
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(ReductionError::BadSetup {
            detail: format!("tolerance {tolerance} must be positive and finite"),
        });
    }
    setup.validate()?;
    let d = dims(setup);
    let base = &setup.base;

    // Retentive side: stationary distribution of the (previous memory,
    // state) chain, one base step per transition.
    let mut pair = vec![vec![0.0; d.states]; d.states];
    for m in 0..d.m {
        for s in 0..d.ns {
            let z = m * d.ns + s;
            for (o, &po) in base.observation[s].iter().enumerate() {
                if po == 0.0 {
                    continue;
                }
                for (mp, &q) in setup.inference[m][o].iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    for (a, &pa) in setup.control[mp].iter().enumerate() {
                        if pa == 0.0 {
                            continue;
                        }
                        for (sp, &p) in base.transition[s][a].iter().enumerate() {
                            pair[z][mp * d.ns + sp] += po * q * pa * p;
                        }
                    }
                }
            }
        }
    }
    let rho = linalg::stationary_direct(&pair).map_err(|_| ReductionError::NonErgodic {
        detail: String::from("the (memory, state) pair chain is singular"),
    })?;
    let mut joint = vec![0.0; d.ns * d.no * d.m * d.na];
    let jid = |s: usize, o: usize, m: usize, a: usize| {
        ((s * d.no + o) * d.m + m) * d.na + a
    };
    let mut retentive_cost = 0.0;
    for mp in 0..d.m {
        for s in 0..d.ns {
            let w = rho[mp * d.ns + s];
            if w == 0.0 {
                continue;
            }
            for (o, &po) in base.observation[s].iter().enumerate() {
                if po == 0.0 {
                    continue;
                }
                for (m, &q) in setup.inference[mp][o].iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    for (a, &pa) in setup.control[m].iter().enumerate() {
                        let mass = w * po * q * pa;
                        joint[jid(s, o, m, a)] += mass;
                        retentive_cost += mass * base.cost[s][a];
                    }
                }
            }
        }
    }

    // Reduced side, through the product tables under the embedded policy.
    let policy = embed_retentive_policy(reduced, setup)?;
    let model = &reduced.model;
    let p0 = policy_state_kernel(model, &policy, 0);
    let p1 = policy_state_kernel(model, &policy, 1);
    let cycle: Vec<Vec<f64>> = p0
        .iter()
        .map(|row| {
            let mut out = vec![0.0; d.states];
            for (mid, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (sp, &p) in p1[mid].iter().enumerate() {
                    out[sp] += w * p;
                }
            }
            out
        })
        .collect();
    let rho0 = linalg::stationary_direct(&cycle).map_err(|_| ReductionError::NonErgodic {
        detail: String::from("the product cycle chain is singular"),
    })?;
    let mut rho1 = vec![0.0; d.states];
    for (z, &w) in rho0.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (zp, &p) in p0[z].iter().enumerate() {
            rho1[zp] += w * p;
        }
    }

    let phase0 = model.phase(0);
    let phase1 = model.phase(1);
    let mut max_dev: f64 = 0.0;
    for s in 0..d.ns {
        for o in 0..d.no {
            for m in 0..d.m {
                let ca = reduced.action_index(ActionKind::Commit(m));
                let zo2 = reduced.observation_index(m, None);
                for a in 0..d.na {
                    let ba = reduced.action_index(ActionKind::Base(a));
                    let mut mass = 0.0;
                    for mp in 0..d.m {
                        let zs = reduced.state_index(mp, s);
                        let zo = reduced.observation_index(mp, Some(o));
                        let w = rho0[zs]
                            * phase0.observation[zs][zo]
                            * policy.kernels[0][zo][ca];
                        if w == 0.0 {
                            continue;
                        }
                        let zs2 = reduced.state_index(m, s);
                        mass += w
                            * phase0.transition[zs][ca][zs2]
                            * phase1.observation[zs2][zo2]
                            * policy.kernels[1][zo2][ba];
                    }
                    let dev = crate::math::abs(mass - joint[jid(s, o, m, a)]);
                    if dev > max_dev {
                        max_dev = dev;
                    }
                }
            }
        }
    }

    // Two product phases make one base step.
    let dist = PhaseDistribution {
        dists: vec![rho0, rho1],
    };
    let reduced_cost = 2.0 * external_cost(model, &policy, &dist);

    Ok(EquivalenceReport {
        max_joint_deviation: max_dev,
        retentive_cost,
        reduced_cost,
        equivalent: max_dev <= tolerance,
    })
}
