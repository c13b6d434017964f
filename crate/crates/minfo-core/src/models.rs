//! Built-in example models.

use crate::model::PomdpModel;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|&n| String::from(n)).collect()
}

/// Two-location switching task. One uninformative observation; moving to
/// the other location pays a unit reward, staying pays nothing. Determinism
/// is only worth its information price above a critical trade-off rate,
/// where the optimal policy doubles into a two-phase alternation.
pub fn two_state() -> PomdpModel {
    PomdpModel::new(
        labels(&["L", "R"]),
        labels(&["none"]),
        labels(&["left", "right"]),
        vec![
            // From either state, "left" lands in L and "right" lands in R.
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ],
        vec![vec![1.0], vec![1.0]],
        // Switching pays -1: L + right, R + left.
        vec![vec![0.0, -1.0], vec![-1.0, 0.0]],
    )
    .expect("builtin model is valid")
}

/// Load-transport task on two locations. State is (location, load): LL and
/// RL are loaded at left/right, LU and RU unloaded. Loading happens at the
/// left location, delivering (unloading at the right while loaded) pays a
/// unit reward. Movement and handling succeed with probability 0.8 and
/// otherwise leave the state unchanged; inapplicable actions are no-ops.
/// Both sensors are noisy: the location reading is correct with probability
/// 0.88 and the load reading with probability 0.7, independently.
pub fn robot() -> PomdpModel {
    let names = ["LL", "RL", "LU", "RU"];
    let (ns, na) = (4usize, 4usize);
    let idx = |n: &str| names.iter().position(|&x| x == n).unwrap();
    let act = |n: &str| ["left", "right", "load", "unload"].iter().position(|&x| x == n).unwrap();

    // Self-loops everywhere, then overwrite the applicable moves.
    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    for (s, row) in transition.iter_mut().enumerate() {
        for a_row in row.iter_mut() {
            a_row[s] = 1.0;
        }
    }
    let mut edge = |from: &str, action: &str, to: &str| {
        let (s, a, sp) = (idx(from), act(action), idx(to));
        transition[s][a] = vec![0.0; ns];
        transition[s][a][sp] = 0.8;
        transition[s][a][s] += 0.2;
    };
    edge("LL", "right", "RL");
    edge("RL", "left", "LL");
    edge("LU", "load", "LL");
    edge("LL", "unload", "LU");
    edge("RL", "unload", "RU");
    edge("LU", "right", "RU");
    edge("RU", "left", "LU");

    // Observation labels mirror the states; the likelihood factorizes over
    // the two sensors.
    let loc_ok = 0.88;
    let load_ok = 0.7;
    let observation: Vec<Vec<f64>> = (0..ns)
        .map(|s| {
            (0..ns)
                .map(|o| {
                    let same_loc = names[s].as_bytes()[0] == names[o].as_bytes()[0];
                    let same_load = names[s].as_bytes()[1] == names[o].as_bytes()[1];
                    let p_loc = if same_loc { loc_ok } else { 1.0 - loc_ok };
                    let p_load = if same_load { load_ok } else { 1.0 - load_ok };
                    p_loc * p_load
                })
                .collect()
        })
        .collect();

    let mut cost = vec![vec![0.0; na]; ns];
    cost[idx("RL")][act("unload")] = -1.0;

    PomdpModel::new(
        labels(&names),
        labels(&names),
        labels(&["left", "right", "load", "unload"]),
        transition,
        observation,
        cost,
    )
    .expect("builtin model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;
    use crate::model::{
        external_cost, stationary_phase_distributions, validate_model, ReactivePolicy,
        STATIONARY_TOL,
    };

    #[test]
    fn builtins_validate() {
        validate_model(&two_state()).unwrap();
        validate_model(&robot()).unwrap();
    }

    #[test]
    fn robot_uniform_stationary_is_exact() {
        let m = robot();
        let pi = ReactivePolicy::uniform(1, 4, 4);
        let d = stationary_phase_distributions(&m, &pi, STATIONARY_TOL).unwrap();
        let expected = [0.2, 0.1, 0.3, 0.4];
        for (s, &e) in expected.iter().enumerate() {
            assert!(
                abs(d.dists[0][s] - e) < 1e-10,
                "state {s}: {} vs {e}",
                d.dists[0][s]
            );
        }
        let c = external_cost(&m, &pi, &d);
        assert!(abs(c - (-0.025)) < 1e-12);
    }

    #[test]
    fn two_state_uniform_cost_is_half_reward() {
        let m = two_state();
        let pi = ReactivePolicy::uniform(1, 1, 2);
        let d = stationary_phase_distributions(&m, &pi, STATIONARY_TOL).unwrap();
        let c = external_cost(&m, &pi, &d);
        assert!(abs(c - (-0.5)) < 1e-12);
    }

    #[test]
    fn robot_observation_rows_are_products_of_sensor_accuracies() {
        let m = robot();
        // From LL: correct reading 0.88 * 0.7.
        assert!(abs(m.observation[0][0] - 0.616) < 1e-12);
        // Wrong location, right load: 0.12 * 0.7.
        assert!(abs(m.observation[0][1] - 0.084) < 1e-12);
        // Right location, wrong load: 0.88 * 0.3.
        assert!(abs(m.observation[0][2] - 0.264) < 1e-12);
        // Both wrong: 0.12 * 0.3.
        assert!(abs(m.observation[0][3] - 0.036) < 1e-12);
    }
}
