//! Projected residual mean squared error: the generalization metric the
//! adversarial estimators target.

use ndarray::Array2;

use crate::env::{Policy, TabularMdp};
use crate::error::{Error, Result};
use crate::evaluation::QFunction;

/// `sqrt( E_Z[ (E_X[f_hat(X) - f_ref(X) | Z])^2 ] )` with `Z = (s,a)`
/// weighted by `weights`, `X = (s,a,s',a')`, and
/// `f(X) = Q(s,a) - gamma Q(s',a')`. The inner conditional expectation is
/// computed exactly from the transition table and the policy.
pub fn projected_rmse(
    q_hat: &dyn QFunction,
    q_ref: &dyn QFunction,
    mdp: &TabularMdp,
    policy: &Policy,
    weights: &Array2<f64>,
) -> Result<f64> {
    if weights.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::ShapeMismatch(format!(
            "weights are {:?}, expected ({}, {})",
            weights.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let total: f64 = weights.sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights must have positive mass"));
    }
    // Value-difference table and its policy average per state.
    let mut delta = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            delta[[s, a]] = q_hat.q(s, a) - q_ref.q(s, a);
        }
    }
    let mut delta_v = vec![0.0; mdp.n_states];
    for s in 0..mdp.n_states {
        delta_v[s] = policy.action_probs(s).dot(&delta.row(s));
    }
    let mut acc = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let w = weights[[s, a]];
            if w == 0.0 {
                continue;
            }
            let p_row = mdp.transition.slice(ndarray::s![s, a, ..]);
            let expected_next: f64 = p_row
                .iter()
                .enumerate()
                .map(|(sp, &p)| p * delta_v[sp])
                .sum();
            let inner = delta[[s, a]] - mdp.discount * expected_next;
            acc += w * inner * inner;
        }
    }
    Ok((acc / total).sqrt())
}

/// The chain's pooled behavior distribution: uniform over non-terminal
/// states, all mass on the single action.
pub fn chain_pooled_weights(mdp: &TabularMdp) -> Array2<f64> {
    let n_live = mdp.terminal.iter().filter(|&&t| !t).count() as f64;
    Array2::from_shape_fn((mdp.n_states, mdp.n_actions), |(s, a)| {
        if mdp.terminal[s] || a != 0 {
            0.0
        } else {
            1.0 / n_live
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{exact_q, make_chain_mdp, Policy};
    use approx::assert_abs_diff_eq;

    struct TableQ(Array2<f64>);
    impl QFunction for TableQ {
        fn q(&self, s: usize, a: usize) -> f64 {
            self.0[[s, a]]
        }
    }

    #[test]
    fn identical_functions_give_zero() {
        let mdp = make_chain_mdp(40, 0.5, 0.95).unwrap();
        let policy = Policy::single_action(40);
        let q = TableQ(exact_q(&mdp, &policy).unwrap());
        let q2 = TableQ(q.0.clone());
        let w = chain_pooled_weights(&mdp);
        let rmse = projected_rmse(&q, &q2, &mdp, &policy, &w).unwrap();
        assert_abs_diff_eq!(rmse, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_shift_projects_to_one_minus_gamma() {
        let gamma = 0.95;
        let mdp = make_chain_mdp(40, 0.5, gamma).unwrap();
        let policy = Policy::single_action(40);
        let base = TableQ(exact_q(&mdp, &policy).unwrap());
        let c = 2.5;
        let shifted = TableQ(&base.0 + c);
        let w = chain_pooled_weights(&mdp);
        let rmse = projected_rmse(&shifted, &base, &mdp, &policy, &w).unwrap();
        assert_abs_diff_eq!(rmse, c * (1.0 - gamma), epsilon = 1e-12);
    }

    #[test]
    fn matches_brute_force_double_sum_on_random_q() {
        use rand::Rng;
        let mdp = make_chain_mdp(25, 0.4, 0.9).unwrap();
        let policy = Policy::single_action(25);
        let mut rng = crate::rng::stream_rng(9, crate::rng::Stream::MonteCarlo);
        let qa = TableQ(Array2::from_shape_fn((25, 1), |_| rng.gen::<f64>() * 4.0));
        let qb = TableQ(Array2::from_shape_fn((25, 1), |_| rng.gen::<f64>() * 4.0));
        let w = chain_pooled_weights(&mdp);

        // Independent brute-force evaluation: explicit sums over
        // (s, a, s', a').
        let mut acc = 0.0;
        let mut mass = 0.0;
        for s in 0..25 {
            for a in 0..1 {
                let weight = w[[s, a]];
                if weight == 0.0 {
                    continue;
                }
                let mut inner = qa.q(s, a) - qb.q(s, a);
                let mut bootstrap = 0.0;
                for sp in 0..25 {
                    for ap in 0..1 {
                        bootstrap += mdp.transition[[s, a, sp]]
                            * policy.action_probs(sp)[ap]
                            * (qa.q(sp, ap) - qb.q(sp, ap));
                    }
                }
                inner -= mdp.discount * bootstrap;
                acc += weight * inner * inner;
                mass += weight;
            }
        }
        let brute = (acc / mass).sqrt();
        let fast = projected_rmse(&qa, &qb, &mdp, &policy, &w).unwrap();
        assert_abs_diff_eq!(fast, brute, epsilon = 1e-10);
    }
}
