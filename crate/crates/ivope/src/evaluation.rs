//! Policy-value estimation from a fitted Q function, normalization, and
//! error metrics.

use rand::Rng;

use crate::env::{Policy, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// A fitted state-action value function over a tabular state space.
pub trait QFunction: Send + Sync {
    fn q(&self, state: usize, action: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64 + Send + Sync> QFunction for F {
    fn q(&self, state: usize, action: usize) -> f64 {
        self(state, action)
    }
}

/// Per-run value estimate with optional ground truth.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ValueEstimate {
    pub rho_hat: f64,
    pub rho_true: Option<f64>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub normalized_error: Option<f64>,
}

impl ValueEstimate {
    pub fn new(rho_hat: f64, rho_true: Option<f64>, rho_min: f64, rho_max: f64) -> Result<Self> {
        let normalized_error = match rho_true {
            Some(t) => Some(abs_error(
                normalize(rho_hat, rho_min, rho_max)?,
                normalize(t, rho_min, rho_max)?,
            )),
            None => None,
        };
        Ok(ValueEstimate {
            rho_hat,
            rho_true,
            rho_min,
            rho_max,
            normalized_error,
        })
    }
}

/// Exact policy value of a fitted Q under the MDP's initial distribution:
/// `rho_hat = sum_s mu0(s) sum_a pi(a|s) Qhat(s,a)`.
pub fn estimate_policy_value_exact(
    q: &dyn QFunction,
    mdp: &TabularMdp,
    policy: &Policy,
) -> f64 {
    let mut rho = 0.0;
    for s in 0..mdp.n_states {
        let mu = mdp.initial_dist[s];
        if mu == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let p = policy.action_probs(s)[a];
            if p > 0.0 {
                rho += mu * p * q.q(s, a);
            }
        }
    }
    rho
}

/// Monte Carlo policy value over `(s, a) ~ mu0 x pi`.
pub fn estimate_policy_value_mc(
    q: &dyn QFunction,
    mdp: &TabularMdp,
    policy: &Policy,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let mut rng = stream_rng(seed, Stream::MonteCarlo);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let s = mdp.sample_initial(&mut rng);
        let a = policy.sample(s, &mut rng);
        total += q.q(s, a);
    }
    Ok(total / n_samples as f64)
}

/// Affine normalization `(rho - rho_min) / (rho_max - rho_min)`.
pub fn normalize(rho: f64, rho_min: f64, rho_max: f64) -> Result<f64> {
    if rho_max <= rho_min {
        return Err(Error::invalid(format!(
            "rho_max ({rho_max}) must exceed rho_min ({rho_min})"
        )));
    }
    Ok((rho - rho_min) / (rho_max - rho_min))
}

/// Absolute error between normalized values.
pub fn abs_error(rho_hat_norm: f64, rho_true_norm: f64) -> f64 {
    (rho_hat_norm - rho_true_norm).abs()
}

/// Value bounds used to normalize chain-MDP results: `rho_min = 0` and
/// `rho_max = sum_{t=0}^{H-1} gamma^t` with horizon `H = n_states - 1`
/// (the best case of unit reward every step).
pub fn chain_value_bounds(n_states: usize, discount: f64) -> (f64, f64) {
    let h = n_states - 1;
    let rho_max = if (discount - 1.0).abs() < 1e-15 {
        h as f64
    } else {
        (1.0 - discount.powi(h as i32)) / (1.0 - discount)
    };
    (0.0, rho_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{exact_q, make_chain_mdp, Policy};
    use approx::assert_abs_diff_eq;

    struct TableQ(ndarray::Array2<f64>);
    impl QFunction for TableQ {
        fn q(&self, s: usize, a: usize) -> f64 {
            self.0[[s, a]]
        }
    }

    #[test]
    fn chain_value_is_q_at_start() {
        let mdp = make_chain_mdp(100, 0.5, 0.99).unwrap();
        let policy = Policy::single_action(100);
        let q = TableQ(exact_q(&mdp, &policy).unwrap());
        let rho = estimate_policy_value_exact(&q, &mdp, &policy);
        assert_abs_diff_eq!(rho, q.0[[0, 0]], epsilon = 1e-12);
    }

    #[test]
    fn constant_q_gives_constant_value() {
        let mdp = make_chain_mdp(50, 0.5, 0.9).unwrap();
        let policy = Policy::single_action(50);
        let c = |_s: usize, _a: usize| 3.25;
        assert_abs_diff_eq!(
            estimate_policy_value_exact(&c, &mdp, &policy),
            3.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn mc_matches_exact_within_three_standard_errors() {
        // Uniform initial distribution so the MC draw actually varies.
        let mdp0 = make_chain_mdp(10, 0.5, 0.9).unwrap();
        let mut initial = ndarray::Array1::zeros(10);
        for s in 0..9 {
            initial[s] = 1.0 / 9.0;
        }
        let mdp = crate::env::TabularMdp::new(
            mdp0.transition.clone(),
            mdp0.reward.clone(),
            initial,
            mdp0.terminal.clone(),
            mdp0.discount,
        )
        .unwrap();
        let policy = Policy::single_action(10);
        let table = exact_q(&mdp, &policy).unwrap();
        let exact = estimate_policy_value_exact(&TableQ(table.clone()), &mdp, &policy);
        let n = 100_000;
        let mc = estimate_policy_value_mc(&TableQ(table.clone()), &mdp, &policy, n, 5).unwrap();
        // Population standard error of the per-draw Q value.
        let mean = exact;
        let var: f64 = (0..9)
            .map(|s| (table[[s, 0]] - mean).powi(2) / 9.0)
            .sum();
        let se = (var / n as f64).sqrt();
        assert!(
            (mc - exact).abs() <= 3.0 * se,
            "mc {mc} vs exact {exact}, se {se}"
        );
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(normalize(0.0, 0.0, 2.0).unwrap(), 0.0);
        assert_eq!(normalize(2.0, 0.0, 2.0).unwrap(), 1.0);
        assert_eq!(normalize(1.0, 0.0, 2.0).unwrap(), 0.5);
        assert!(normalize(1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn normalize_is_affine_order_preserving() {
        let (lo, hi) = (-3.0, 7.0);
        let a = normalize(0.1, lo, hi).unwrap();
        let b = normalize(0.2, lo, hi).unwrap();
        assert!(a < b);
    }

    #[test]
    fn abs_error_basics() {
        assert_eq!(abs_error(0.4, 0.4), 0.0);
        assert_abs_diff_eq!(abs_error(0.2, 0.7), 0.5, epsilon = 1e-15);
        assert_eq!(abs_error(0.2, 0.7), abs_error(0.7, 0.2));
    }

    #[test]
    fn abs_error_invariant_to_common_normalization() {
        // |norm(x) - norm(y)| = |x - y| / (hi - lo) regardless of the shift.
        let (lo, hi) = (-5.0, 15.0);
        let (x, y) = (1.2, 4.7);
        let direct = (x - y as f64).abs() / (hi - lo);
        let via_norm = abs_error(normalize(x, lo, hi).unwrap(), normalize(y, lo, hi).unwrap());
        assert_abs_diff_eq!(direct, via_norm, epsilon = 1e-15);
    }

    #[test]
    fn chain_bounds_match_geometric_sum() {
        let (lo, hi) = chain_value_bounds(100, 0.99);
        assert_eq!(lo, 0.0);
        let direct: f64 = (0..99).map(|t| 0.99f64.powi(t)).sum();
        assert_abs_diff_eq!(hi, direct, epsilon = 1e-9);
    }
}
