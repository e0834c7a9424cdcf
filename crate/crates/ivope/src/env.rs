//! Finite MDPs, the stochastic chain benchmark, policies, and an exact
//! dynamic-programming oracle.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

/// Finite-state/action MDP with dense transition and reward tables.
///
/// Terminal states self-loop with reward zero; `discount` must lie in (0, 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`, each row a probability vector.
    pub transition: Array3<f64>,
    /// `reward[s][a]`, deterministic reward for taking `a` in `s`.
    pub reward: Array2<f64>,
    /// Initial state distribution.
    pub initial_dist: Array1<f64>,
    /// Terminal mask over states.
    pub terminal: Vec<bool>,
    pub discount: f64,
}

impl TabularMdp {
    /// Validates row-stochasticity, the initial distribution, and the
    /// terminal self-loop convention.
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        initial_dist: Array1<f64>,
        terminal: Vec<bool>,
        discount: f64,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_next != n_states {
            return Err(Error::ShapeMismatch(format!(
                "transition table is {n_states}x{n_actions}x{n_next}, expected cubic in states"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::ShapeMismatch("reward table shape".into()));
        }
        if initial_dist.len() != n_states || terminal.len() != n_states {
            return Err(Error::ShapeMismatch("initial_dist/terminal length".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!(
                "discount must be in (0,1), got {discount}"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::invalid(format!(
                        "transition row (s={s}, a={a}) sums to {sum}, not 1"
                    )));
                }
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::invalid(format!(
                        "negative transition probability at (s={s}, a={a})"
                    )));
                }
            }
            if terminal[s] {
                for a in 0..n_actions {
                    if (transition[[s, a, s]] - 1.0).abs() > PROB_TOL {
                        return Err(Error::invalid(format!(
                            "terminal state {s} must self-loop"
                        )));
                    }
                    if reward[[s, a]] != 0.0 {
                        return Err(Error::invalid(format!(
                            "terminal state {s} must emit reward 0"
                        )));
                    }
                }
            }
        }
        let mu_sum: f64 = initial_dist.sum();
        if (mu_sum - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!(
                "initial distribution sums to {mu_sum}, not 1"
            )));
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            terminal,
            discount,
        })
    }

    /// Samples a next state for `(state, action)`.
    pub fn sample_next(&self, state: usize, action: usize, rng: &mut impl Rng) -> usize {
        let row = self.transition.slice(ndarray::s![state, action, ..]);
        sample_index(row.iter().copied(), rng)
    }

    /// Samples an initial state from `initial_dist`.
    pub fn sample_initial(&self, rng: &mut impl Rng) -> usize {
        sample_index(self.initial_dist.iter().copied(), rng)
    }

    /// Serializes the MDP to a JSON file. Lossless round trip.
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads an MDP from a JSON file, re-running the constructor checks.
    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: TabularMdp =
            serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        TabularMdp::new(
            raw.transition,
            raw.reward,
            raw.initial_dist,
            raw.terminal,
            raw.discount,
        )
    }
}

fn sample_index(probs: impl Iterator<Item = f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Tabular policy: a dense `[n_states x n_actions]` table of action
/// probabilities. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid(format!(
                    "policy row {s} sums to {sum}, not 1"
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!("negative probability in row {s}")));
            }
        }
        Ok(Policy { probs })
    }

    /// Uniform policy over `n_actions`.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Single-action policy (the chain case).
    pub fn single_action(n_states: usize) -> Self {
        Policy {
            probs: Array2::ones((n_states, 1)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn action_probs(&self, state: usize) -> ndarray::ArrayView1<'_, f64> {
        self.probs.row(state)
    }

    pub fn sample(&self, state: usize, rng: &mut impl Rng) -> usize {
        if self.n_actions() == 1 {
            return 0;
        }
        sample_index(self.probs.row(state).iter().copied(), rng)
    }
}

/// Maps state indices to scalar positions on the real line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEmbedding {
    positions: Array1<f64>,
}

impl StateEmbedding {
    pub fn new(positions: Array1<f64>) -> Self {
        StateEmbedding { positions }
    }

    /// Chain embedding: `s_i = -2 + (4/n) * i`.
    pub fn chain(n_states: usize) -> Self {
        let step = 4.0 / n_states as f64;
        StateEmbedding {
            positions: Array1::from_iter((0..n_states).map(|i| -2.0 + step * i as f64)),
        }
    }

    pub fn embed(&self, state: usize) -> f64 {
        self.positions[state]
    }

    pub fn n_states(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &Array1<f64> {
        &self.positions
    }
}

/// Reward kernel of the chain benchmark: a Gaussian bump of width 0.2
/// centered at the origin.
pub fn chain_reward(position: f64) -> f64 {
    (-position * position / (0.2 * 0.2)).exp()
}

/// Builds the stochastic chain MDP.
///
/// `n_states` positions spread uniformly over `[-2, 2]`; one action ("right")
/// advances with probability `p_advance` and stays put otherwise; the last
/// state is terminal; the start state is always state 0. Taking the action
/// from non-terminal `s` pays `exp(-s^2 / 0.2^2)`.
pub fn make_chain_mdp(n_states: usize, p_advance: f64, discount: f64) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(Error::invalid("chain needs at least 2 states"));
    }
    if !(p_advance > 0.0 && p_advance <= 1.0) {
        return Err(Error::invalid(format!(
            "p_advance must be in (0,1], got {p_advance} (p=0 never terminates)"
        )));
    }
    let embedding = StateEmbedding::chain(n_states);
    let term = n_states - 1;
    let mut transition = Array3::zeros((n_states, 1, n_states));
    let mut reward = Array2::zeros((n_states, 1));
    for i in 0..n_states {
        if i == term {
            transition[[i, 0, i]] = 1.0;
        } else {
            transition[[i, 0, i + 1]] = p_advance;
            transition[[i, 0, i]] = 1.0 - p_advance;
            reward[[i, 0]] = chain_reward(embedding.embed(i));
        }
    }
    let mut initial = Array1::zeros(n_states);
    initial[0] = 1.0;
    let mut terminal = vec![false; n_states];
    terminal[term] = true;
    TabularMdp::new(transition, reward, initial, terminal, discount)
}

/// Exact Q table for a fixed policy, by value iteration on the Bellman
/// fixed point, to sup-norm tolerance `1e-10`.
pub fn exact_q(mdp: &TabularMdp, policy: &Policy) -> Result<Array2<f64>> {
    exact_q_with(mdp, policy, 1e-10, 2_000_000)
}

/// Value iteration with explicit tolerance and iteration cap.
pub fn exact_q_with(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
    cap: usize,
) -> Result<Array2<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if policy.n_states() != ns || policy.n_actions() != na {
        return Err(Error::ShapeMismatch("policy does not match MDP".into()));
    }
    // v[s'] = sum_a' pi(a'|s') Q(s',a'), then Q(s,a) = r(s,a) + gamma * P v.
    let mut q = Array2::<f64>::zeros((ns, na));
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let mut v = Array1::<f64>::zeros(ns);
        for s in 0..ns {
            v[s] = policy.action_probs(s).dot(&q.row(s));
        }
        let mut delta = 0.0f64;
        let mut next = Array2::<f64>::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                let p_row = mdp.transition.slice(ndarray::s![s, a, ..]);
                let backed = if mdp.terminal[s] {
                    0.0
                } else {
                    mdp.reward[[s, a]] + mdp.discount * p_row.dot(&v)
                };
                delta = delta.max((backed - q[[s, a]]).abs());
                next[[s, a]] = backed;
            }
        }
        q = next;
        residual = delta;
        if delta <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence { cap, residual })
}

/// Closed-form Q for the chain:
/// `Q(s_i) = (r(s_i) + gamma * p * Q(s_{i+1})) / (1 - gamma * (1 - p))`,
/// backward from `Q(terminal) = 0`. An independent algebraic route used to
/// cross-check [`exact_q`].
pub fn chain_closed_form_q(n_states: usize, p_advance: f64, discount: f64) -> Array1<f64> {
    let embedding = StateEmbedding::chain(n_states);
    let mut q = Array1::<f64>::zeros(n_states);
    let denom = 1.0 - discount * (1.0 - p_advance);
    for i in (0..n_states - 1).rev() {
        let r = chain_reward(embedding.embed(i));
        q[i] = (r + discount * p_advance * q[i + 1]) / denom;
    }
    q
}

/// Sup-norm Bellman residual of a Q table under `policy`.
pub fn bellman_residual(mdp: &TabularMdp, policy: &Policy, q: &Array2<f64>) -> f64 {
    let ns = mdp.n_states;
    let mut v = Array1::<f64>::zeros(ns);
    for s in 0..ns {
        v[s] = policy.action_probs(s).dot(&q.row(s));
    }
    let mut worst = 0.0f64;
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let p_row = mdp.transition.slice(ndarray::s![s, a, ..]);
            let backed = if mdp.terminal[s] {
                0.0
            } else {
                mdp.reward[[s, a]] + mdp.discount * p_row.dot(&v)
            };
            worst = worst.max((backed - q[[s, a]]).abs());
        }
    }
    worst
}

/// Mixes each action's dynamics with a uniformly random action:
/// `P~(s'|s,a) = (1-p) P(s'|s,a) + (p/|A|) sum_a~ P(s'|s,a~)`, rewards mixed
/// identically.
pub fn perturb_discrete_actions(mdp: &TabularMdp, p_random: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&p_random) {
        return Err(Error::invalid(format!(
            "p_random must be in [0,1], got {p_random}"
        )));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut transition = Array3::zeros((ns, na, ns));
    let mut reward = Array2::zeros((ns, na));
    let w = p_random / na as f64;
    for s in 0..ns {
        let mut mix_row = Array1::<f64>::zeros(ns);
        let mut mix_r = 0.0;
        for a in 0..na {
            mix_row += &mdp.transition.slice(ndarray::s![s, a, ..]);
            mix_r += mdp.reward[[s, a]];
        }
        for a in 0..na {
            let own = mdp.transition.slice(ndarray::s![s, a, ..]);
            for sp in 0..ns {
                transition[[s, a, sp]] = (1.0 - p_random) * own[sp] + w * mix_row[sp];
            }
            reward[[s, a]] = (1.0 - p_random) * mdp.reward[[s, a]] + w * mix_r;
        }
    }
    TabularMdp::new(
        transition,
        reward,
        mdp.initial_dist.clone(),
        mdp.terminal.clone(),
        mdp.discount,
    )
}

/// Exact policy value `rho(pi) = sum_s mu0(s) sum_a pi(a|s) Q*(s,a)`.
pub fn policy_value_exact(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let q = exact_q(mdp, policy)?;
    let mut rho = 0.0;
    for s in 0..mdp.n_states {
        rho += mdp.initial_dist[s] * policy.action_probs(s).dot(&q.row(s));
    }
    Ok(rho)
}
