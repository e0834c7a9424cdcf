//! Neural Q estimators under a shared fitting contract.

pub mod adversarial;
pub mod dbrm;
pub mod deep_iv;
pub mod dfiv;
pub mod fqe;
pub mod projected;

pub use adversarial::{
    adversarial_objective, fit_adversarial, AdvMethod, AdversarialConfig, Checkpoint,
    CheckpointSet, ObjectiveConstants, ObjectiveInputs,
};
pub use dbrm::{fit_dbrm_neural, DbrmConfig};
pub use deep_iv::{
    fit_deep_iv, fit_deep_iv_with_model, DeepIvConfig, ExactTransitionModel,
    LearnedTransitionModel, TransitionModel,
};
pub use dfiv::{fit_dfiv, DfivConfig};
pub use fqe::{fit_fqe, FqeConfig};
pub use projected::{chain_pooled_weights, projected_rmse};

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::TransitionDataset;
use crate::env::{Policy, StateEmbedding, TabularMdp};
use crate::error::{Error, Result};
use crate::evaluation::QFunction;
use crate::nn::Mlp;

/// What an offline evaluator legitimately knows about the task: states,
/// actions, terminal flags, the initial distribution, the discount, and the
/// target policy. Never the transition kernel.
#[derive(Clone)]
pub struct Task {
    pub embedding: StateEmbedding,
    pub policy: Policy,
    pub terminal: Vec<bool>,
    pub initial_dist: Array1<f64>,
    pub gamma: f64,
}

impl Task {
    pub fn new(
        embedding: StateEmbedding,
        policy: Policy,
        terminal: Vec<bool>,
        initial_dist: Array1<f64>,
        gamma: f64,
    ) -> Self {
        Task {
            embedding,
            policy,
            terminal,
            initial_dist,
            gamma,
        }
    }

    /// Task view of a tabular MDP (uses only the evaluator-visible parts).
    pub fn from_mdp(mdp: &TabularMdp, policy: &Policy) -> Self {
        Task {
            embedding: StateEmbedding::chain(mdp.n_states),
            policy: policy.clone(),
            terminal: mdp.terminal.clone(),
            initial_dist: mdp.initial_dist.clone(),
            gamma: mdp.discount,
        }
    }

    pub fn n_states(&self) -> usize {
        self.embedding.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.policy.n_actions()
    }
}

/// Encodes `(state, action)` pairs for network input: the embedded state
/// position, followed by a one-hot action block when there is more than one
/// action.
#[derive(Clone)]
pub struct Encoder {
    state_inputs: Array2<f64>,
    n_actions: usize,
}

impl Encoder {
    pub fn new(task: &Task) -> Self {
        let n = task.n_states();
        let state_inputs =
            Array2::from_shape_fn((n, 1), |(s, _)| task.embedding.embed(s));
        Encoder {
            state_inputs,
            n_actions: task.n_actions(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_inputs.ncols() + if self.n_actions > 1 { self.n_actions } else { 0 }
    }

    pub fn encode_into(&self, state: usize, action: usize, out: &mut [f64]) {
        let ds = self.state_inputs.ncols();
        for j in 0..ds {
            out[j] = self.state_inputs[[state, j]];
        }
        if self.n_actions > 1 {
            for j in 0..self.n_actions {
                out[ds + j] = 0.0;
            }
            out[ds + action] = 1.0;
        }
    }

    pub fn encode_batch(&self, states: &[usize], actions: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((states.len(), self.input_dim()));
        for (i, (&s, &a)) in states.iter().zip(actions).enumerate() {
            self.encode_into(s, a, out.row_mut(i).as_slice_mut().unwrap());
        }
        out
    }
}

/// Epoch-wise shuffled minibatch iterator; the remainder of an epoch smaller
/// than one batch is dropped.
pub struct Batcher {
    indices: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        Batcher {
            indices: (0..n).collect(),
            pos: n, // force a shuffle on the first call
            batch_size: batch_size.min(n),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.indices[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        out
    }
}

/// One point of a training curve.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub q_s0: f64,
}

/// Per-fit training curve, written as CSV `step,train_loss,valid_metric,q_s0`.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn push(&mut self, p: CurvePoint) {
        self.points.push(p);
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,train_loss,valid_metric,q_s0")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.step, p.train_loss, p.valid_metric, p.q_s0)?;
        }
        Ok(())
    }

    /// First recorded step whose policy-value estimate is within
    /// `threshold` relative error of `truth`.
    pub fn first_step_within(&self, truth: f64, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| ((p.q_s0 - truth) / truth).abs() < threshold)
            .map(|p| p.step)
    }
}

/// A fitted MLP Q function.
#[derive(Clone)]
pub struct NeuralQ {
    pub net: Mlp,
    pub encoder: Encoder,
}

impl QFunction for NeuralQ {
    fn q(&self, state: usize, action: usize) -> f64 {
        let mut x = vec![0.0; self.encoder.input_dim()];
        self.encoder.encode_into(state, action, &mut x);
        self.net.eval_scalar(&x)
    }
}

/// Result of one estimator fit.
pub struct FitOutcome {
    pub q: Arc<dyn QFunction>,
    /// Held-out selection metric (per-method definition).
    pub validation_metric: f64,
    pub curve: TrainingCurve,
    pub checkpoints: Option<CheckpointSet>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Uniform fitting contract every estimator implements; `fit` must be a
/// deterministic function of `(train, valid, task, config seed)`.
pub trait QEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(
        &self,
        task: &Task,
        train: &TransitionDataset,
        valid: &TransitionDataset,
    ) -> Result<FitOutcome>;
}

/// Exact policy value of any fitted Q under the task's initial
/// distribution.
pub fn policy_value_on_task(q: &dyn QFunction, task: &Task) -> f64 {
    let mut rho = 0.0;
    for s in 0..task.n_states() {
        let mu = task.initial_dist[s];
        if mu == 0.0 {
            continue;
        }
        for a in 0..task.n_actions() {
            let p = task.policy.action_probs(s)[a];
            if p > 0.0 {
                rho += mu * p * q.q(s, a);
            }
        }
    }
    rho
}

/// Policy value of the current network under the task's initial
/// distribution (exact tabular average).
pub(crate) fn policy_value_of_net(net: &Mlp, encoder: &Encoder, task: &Task) -> f64 {
    let mut rho = 0.0;
    let mut x = vec![0.0; encoder.input_dim()];
    for s in 0..task.n_states() {
        let mu = task.initial_dist[s];
        if mu == 0.0 {
            continue;
        }
        for a in 0..task.n_actions() {
            let p = task.policy.action_probs(s)[a];
            if p > 0.0 {
                encoder.encode_into(s, a, &mut x);
                rho += mu * p * net.eval_scalar(&x);
            }
        }
    }
    rho
}

/// Shared per-fit view of a dataset: encoded current inputs, rewards, next
/// states, and the discount-mask column `gamma * [not terminal]`.
pub(crate) struct FitData {
    pub inputs: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Vec<usize>,
    pub discount_mask: Array1<f64>,
}

impl FitData {
    pub fn new(data: &TransitionDataset, task: &Task, encoder: &Encoder) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let n = data.len();
        let states: Vec<usize> = data.transitions.iter().map(|t| t.state).collect();
        let actions: Vec<usize> = data.transitions.iter().map(|t| t.action).collect();
        let inputs = encoder.encode_batch(&states, &actions);
        let rewards = Array1::from_iter(data.transitions.iter().map(|t| t.reward));
        let next_states: Vec<usize> = data.transitions.iter().map(|t| t.next_state).collect();
        let discount_mask = Array1::from_iter(
            data.transitions
                .iter()
                .map(|t| if t.terminal { 0.0 } else { task.gamma }),
        );
        let _ = n;
        Ok(FitData {
            inputs,
            rewards,
            next_states,
            discount_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    /// Gathers the encoded inputs of a batch.
    pub fn gather_inputs(&self, idx: &[usize]) -> Array2<f64> {
        let d = self.inputs.ncols();
        let mut out = Array2::zeros((idx.len(), d));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&self.inputs.row(i));
        }
        out
    }

    /// Encodes next-state inputs for a batch with freshly drawn
    /// `a' ~ pi(.|s')`. Draws happen for every row regardless of terminal
    /// flags, so RNG consumption is independent of the terminal pattern.
    pub fn gather_next_inputs(
        &self,
        idx: &[usize],
        task: &Task,
        encoder: &Encoder,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), encoder.input_dim()));
        for (row, &i) in idx.iter().enumerate() {
            let sp = self.next_states[i];
            let ap = task.policy.sample(sp, rng);
            encoder.encode_into(sp, ap, out.row_mut(row).as_slice_mut().unwrap());
        }
        out
    }

    pub fn gather_col(&self, src: &Array1<f64>, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), 1));
        for (row, &i) in idx.iter().enumerate() {
            out[[row, 0]] = src[i];
        }
        out
    }
}
