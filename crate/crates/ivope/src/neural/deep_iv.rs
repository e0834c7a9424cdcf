//! Deep IV: stage 1 learns the conditional next-state distribution by
//! maximum likelihood; stage 2 regresses rewards on the Monte Carlo
//! conditional expectation of the structural TD form.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::data::TransitionDataset;
use crate::env::TabularMdp;
use crate::error::{Error, Result};
use crate::neural::{
    policy_value_of_net, Batcher, CurvePoint, Encoder, FitData, FitOutcome, NeuralQ, Task,
    TrainingCurve,
};
use crate::nn::heads::{categorical_logprob, sample_rows, softmax_rows};
use crate::nn::{Activation, Graph, Mlp, Optimizer};
use crate::rng::{stream_rng, Stream};

/// Conditional model of the next state given `(s, a)`.
pub trait TransitionModel: Send + Sync {
    /// Samples one next state per `(state, action)` row.
    fn sample_next(&self, states: &[usize], actions: &[usize], rng: &mut ChaCha8Rng)
        -> Vec<usize>;
}

/// Oracle model backed by the true transition table (for injection tests
/// and model-quality baselines).
pub struct ExactTransitionModel {
    transition: Array3<f64>,
}

impl ExactTransitionModel {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        ExactTransitionModel {
            transition: mdp.transition.clone(),
        }
    }
}

impl TransitionModel for ExactTransitionModel {
    fn sample_next(
        &self,
        states: &[usize],
        actions: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        use rand::Rng;
        states
            .iter()
            .zip(actions)
            .map(|(&s, &a)| {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut last = 0;
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    last = i;
                    if u < acc {
                        return i;
                    }
                }
                last
            })
            .collect()
    }
}

/// Learned categorical model over next-state indices. Inputs are one-hot
/// states (plus one-hot actions with more than one action).
pub struct LearnedTransitionModel {
    net: Mlp,
    n_states: usize,
    n_actions: usize,
}

impl LearnedTransitionModel {
    fn encode(&self, states: &[usize], actions: &[usize]) -> Array2<f64> {
        let extra = if self.n_actions > 1 { self.n_actions } else { 0 };
        let mut x = Array2::zeros((states.len(), self.n_states + extra));
        for (i, (&s, &a)) in states.iter().zip(actions).enumerate() {
            x[[i, s]] = 1.0;
            if extra > 0 {
                x[[i, self.n_states + a]] = 1.0;
            }
        }
        x
    }

    /// Conditional probabilities `P(s' | s, a)` for given pairs.
    pub fn probs(&self, states: &[usize], actions: &[usize]) -> Array2<f64> {
        let logits = self.net.forward_value(&self.encode(states, actions));
        softmax_rows(&logits)
    }

    /// Mean log-likelihood of a dataset under the model.
    pub fn log_likelihood(&self, data: &TransitionDataset) -> f64 {
        let states: Vec<usize> = data.transitions.iter().map(|t| t.state).collect();
        let actions: Vec<usize> = data.transitions.iter().map(|t| t.action).collect();
        let probs = self.probs(&states, &actions);
        let mut total = 0.0;
        for (i, t) in data.transitions.iter().enumerate() {
            total += probs[[i, t.next_state]].max(1e-300).ln();
        }
        total / data.len() as f64
    }
}

impl TransitionModel for LearnedTransitionModel {
    fn sample_next(
        &self,
        states: &[usize],
        actions: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        sample_rows(&self.probs(states, actions), rng)
    }
}

#[derive(Debug, Clone)]
pub struct DeepIvConfig {
    /// Treatment (stage-1) network hidden widths.
    pub treatment_hidden: Vec<usize>,
    pub treatment_steps: usize,
    pub treatment_lr: f64,
    /// Value (stage-2) network hidden widths.
    pub value_hidden: Vec<usize>,
    pub value_steps: usize,
    pub value_lr: f64,
    pub activation: Activation,
    pub layer_norm: bool,
    pub batch_size: usize,
    /// Monte Carlo draws per row in the stage-2 expectation.
    pub n_mc_samples: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for DeepIvConfig {
    fn default() -> Self {
        DeepIvConfig {
            treatment_hidden: vec![64, 64],
            treatment_steps: 100_000,
            treatment_lr: 1e-3,
            value_hidden: vec![50, 50],
            value_steps: 100_000,
            value_lr: 1e-4,
            activation: Activation::Relu,
            layer_norm: false,
            batch_size: 1024,
            n_mc_samples: 10,
            eval_interval: 200,
            seed: 0,
        }
    }
}

/// Stage 1: categorical next-state model by maximum likelihood.
pub fn fit_transition_model(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    config: &DeepIvConfig,
) -> Result<(LearnedTransitionModel, f64)> {
    let n_states = task.n_states();
    let n_actions = task.n_actions();
    let extra = if n_actions > 1 { n_actions } else { 0 };
    let mut sizes = vec![n_states + extra];
    sizes.extend_from_slice(&config.treatment_hidden);
    sizes.push(n_states);
    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut net = Mlp::init(&sizes, config.activation, config.layer_norm, &mut init_rng);
    let mut opt = Optimizer::adam(config.treatment_lr, &net.params);

    let states: Vec<usize> = train.transitions.iter().map(|t| t.state).collect();
    let actions: Vec<usize> = train.transitions.iter().map(|t| t.action).collect();
    let targets: Vec<usize> = train.transitions.iter().map(|t| t.next_state).collect();
    let model_stub = LearnedTransitionModel {
        net: net.clone(),
        n_states,
        n_actions,
    };
    let inputs = model_stub.encode(&states, &actions);

    let mut batcher = Batcher::new(
        train.len(),
        config.batch_size,
        stream_rng(config.seed, Stream::Shuffle),
    );
    for step in 0..config.treatment_steps {
        let idx: Vec<usize> = batcher.next_batch().to_vec();
        let mut x = Array2::zeros((idx.len(), inputs.ncols()));
        let mut t = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&inputs.row(i));
            t.push(targets[i]);
        }
        let mut g = Graph::new();
        let vars = net.insert_params(&mut g);
        let xn = g.constant(x);
        let logits = net.forward(&mut g, &vars, xn);
        let lp = categorical_logprob(&mut g, logits, &t);
        let mean_lp = g.mean(lp);
        let loss = g.neg(mean_lp);
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: lv });
        }
        let mut grads = g.backward(loss);
        let grad_list: Vec<_> = vars
            .ids
            .iter()
            .zip(&net.params)
            .map(|(&id, p)| grads.take(id, p.dim()))
            .collect();
        opt.step(&mut net.params, &grad_list);
    }

    let model = LearnedTransitionModel {
        net,
        n_states,
        n_actions,
    };
    let valid_ll = model.log_likelihood(valid);
    Ok((model, valid_ll))
}

/// Stage 2 with an injected transition model: minimizes
/// `(r - mean_k [Q(s,a) - gamma Q(s'_k, a'_k)])^2` with `s'_k` drawn from
/// the model and `a'_k ~ pi`; sampled terminal states contribute no
/// bootstrap term.
pub fn fit_deep_iv_with_model(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    model: &dyn TransitionModel,
    config: &DeepIvConfig,
) -> Result<FitOutcome> {
    if config.n_mc_samples == 0 {
        return Err(Error::invalid("n_mc_samples must be at least 1"));
    }
    let encoder = Encoder::new(task);
    let fit = FitData::new(train, task, &encoder)?;
    let vfit = FitData::new(valid, task, &encoder)?;
    let states: Vec<usize> = train.transitions.iter().map(|t| t.state).collect();
    let actions: Vec<usize> = train.transitions.iter().map(|t| t.action).collect();

    let mut sizes = vec![encoder.input_dim()];
    sizes.extend_from_slice(&config.value_hidden);
    sizes.push(1);
    let mut init_rng = stream_rng(config.seed.wrapping_add(1), Stream::Init);
    let mut net = Mlp::init(&sizes, config.activation, config.layer_norm, &mut init_rng);
    let mut opt = Optimizer::adam(config.value_lr, &net.params);

    let mut batcher = Batcher::new(
        fit.len(),
        config.batch_size,
        stream_rng(config.seed.wrapping_add(1), Stream::Shuffle),
    );
    let mut mc_rng = stream_rng(config.seed, Stream::MonteCarlo);
    let mut action_rng = stream_rng(config.seed, Stream::ActionResample);
    let mut valid_rng = stream_rng(config.seed.wrapping_add(1), Stream::MonteCarlo);

    let k = config.n_mc_samples;
    let mut curve = TrainingCurve::default();
    for step in 0..config.value_steps {
        let idx: Vec<usize> = batcher.next_batch().to_vec();
        let x = fit.gather_inputs(&idx);
        let r = fit.gather_col(&fit.rewards, &idx);
        let bs: Vec<usize> = idx.iter().map(|&i| states[i]).collect();
        let ba: Vec<usize> = idx.iter().map(|&i| actions[i]).collect();

        let mut g = Graph::new();
        let vars = net.insert_params(&mut g);
        let xn = g.constant(x);
        let q = net.forward(&mut g, &vars, xn);
        // Monte Carlo bootstrap average over model draws.
        let mut boot_sum: Option<crate::nn::NodeId> = None;
        for _ in 0..k {
            let sampled = model.sample_next(&bs, &ba, &mut mc_rng);
            let mut xp = Array2::zeros((idx.len(), encoder.input_dim()));
            let mut mask = Array2::zeros((idx.len(), 1));
            for (row, &sp) in sampled.iter().enumerate() {
                let ap = task.policy.sample(sp, &mut action_rng);
                encoder.encode_into(sp, ap, xp.row_mut(row).as_slice_mut().unwrap());
                mask[[row, 0]] = if task.terminal[sp] { 0.0 } else { task.gamma };
            }
            let xpn = g.constant(xp);
            let qk = net.forward(&mut g, &vars, xpn);
            let mk = g.constant(mask);
            let masked = g.mul(mk, qk);
            boot_sum = Some(match boot_sum {
                Some(acc) => g.add(acc, masked),
                None => masked,
            });
        }
        let boot_mean = g.scale(1.0 / k as f64, boot_sum.expect("k >= 1"));
        let pred = g.sub(q, boot_mean);
        let rn = g.constant(r);
        let resid = g.sub(rn, pred);
        let sq = g.square(resid);
        let loss = g.mean(sq);
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: lv });
        }
        let mut grads = g.backward(loss);
        let grad_list: Vec<_> = vars
            .ids
            .iter()
            .zip(&net.params)
            .map(|(&id, p)| grads.take(id, p.dim()))
            .collect();
        opt.step(&mut net.params, &grad_list);

        if (step + 1) % config.eval_interval == 0 || step + 1 == config.value_steps {
            let vm = crate::neural::fqe::td_validation_metric(
                &net, &vfit, task, &encoder, &mut valid_rng,
            );
            curve.push(CurvePoint {
                step: step + 1,
                train_loss: lv,
                valid_metric: vm,
                q_s0: policy_value_of_net(&net, &encoder, task),
            });
        }
    }

    let final_metric = curve.points.last().map(|p| p.valid_metric).unwrap_or(f64::NAN);
    Ok(FitOutcome {
        q: Arc::new(NeuralQ { net, encoder }),
        validation_metric: final_metric,
        curve,
        checkpoints: None,
        diagnostics: BTreeMap::new(),
    })
}

/// Full Deep IV: learned stage-1 model, then the stage-2 regression.
/// The outcome's diagnostics carry the stage-1 validation log-likelihood.
pub fn fit_deep_iv(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    config: &DeepIvConfig,
) -> Result<FitOutcome> {
    let (model, valid_ll) = fit_transition_model(train, valid, task, config)?;
    let mut outcome = fit_deep_iv_with_model(train, valid, task, &model, config)?;
    outcome
        .diagnostics
        .insert("stage1_valid_log_likelihood".to_string(), valid_ll);
    Ok(outcome)
}
