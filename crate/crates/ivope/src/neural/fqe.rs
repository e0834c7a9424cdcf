//! Fitted Q evaluation with a frozen target network.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::neural::{
    policy_value_of_net, Batcher, CurvePoint, Encoder, FitData, FitOutcome, NeuralQ, Task,
    TrainingCurve,
};
use crate::nn::{Activation, Mlp, Optimizer};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct FqeConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The target copy is refreshed every this many steps.
    pub target_update_period: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig {
            hidden: vec![50, 50],
            activation: Activation::Relu,
            layer_norm: false,
            steps: 100_000,
            batch_size: 1024,
            learning_rate: 1e-4,
            target_update_period: 100,
            eval_interval: 200,
            seed: 0,
        }
    }
}

/// Minimizes `(Q(s,a) - (r + gamma Q_target(s',a')))^2` with `a' ~ pi(.|s')`
/// drawn per batch; terminal rows bootstrap nothing (target = r).
pub fn fit_fqe(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    config: &FqeConfig,
) -> Result<FitOutcome> {
    let encoder = Encoder::new(task);
    let fit = FitData::new(train, task, &encoder)?;
    let vfit = FitData::new(valid, task, &encoder)?;

    let mut sizes = vec![encoder.input_dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(1);
    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut net = Mlp::init(&sizes, config.activation, config.layer_norm, &mut init_rng);
    let mut target = net.clone();
    let mut opt = Optimizer::adam(config.learning_rate, &net.params);

    let mut batcher = Batcher::new(
        fit.len(),
        config.batch_size,
        stream_rng(config.seed, Stream::Shuffle),
    );
    let mut action_rng = stream_rng(config.seed, Stream::ActionResample);
    let mut valid_action_rng = stream_rng(config.seed.wrapping_add(1), Stream::ActionResample);

    let mut curve = TrainingCurve::default();
    for step in 0..config.steps {
        if step % config.target_update_period == 0 {
            target = net.clone();
        }
        let idx: Vec<usize> = batcher.next_batch().to_vec();
        let x = fit.gather_inputs(&idx);
        let xp = fit.gather_next_inputs(&idx, task, &encoder, &mut action_rng);
        let q_next = target.forward_value(&xp);
        let r = fit.gather_col(&fit.rewards, &idx);
        let gm = fit.gather_col(&fit.discount_mask, &idx);
        let y = &r + &(&gm * &q_next);

        let mut g = crate::nn::Graph::new();
        let vars = net.insert_params(&mut g);
        let xn = g.constant(x);
        let out = net.forward(&mut g, &vars, xn);
        let yn = g.constant(y);
        let diff = g.sub(out, yn);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let loss_val = g.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: loss_val,
            });
        }
        let mut grads = g.backward(loss);
        let grad_list: Vec<_> = vars
            .ids
            .iter()
            .zip(&net.params)
            .map(|(&id, p)| grads.take(id, p.dim()))
            .collect();
        opt.step(&mut net.params, &grad_list);

        if (step + 1) % config.eval_interval == 0 || step + 1 == config.steps {
            let vm = td_validation_metric(&net, &vfit, task, &encoder, &mut valid_action_rng);
            curve.push(CurvePoint {
                step: step + 1,
                train_loss: loss_val,
                valid_metric: vm,
                q_s0: policy_value_of_net(&net, &encoder, task),
            });
        }
    }

    let final_metric = curve.points.last().map(|p| p.valid_metric).unwrap_or(f64::NAN);
    Ok(FitOutcome {
        q: Arc::new(NeuralQ {
            net,
            encoder,
        }),
        validation_metric: final_metric,
        curve,
        checkpoints: None,
        diagnostics: BTreeMap::new(),
    })
}

/// Mean squared TD error of a network on a dataset (one next-action draw
/// per row).
pub(crate) fn td_validation_metric(
    net: &Mlp,
    data: &FitData,
    task: &Task,
    encoder: &Encoder,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let q = net.forward_value(&data.inputs);
    let xp = data.gather_next_inputs(&idx, task, encoder, rng);
    let qn = net.forward_value(&xp);
    let mut total = 0.0;
    for i in 0..data.len() {
        let resid = q[[i, 0]] - data.rewards[i] - data.discount_mask[i] * qn[[i, 0]];
        total += resid * resid;
    }
    total / data.len() as f64
}
