//! Neural Bellman residual minimization (the product-form objective with
//! two independent next-action draws).

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
pub struct DbrmConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for DbrmConfig {
    fn default() -> Self {
        DbrmConfig {
            hidden: vec![50, 50],
            activation: Activation::Relu,
            layer_norm: false,
            steps: 100_000,
            batch_size: 1024,
            learning_rate: 1e-4,
            eval_interval: 200,
            seed: 0,
        }
    }
}

/// Minimizes the empirical mean of
/// `(r - Q(s,a) + gamma Q(s',a'1)) * (r - Q(s,a) + gamma Q(s',a'2))` with
/// two independent draws `a'1, a'2 ~ pi(.|s')` per batch row; terminal rows
/// drop both bootstrap terms.
pub fn fit_dbrm_neural(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    config: &DbrmConfig,
) -> Result<FitOutcome> {
    let encoder = Encoder::new(task);
    let fit = FitData::new(train, task, &encoder)?;
    let vfit = FitData::new(valid, task, &encoder)?;

    let mut sizes = vec![encoder.input_dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(1);
    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut net = Mlp::init(&sizes, config.activation, config.layer_norm, &mut init_rng);
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
        let idx: Vec<usize> = batcher.next_batch().to_vec();
        let x = fit.gather_inputs(&idx);
        let xp1 = fit.gather_next_inputs(&idx, task, &encoder, &mut action_rng);
        let xp2 = fit.gather_next_inputs(&idx, task, &encoder, &mut action_rng);
        let r = fit.gather_col(&fit.rewards, &idx);
        let gm = fit.gather_col(&fit.discount_mask, &idx);

        let mut g = crate::nn::Graph::new();
        let vars = net.insert_params(&mut g);
        let xn = g.constant(x);
        let xp1n = g.constant(xp1);
        let xp2n = g.constant(xp2);
        let q = net.forward(&mut g, &vars, xn);
        let q1 = net.forward(&mut g, &vars, xp1n);
        let q2 = net.forward(&mut g, &vars, xp2n);
        let rn = g.constant(r);
        let gmn = g.constant(gm);
        let base = g.sub(rn, q);
        let b1 = g.mul(gmn, q1);
        let b2 = g.mul(gmn, q2);
        let res1 = g.add(base, b1);
        let res2 = g.add(base, b2);
        let prod = g.mul(res1, res2);
        let loss = g.mean(prod);
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
            let vm = validation_objective(&net, &vfit, task, &encoder, &mut valid_action_rng);
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
        q: Arc::new(NeuralQ { net, encoder }),
        validation_metric: final_metric,
        curve,
        checkpoints: None,
        diagnostics: BTreeMap::new(),
    })
}

/// The product-form objective on a held-out dataset (two fresh draws).
fn validation_objective(
    net: &Mlp,
    data: &FitData,
    task: &Task,
    encoder: &Encoder,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let q = net.forward_value(&data.inputs);
    let xp1 = data.gather_next_inputs(&idx, task, encoder, rng);
    let xp2 = data.gather_next_inputs(&idx, task, encoder, rng);
    let q1 = net.forward_value(&xp1);
    let q2 = net.forward_value(&xp2);
    let mut total = 0.0;
    for i in 0..data.len() {
        let base = data.rewards[i] - q[[i, 0]];
        let r1 = base + data.discount_mask[i] * q1[[i, 0]];
        let r2 = base + data.discount_mask[i] * q2[[i, 0]];
        total += r1 * r2;
    }
    total / data.len() as f64
}
