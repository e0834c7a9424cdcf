//! Adversarial GMM estimators: DeepGMM, AGMM, and ASEM share one minimax
//! objective and differ only in their regularizers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::neural::{
    policy_value_of_net, Batcher, CurvePoint, Encoder, FitData, FitOutcome, NeuralQ, Task,
    TrainingCurve,
};
use crate::nn::{Activation, Graph, Mlp, MlpVars, NodeId, Optimizer};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMethod {
    DeepGmm,
    Agmm,
    Asem,
}

impl AdvMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "deepgmm" => Ok(AdvMethod::DeepGmm),
            "agmm" => Ok(AdvMethod::Agmm),
            "asem" => Ok(AdvMethod::Asem),
            other => Err(Error::invalid(format!("unknown adversarial method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialConfig {
    pub q_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The adversary's learning rate is `learning_rate * g_lr_multiplier`.
    pub g_lr_multiplier: f64,
    pub oadam_betas: (f64, f64),
    /// L2 on the Q network parameters (AGMM/ASEM `a`).
    pub reg_a: f64,
    /// L2 on the adversary parameters (AGMM/ASEM `b`).
    pub reg_b: f64,
    /// ASEM's `alpha/2 * E[Q^2]` coefficient.
    pub asem_alpha: f64,
    pub checkpoint_interval: usize,
    pub max_checkpoints: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            q_hidden: vec![50, 50],
            g_hidden: vec![50, 50],
            activation: Activation::Relu,
            layer_norm: false,
            steps: 200_000,
            batch_size: 1024,
            learning_rate: 1e-4,
            g_lr_multiplier: 5.0,
            oadam_betas: (0.5, 0.9),
            reg_a: 1e-6,
            reg_b: 1e-6,
            asem_alpha: 1e-6,
            checkpoint_interval: 1000,
            max_checkpoints: 50,
            eval_interval: 200,
            seed: 0,
        }
    }
}

/// Regularization constants for [`adversarial_objective`].
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConstants {
    pub reg_a: f64,
    pub reg_b: f64,
    pub asem_alpha: f64,
}

/// Taped inputs of the minimax objective. All column nodes are `n x 1`.
pub struct ObjectiveInputs {
    /// Q(s,a) per batch row.
    pub q_out: NodeId,
    /// g(s,a) per batch row.
    pub g_out: NodeId,
    /// Rewards (constant).
    pub rewards: NodeId,
    /// Q(s',a') per batch row (unmasked).
    pub q_next_out: NodeId,
    /// `gamma * [not terminal]` per row (constant); terminal rows bootstrap
    /// nothing.
    pub discount_mask: NodeId,
    /// Sum of squares of the Q network parameters, when parameter L2 is on.
    pub q_sq_norm: Option<NodeId>,
    /// Sum of squares of the adversary parameters.
    pub g_sq_norm: Option<NodeId>,
    /// DeepGMM: TD residual under the latest parameter snapshot
    /// (constant, no gradient flows through it).
    pub snapshot_residual: Option<NodeId>,
}

/// Builds `(loss_for_Q, loss_for_g)` for one batch:
/// `Psi = mean[(r - Q(s,a) + gamma Q(s',a')) g(s,a)]`, Q descends
/// `Psi + R_Q`, g descends `-Psi + R_g`, with the method-specific
/// regularizers.
pub fn adversarial_objective(
    g: &mut Graph,
    method: AdvMethod,
    inputs: &ObjectiveInputs,
    constants: &ObjectiveConstants,
) -> (NodeId, NodeId) {
    let boot = g.mul(inputs.discount_mask, inputs.q_next_out);
    let shortfall = g.sub(inputs.rewards, inputs.q_out);
    let residual = g.add(shortfall, boot);
    let weighted = g.mul(residual, inputs.g_out);
    let psi = g.mean(weighted);
    let neg_psi = g.neg(psi);

    let mut loss_q = psi;
    let mut loss_g = neg_psi;
    match method {
        AdvMethod::Agmm => {
            if let Some(qn) = inputs.q_sq_norm {
                let reg = g.scale(constants.reg_a, qn);
                loss_q = g.add(loss_q, reg);
            }
            let g2 = g.square(inputs.g_out);
            let mg2 = g.mean(g2);
            loss_g = g.add(loss_g, mg2);
            if let Some(gn) = inputs.g_sq_norm {
                let reg = g.scale(constants.reg_b, gn);
                loss_g = g.add(loss_g, reg);
            }
        }
        AdvMethod::Asem => {
            let q2 = g.square(inputs.q_out);
            let mq2 = g.mean(q2);
            let aq = g.scale(constants.asem_alpha / 2.0, mq2);
            loss_q = g.add(loss_q, aq);
            if let Some(qn) = inputs.q_sq_norm {
                let reg = g.scale(constants.reg_a, qn);
                loss_q = g.add(loss_q, reg);
            }
            let g2 = g.square(inputs.g_out);
            let mg2 = g.mean(g2);
            let hg = g.scale(0.5, mg2);
            loss_g = g.add(loss_g, hg);
            if let Some(gn) = inputs.g_sq_norm {
                let reg = g.scale(constants.reg_b, gn);
                loss_g = g.add(loss_g, reg);
            }
        }
        AdvMethod::DeepGmm => {
            // g maximizes Psi - (1/4) mean[g^2 (r - Q~(s,a) + gamma Q~(s',a'))^2].
            let snap = inputs
                .snapshot_residual
                .expect("DeepGMM requires a snapshot residual");
            let g2 = g.square(inputs.g_out);
            let snap2 = g.square(snap);
            let w = g.mul(g2, snap2);
            let mw = g.mean(w);
            let quarter = g.scale(0.25, mw);
            loss_g = g.add(loss_g, quarter);
        }
    }
    (loss_q, loss_g)
}

/// Sum of squared entries over a parameter set, on the tape.
pub(crate) fn param_sq_norm(g: &mut Graph, vars: &MlpVars) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &id in &vars.ids {
        let sq = g.square(id);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.expect("networks have parameters")
}

/// One parameter snapshot taken during adversarial training.
#[derive(Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub q: Mlp,
    pub g: Mlp,
}

/// Ordered snapshots at a fixed interval, capped in count.
#[derive(Clone, Default)]
pub struct CheckpointSet {
    pub snapshots: Vec<Checkpoint>,
}

impl CheckpointSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Saves `step-<n>-q.ckpt` / `step-<n>-g.ckpt` pairs under a directory.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.snapshots {
            c.q.save_checkpoint(&dir.join(format!("step-{:08}-q.ckpt", c.step)))?;
            c.g.save_checkpoint(&dir.join(format!("step-{:08}-g.ckpt", c.step)))?;
        }
        Ok(())
    }
}

/// Simultaneous minimax training with OAdam: one adversary step, then one Q
/// step per batch. Returns the final Q plus the checkpoint set; a non-finite
/// loss aborts training and retains the last finite checkpoint.
pub fn fit_adversarial(
    train: &TransitionDataset,
    valid: &TransitionDataset,
    task: &Task,
    method: AdvMethod,
    config: &AdversarialConfig,
) -> Result<FitOutcome> {
    let encoder = Encoder::new(task);
    let fit = FitData::new(train, task, &encoder)?;
    let vfit = FitData::new(valid, task, &encoder)?;

    let mut q_sizes = vec![encoder.input_dim()];
    q_sizes.extend_from_slice(&config.q_hidden);
    q_sizes.push(1);
    let mut g_sizes = vec![encoder.input_dim()];
    g_sizes.extend_from_slice(&config.g_hidden);
    g_sizes.push(1);

    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut q_net = Mlp::init(&q_sizes, config.activation, config.layer_norm, &mut init_rng);
    let mut g_net = Mlp::init(&g_sizes, config.activation, config.layer_norm, &mut init_rng);
    let (b1, b2) = config.oadam_betas;
    let mut q_opt = Optimizer::oadam(config.learning_rate, b1, b2, &q_net.params);
    let mut g_opt = Optimizer::oadam(
        config.learning_rate * config.g_lr_multiplier,
        b1,
        b2,
        &g_net.params,
    );

    let mut batcher = Batcher::new(
        fit.len(),
        config.batch_size,
        stream_rng(config.seed, Stream::Shuffle),
    );
    let mut action_rng = stream_rng(config.seed, Stream::ActionResample);
    let mut valid_action_rng = stream_rng(config.seed.wrapping_add(1), Stream::ActionResample);
    let constants = ObjectiveConstants {
        reg_a: config.reg_a,
        reg_b: config.reg_b,
        asem_alpha: config.asem_alpha,
    };

    // Evenly spaced checkpoints bounded by max_checkpoints.
    let ckpt_interval = config
        .checkpoint_interval
        .max(config.steps.div_ceil(config.max_checkpoints.max(1)));

    let mut checkpoints = CheckpointSet::default();
    let mut curve = TrainingCurve::default();
    let mut aborted_at: Option<usize> = None;

    'training: for step in 0..config.steps {
        let idx: Vec<usize> = batcher.next_batch().to_vec();
        let x = fit.gather_inputs(&idx);
        let xp = fit.gather_next_inputs(&idx, task, &encoder, &mut action_rng);
        let r = fit.gather_col(&fit.rewards, &idx);
        let gm = fit.gather_col(&fit.discount_mask, &idx);

        // With the Q network frozen, residuals are plain values.
        let q_vals = q_net.forward_value(&x);
        let qn_vals = q_net.forward_value(&xp);
        let residual_vals = residual_of(&r, &q_vals, &gm, &qn_vals);

        // Adversary step (g ascends its payoff).
        {
            let mut g = Graph::new();
            let g_vars = g_net.insert_params(&mut g);
            let xn = g.constant(x.clone());
            let g_out = g_net.forward(&mut g, &g_vars, xn);
            let q_out = g.constant(q_vals.clone());
            let q_next = g.constant(qn_vals.clone());
            let rewards = g.constant(r.clone());
            let mask = g.constant(gm.clone());
            let g_norm = param_sq_norm(&mut g, &g_vars);
            let snapshot = match method {
                AdvMethod::DeepGmm => Some(g.constant(residual_vals.clone())),
                _ => None,
            };
            let inputs = ObjectiveInputs {
                q_out,
                g_out,
                rewards,
                q_next_out: q_next,
                discount_mask: mask,
                q_sq_norm: None,
                g_sq_norm: Some(g_norm),
                snapshot_residual: snapshot,
            };
            let (_, loss_g) = adversarial_objective(&mut g, method, &inputs, &constants);
            let lv = g.scalar(loss_g);
            if !lv.is_finite() {
                aborted_at = Some(step);
                break 'training;
            }
            let mut grads = g.backward(loss_g);
            let grad_list: Vec<_> = g_vars
                .ids
                .iter()
                .zip(&g_net.params)
                .map(|(&id, p)| grads.take(id, p.dim()))
                .collect();
            g_opt.step(&mut g_net.params, &grad_list);
        }

        // Q step against the updated adversary.
        let g_vals = g_net.forward_value(&x);
        let loss_q_val;
        {
            let mut g = Graph::new();
            let q_vars = q_net.insert_params(&mut g);
            let xn = g.constant(x.clone());
            let xpn = g.constant(xp.clone());
            let q_out = q_net.forward(&mut g, &q_vars, xn);
            let q_next = q_net.forward(&mut g, &q_vars, xpn);
            let g_out = g.constant(g_vals);
            let rewards = g.constant(r.clone());
            let mask = g.constant(gm.clone());
            let q_norm = param_sq_norm(&mut g, &q_vars);
            let snapshot = match method {
                AdvMethod::DeepGmm => Some(g.constant(residual_vals.clone())),
                _ => None,
            };
            let inputs = ObjectiveInputs {
                q_out,
                g_out,
                rewards,
                q_next_out: q_next,
                discount_mask: mask,
                q_sq_norm: Some(q_norm),
                g_sq_norm: None,
                snapshot_residual: snapshot,
            };
            let (loss_q, _) = adversarial_objective(&mut g, method, &inputs, &constants);
            loss_q_val = g.scalar(loss_q);
            if !loss_q_val.is_finite() {
                aborted_at = Some(step);
                break 'training;
            }
            let mut grads = g.backward(loss_q);
            let grad_list: Vec<_> = q_vars
                .ids
                .iter()
                .zip(&q_net.params)
                .map(|(&id, p)| grads.take(id, p.dim()))
                .collect();
            q_opt.step(&mut q_net.params, &grad_list);
        }

        if (step + 1) % ckpt_interval == 0 && checkpoints.len() < config.max_checkpoints {
            checkpoints.snapshots.push(Checkpoint {
                step: step + 1,
                q: q_net.clone(),
                g: g_net.clone(),
            });
        }
        if (step + 1) % config.eval_interval == 0 || step + 1 == config.steps {
            let vm = validation_moment(&q_net, &g_net, &vfit, task, &encoder, &mut valid_action_rng);
            curve.push(CurvePoint {
                step: step + 1,
                train_loss: loss_q_val,
                valid_metric: vm.abs(),
                q_s0: policy_value_of_net(&q_net, &encoder, task),
            });
        }
    }

    if let Some(step) = aborted_at {
        match checkpoints.snapshots.last() {
            Some(last) => {
                q_net = last.q.clone();
                g_net = last.g.clone();
            }
            None => {
                return Err(Error::NonFiniteLoss {
                    step,
                    value: f64::NAN,
                })
            }
        }
    }

    // The final parameters are always part of the candidate set.
    let finite_final = q_net.params.iter().all(|p| p.iter().all(|v| v.is_finite()));
    if finite_final
        && checkpoints
            .snapshots
            .last()
            .map(|c| c.step != config.steps)
            .unwrap_or(true)
    {
        checkpoints.snapshots.push(Checkpoint {
            step: aborted_at.unwrap_or(config.steps),
            q: q_net.clone(),
            g: g_net.clone(),
        });
    }

    let mut diagnostics = BTreeMap::new();
    if let Some(step) = aborted_at {
        diagnostics.insert("aborted_at_step".to_string(), step as f64);
    }
    let final_metric = curve.points.last().map(|p| p.valid_metric).unwrap_or(f64::NAN);
    Ok(FitOutcome {
        q: Arc::new(NeuralQ {
            net: q_net,
            encoder,
        }),
        validation_metric: final_metric,
        curve,
        checkpoints: Some(checkpoints),
        diagnostics,
    })
}

fn residual_of(
    r: &Array2<f64>,
    q: &Array2<f64>,
    gm: &Array2<f64>,
    qn: &Array2<f64>,
) -> Array2<f64> {
    let mut out = r.clone();
    for i in 0..out.nrows() {
        out[[i, 0]] = r[[i, 0]] - q[[i, 0]] + gm[[i, 0]] * qn[[i, 0]];
    }
    out
}

/// Empirical moment `Psi` of a (Q, g) pair on a dataset.
pub fn moment_on(
    q_net: &Mlp,
    g_net: &Mlp,
    data: &FitData,
    task: &Task,
    encoder: &Encoder,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let q = q_net.forward_value(&data.inputs);
    let xp = data.gather_next_inputs(&idx, task, encoder, rng);
    let qn = q_net.forward_value(&xp);
    let gv = g_net.forward_value(&data.inputs);
    let mut total = 0.0;
    for i in 0..data.len() {
        let res = data.rewards[i] - q[[i, 0]] + data.discount_mask[i] * qn[[i, 0]];
        total += res * gv[[i, 0]];
    }
    total / data.len() as f64
}

fn validation_moment(
    q_net: &Mlp,
    g_net: &Mlp,
    data: &FitData,
    task: &Task,
    encoder: &Encoder,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    moment_on(q_net, g_net, data, task, encoder, rng)
}
