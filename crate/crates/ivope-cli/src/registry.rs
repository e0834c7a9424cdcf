//! Maps estimator specs onto core fits, with a per-method held-out
//! validation metric.

use std::sync::Arc;

use ivope::data::TransitionDataset;
use ivope::env::{Policy, StateEmbedding, TabularMdp};
use ivope::features::{
    median_heuristic_bandwidth, state_action_concat, FeatureMap, GaussianGrid, RffSpec,
    TabularOneHot,
};
use ivope::linear::{self, build_design, LinearQ};
use ivope::neural::{
    self, AdvMethod, AdversarialConfig, CurvePoint, DbrmConfig, DeepIvConfig, DfivConfig,
    FitOutcome, FqeConfig, Task, TrainingCurve,
};
use ivope::nn::Activation;
use ivope::rng::{stream_rng, Stream};

use crate::config::{AdversarialParams, EstimatorSpec, ExperimentConfig};
use crate::{HarnessError, Result};

fn parse_activation(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "elu" => Ok(Activation::Elu),
        other => Err(HarnessError::Config(format!("unknown activation `{other}`"))),
    }
}

fn scaled(steps: usize, budget_scale: f64) -> usize {
    ((steps as f64 * budget_scale).round() as usize).max(1)
}

/// Builds the state(-action) feature map for linear estimators. The chain's
/// one-hot map indexes raw state ids, so it gets an index embedding.
fn linear_features(
    mdp: &TabularMdp,
    n_features: usize,
    one_hot: bool,
) -> Result<(Arc<dyn FeatureMap>, StateEmbedding)> {
    if one_hot {
        let live = mdp.terminal.iter().filter(|&&t| !t).count();
        let map: Arc<dyn FeatureMap> = Arc::new(
            state_action_concat(TabularOneHot::new(live), mdp.n_actions)
                .map_err(HarnessError::Core)?,
        );
        let index_embedding = StateEmbedding::new(ndarray::Array1::from_iter(
            (0..mdp.n_states).map(|i| i as f64),
        ));
        Ok((map, index_embedding))
    } else {
        let map: Arc<dyn FeatureMap> = Arc::new(
            state_action_concat(
                GaussianGrid::new(n_features).map_err(HarnessError::Core)?,
                mdp.n_actions,
            )
            .map_err(HarnessError::Core)?,
        );
        Ok((map, StateEmbedding::chain(mdp.n_states)))
    }
}

/// Mean squared TD error of a fitted linear Q on a dataset.
fn linear_td_metric(
    q: &LinearQ,
    data: &TransitionDataset,
    policy: &Policy,
    embedding: &StateEmbedding,
    map: &dyn FeatureMap,
    gamma: f64,
    seed: u64,
) -> Result<f64> {
    let (design, _) =
        build_design(data, policy, embedding, map, 1, seed).map_err(HarnessError::Core)?;
    let x = design.regressor(gamma);
    let pred = x.dot(&q.theta);
    let resid = &design.rewards - &pred;
    Ok(resid.dot(&resid) / data.len() as f64)
}

fn one_point_curve(valid_metric: f64, q_s0: f64) -> TrainingCurve {
    let mut curve = TrainingCurve::default();
    curve.push(CurvePoint {
        step: 1,
        train_loss: f64::NAN,
        valid_metric,
        q_s0,
    });
    curve
}

/// Runs the configured estimator on one train/valid split. `seed` drives
/// all fit-time randomness.
pub fn fit_estimator(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    policy: &Policy,
    train: &TransitionDataset,
    valid: &TransitionDataset,
    seed: u64,
) -> Result<FitOutcome> {
    let task = Task::from_mdp(mdp, policy);
    let gamma = mdp.discount;
    match &config.estimator {
        EstimatorSpec::LstdQ {
            n_features,
            ridge,
            one_hot,
        } => {
            let (map, embedding) = linear_features(mdp, *n_features, *one_hot)?;
            let q = linear::lstd_q(train, policy, &embedding, map.clone(), gamma, *ridge, seed)
                .map_err(HarnessError::Core)?;
            let vm = linear_td_metric(&q, valid, policy, &embedding, map.as_ref(), gamma, seed)?;
            let rho = neural::policy_value_on_task(&q, &task);
            Ok(FitOutcome {
                q: Arc::new(q),
                validation_metric: vm,
                curve: one_point_curve(vm, rho),
                checkpoints: None,
                diagnostics: Default::default(),
            })
        }
        EstimatorSpec::LinearDbrm { n_features, one_hot } => {
            let (map, embedding) = linear_features(mdp, *n_features, *one_hot)?;
            let q = linear::linear_dbrm(train, policy, &embedding, map.clone(), gamma, seed)
                .map_err(HarnessError::Core)?;
            let vm = linear_td_metric(&q, valid, policy, &embedding, map.as_ref(), gamma, seed)?;
            let rho = neural::policy_value_on_task(&q, &task);
            Ok(FitOutcome {
                q: Arc::new(q),
                validation_metric: vm,
                curve: one_point_curve(vm, rho),
                checkpoints: None,
                diagnostics: Default::default(),
            })
        }
        EstimatorSpec::LinearFqe {
            n_features,
            n_iters,
            ridge,
        } => {
            let (map, embedding) = linear_features(mdp, *n_features, false)?;
            let (q, trace) = linear::linear_fqe_trace(
                train,
                policy,
                &embedding,
                map.clone(),
                gamma,
                *n_iters,
                *ridge,
                seed,
                true,
            )
            .map_err(HarnessError::Core)?;
            let vm = linear_td_metric(&q, valid, policy, &embedding, map.as_ref(), gamma, seed)?;
            // Per-iteration policy value curve.
            let mut curve = TrainingCurve::default();
            for (k, theta) in trace.iter().enumerate() {
                let iter_q = LinearQ {
                    map: map.clone(),
                    embedding: embedding.clone(),
                    theta: theta.clone(),
                };
                curve.push(CurvePoint {
                    step: k + 1,
                    train_loss: f64::NAN,
                    valid_metric: f64::NAN,
                    q_s0: neural::policy_value_on_task(&iter_q, &task),
                });
            }
            Ok(FitOutcome {
                q: Arc::new(q),
                validation_metric: vm,
                curve,
                checkpoints: None,
                diagnostics: Default::default(),
            })
        }
        EstimatorSpec::KernelIv {
            n_features,
            lambda1,
            lambda2,
            bandwidth,
        } => {
            let embedding = StateEmbedding::chain(mdp.n_states);
            let bw = match bandwidth {
                Some(b) => *b,
                None => {
                    let positions: Vec<f64> = train
                        .transitions
                        .iter()
                        .take(1000)
                        .map(|t| embedding.embed(t.state))
                        .collect();
                    median_heuristic_bandwidth(&positions).map_err(HarnessError::Core)?
                }
            };
            let rff_x = RffSpec::new(*n_features, 1, bw, seed).map_err(HarnessError::Core)?;
            let rff_z =
                RffSpec::new(*n_features, 1, bw, seed.wrapping_add(1)).map_err(HarnessError::Core)?;
            let fit = linear::kernel_iv(
                train, policy, &embedding, rff_x, rff_z, *lambda1, *lambda2, gamma, seed,
            )
            .map_err(HarnessError::Core)?;
            let vm = fit
                .stage2_validation_loss(valid, policy, &embedding, seed)
                .map_err(HarnessError::Core)?;
            let rho = neural::policy_value_on_task(&fit.q, &task);
            Ok(FitOutcome {
                q: Arc::new(fit.q),
                validation_metric: vm,
                curve: one_point_curve(vm, rho),
                checkpoints: None,
                diagnostics: Default::default(),
            })
        }
        EstimatorSpec::Dbrm {
            net,
            steps,
            batch_size,
            learning_rate,
        } => {
            let cfg = DbrmConfig {
                hidden: net.hidden.clone(),
                activation: parse_activation(&net.activation)?,
                layer_norm: net.layer_norm,
                steps: scaled(*steps, config.budget_scale),
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                eval_interval: eval_interval_for(scaled(*steps, config.budget_scale)),
                seed,
            };
            neural::fit_dbrm_neural(train, valid, &task, &cfg).map_err(HarnessError::Core)
        }
        EstimatorSpec::Fqe {
            net,
            steps,
            batch_size,
            learning_rate,
            target_update_period,
        } => {
            let cfg = FqeConfig {
                hidden: net.hidden.clone(),
                activation: parse_activation(&net.activation)?,
                layer_norm: net.layer_norm,
                steps: scaled(*steps, config.budget_scale),
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                target_update_period: *target_update_period,
                eval_interval: eval_interval_for(scaled(*steps, config.budget_scale)),
                seed,
            };
            neural::fit_fqe(train, valid, &task, &cfg).map_err(HarnessError::Core)
        }
        EstimatorSpec::DeepIv {
            treatment_hidden,
            treatment_steps,
            treatment_lr,
            value_hidden,
            value_steps,
            value_lr,
            batch_size,
            n_mc_samples,
        } => {
            let cfg = DeepIvConfig {
                treatment_hidden: treatment_hidden.clone(),
                treatment_steps: scaled(*treatment_steps, config.budget_scale),
                treatment_lr: *treatment_lr,
                value_hidden: value_hidden.clone(),
                value_steps: scaled(*value_steps, config.budget_scale),
                value_lr: *value_lr,
                activation: Activation::Relu,
                layer_norm: false,
                batch_size: *batch_size,
                n_mc_samples: *n_mc_samples,
                eval_interval: eval_interval_for(scaled(*value_steps, config.budget_scale)),
                seed,
            };
            neural::fit_deep_iv(train, valid, &task, &cfg).map_err(HarnessError::Core)
        }
        EstimatorSpec::Dfiv {
            value_hidden,
            instrument_hidden,
            steps,
            batch_size,
            value_lr,
            instrument_lr,
            lambda1,
            lambda2,
        } => {
            let cfg = DfivConfig {
                value_hidden: value_hidden.clone(),
                instrument_hidden: instrument_hidden.clone(),
                activation: Activation::Relu,
                layer_norm: false,
                steps: scaled(*steps, config.budget_scale),
                batch_size: *batch_size,
                value_lr: *value_lr,
                instrument_lr: *instrument_lr,
                lambda1: *lambda1,
                lambda2: *lambda2,
                eval_interval: eval_interval_for(scaled(*steps, config.budget_scale)),
                seed,
            };
            neural::fit_dfiv(train, valid, &task, &cfg).map_err(HarnessError::Core)
        }
        EstimatorSpec::DeepGmm { adv } => {
            fit_adv(config, &task, train, valid, AdvMethod::DeepGmm, adv, 0.0, seed)
        }
        EstimatorSpec::Agmm { adv } => {
            fit_adv(config, &task, train, valid, AdvMethod::Agmm, adv, 0.0, seed)
        }
        EstimatorSpec::Asem { adv, alpha } => {
            fit_adv(config, &task, train, valid, AdvMethod::Asem, adv, *alpha, seed)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_adv(
    config: &ExperimentConfig,
    task: &Task,
    train: &TransitionDataset,
    valid: &TransitionDataset,
    method: AdvMethod,
    adv: &AdversarialParams,
    alpha: f64,
    seed: u64,
) -> Result<FitOutcome> {
    let steps = scaled(adv.steps, config.budget_scale);
    let cfg = AdversarialConfig {
        q_hidden: adv.q_hidden.clone(),
        g_hidden: adv.g_hidden.clone(),
        activation: Activation::Relu,
        layer_norm: false,
        steps,
        batch_size: adv.batch_size,
        learning_rate: adv.learning_rate,
        g_lr_multiplier: adv.g_lr_multiplier,
        oadam_betas: (adv.oadam_beta1, adv.oadam_beta2),
        reg_a: adv.reg_a,
        reg_b: adv.reg_b,
        asem_alpha: alpha,
        checkpoint_interval: 1000,
        max_checkpoints: 50,
        eval_interval: eval_interval_for(steps),
        seed,
    };
    neural::fit_adversarial(train, valid, task, method, &cfg).map_err(HarnessError::Core)
}

/// Aims for ~100 curve points per run.
fn eval_interval_for(steps: usize) -> usize {
    (steps / 100).max(1)
}

/// Builds the chain environment and the offline dataset of one run.
pub fn build_env_and_data(
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<(TabularMdp, Policy, TransitionDataset)> {
    let mdp = ivope::env::make_chain_mdp(
        config.env.n_states,
        config.env.p_advance,
        config.env.discount,
    )
    .map_err(HarnessError::Core)?;
    let policy = Policy::single_action(config.env.n_states);
    let data = if config.dataset.alpha == 0.0 {
        ivope::data::generate_chain_dataset(&mdp, config.dataset.n_transitions, run_seed)
            .map_err(HarnessError::Core)?
    } else {
        let embedding = StateEmbedding::chain(config.env.n_states);
        ivope::data::resample_shifted(
            &mdp,
            &embedding,
            &policy,
            config.dataset.alpha,
            config.dataset.n_transitions,
            run_seed,
        )
        .map_err(HarnessError::Core)?
    };
    Ok((mdp, policy, data))
}

/// Keeps a deterministic RNG handy for miscellaneous harness draws.
pub fn harness_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, Stream::Search)
}
