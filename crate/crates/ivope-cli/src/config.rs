//! Experiment configuration: a TOML file with a fully validated schema.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    #[serde(default = "default_n_states")]
    pub n_states: usize,
    pub p_advance: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

fn default_n_states() -> usize {
    100
}

fn default_discount() -> f64 {
    0.99
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_transitions: usize,
    /// Distribution shift of the state draw; 0 keeps the natural pooled
    /// rollout distribution, any other value resamples states with weight
    /// `exp(alpha * s)`.
    #[serde(default)]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
}

fn default_split_ratio() -> f64 {
    0.9
}

/// Estimator selection plus hyperparameters. The `name` tag picks the
/// algorithm; unknown names or keys fail at parse time, before any compute.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EstimatorSpec {
    LstdQ {
        #[serde(default = "default_grid_features")]
        n_features: usize,
        #[serde(default)]
        ridge: f64,
        /// Indicator features over non-terminal states instead of the
        /// Gaussian grid.
        #[serde(default)]
        one_hot: bool,
    },
    LinearDbrm {
        #[serde(default = "default_grid_features")]
        n_features: usize,
        #[serde(default)]
        one_hot: bool,
    },
    LinearFqe {
        #[serde(default = "default_grid_features")]
        n_features: usize,
        #[serde(default = "default_fqe_iters")]
        n_iters: usize,
        #[serde(default)]
        ridge: f64,
    },
    KernelIv {
        #[serde(default = "default_rff_features")]
        n_features: usize,
        #[serde(default = "default_kiv_lambda")]
        lambda1: f64,
        #[serde(default = "default_kiv_lambda")]
        lambda2: f64,
        /// Squared-exponential bandwidth; the median heuristic when absent.
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    Dbrm {
        #[serde(flatten)]
        net: NetParams,
        #[serde(default = "default_neural_steps")]
        steps: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
    },
    Fqe {
        #[serde(flatten)]
        net: NetParams,
        #[serde(default = "default_neural_steps")]
        steps: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_target_period")]
        target_update_period: usize,
    },
    DeepIv {
        #[serde(default = "default_treatment_hidden")]
        treatment_hidden: Vec<usize>,
        #[serde(default = "default_neural_steps")]
        treatment_steps: usize,
        #[serde(default = "default_treatment_lr")]
        treatment_lr: f64,
        #[serde(default = "default_hidden")]
        value_hidden: Vec<usize>,
        #[serde(default = "default_neural_steps")]
        value_steps: usize,
        #[serde(default = "default_lr")]
        value_lr: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_mc_samples")]
        n_mc_samples: usize,
    },
    Dfiv {
        #[serde(default = "default_hidden")]
        value_hidden: Vec<usize>,
        #[serde(default = "default_hidden")]
        instrument_hidden: Vec<usize>,
        #[serde(default = "default_dfiv_steps")]
        steps: usize,
        #[serde(default = "default_dfiv_batch")]
        batch_size: usize,
        #[serde(default = "default_lr")]
        value_lr: f64,
        #[serde(default = "default_lr")]
        instrument_lr: f64,
        #[serde(default = "default_dfiv_lambda")]
        lambda1: f64,
        #[serde(default = "default_dfiv_lambda")]
        lambda2: f64,
    },
    #[serde(rename = "deepgmm")]
    DeepGmm {
        #[serde(flatten)]
        adv: AdversarialParams,
    },
    Agmm {
        #[serde(flatten)]
        adv: AdversarialParams,
    },
    Asem {
        #[serde(flatten)]
        adv: AdversarialParams,
        #[serde(default = "default_asem_alpha")]
        alpha: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetParams {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default = "default_activation")]
    pub activation: String,
}

impl Default for NetParams {
    fn default() -> Self {
        NetParams {
            hidden: default_hidden(),
            layer_norm: false,
            activation: default_activation(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdversarialParams {
    #[serde(default = "default_hidden")]
    pub q_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub g_hidden: Vec<usize>,
    #[serde(default = "default_adv_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_g_mult")]
    pub g_lr_multiplier: f64,
    #[serde(default = "default_beta1")]
    pub oadam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub oadam_beta2: f64,
    #[serde(default = "default_param_reg")]
    pub reg_a: f64,
    #[serde(default = "default_param_reg")]
    pub reg_b: f64,
}

impl Default for AdversarialParams {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

fn default_grid_features() -> usize {
    90
}
fn default_fqe_iters() -> usize {
    500
}
fn default_rff_features() -> usize {
    512
}
fn default_kiv_lambda() -> f64 {
    1e-6
}
fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}
fn default_treatment_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> String {
    "relu".into()
}
fn default_neural_steps() -> usize {
    100_000
}
fn default_adv_steps() -> usize {
    200_000
}
fn default_dfiv_steps() -> usize {
    100_000
}
fn default_batch() -> usize {
    1024
}
fn default_dfiv_batch() -> usize {
    2048
}
fn default_lr() -> f64 {
    1e-4
}
fn default_treatment_lr() -> f64 {
    1e-3
}
fn default_target_period() -> usize {
    100
}
fn default_mc_samples() -> usize {
    10
}
fn default_g_mult() -> f64 {
    5.0
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.9
}
fn default_param_reg() -> f64 {
    1e-6
}
fn default_asem_alpha() -> f64 {
    1e-6
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::LstdQ { .. } => "lstd-q",
            EstimatorSpec::LinearDbrm { .. } => "linear-dbrm",
            EstimatorSpec::LinearFqe { .. } => "linear-fqe",
            EstimatorSpec::KernelIv { .. } => "kernel-iv",
            EstimatorSpec::Dbrm { .. } => "dbrm",
            EstimatorSpec::Fqe { .. } => "fqe",
            EstimatorSpec::DeepIv { .. } => "deep-iv",
            EstimatorSpec::Dfiv { .. } => "dfiv",
            EstimatorSpec::DeepGmm { .. } => "deepgmm",
            EstimatorSpec::Agmm { .. } => "agmm",
            EstimatorSpec::Asem { .. } => "asem",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub dataset: DatasetSpec,
    pub estimator: EstimatorSpec,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    /// Multiplies neural step budgets; < 1 shrinks runs for desk-scale CI.
    #[serde(default = "default_budget_scale")]
    pub budget_scale: f64,
}

fn default_n_seeds() -> usize {
    5
}

fn default_budget_scale() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.n_states < 2 {
            return Err(HarnessError::Config("env.n_states must be >= 2".into()));
        }
        if !(self.env.p_advance > 0.0 && self.env.p_advance <= 1.0) {
            return Err(HarnessError::Config(format!(
                "env.p_advance must be in (0,1], got {}",
                self.env.p_advance
            )));
        }
        if !(self.env.discount > 0.0 && self.env.discount < 1.0) {
            return Err(HarnessError::Config(format!(
                "env.discount must be in (0,1), got {}",
                self.env.discount
            )));
        }
        if self.dataset.n_transitions < 2 {
            return Err(HarnessError::Config(
                "dataset.n_transitions must be >= 2".into(),
            ));
        }
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return Err(HarnessError::Config(
                "dataset.split_ratio must be in (0,1)".into(),
            ));
        }
        if self.n_seeds == 0 {
            return Err(HarnessError::Config("n_seeds must be >= 1".into()));
        }
        if !(self.budget_scale > 0.0) {
            return Err(HarnessError::Config("budget_scale must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        n_seeds = 2
        output_dir = "out"

        [env]
        p_advance = 0.5

        [dataset]
        n_transitions = 1000
        seed = 7

        [estimator]
        name = "lstd-q"
    "#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.env.n_states, 100);
        assert_eq!(cfg.env.discount, 0.99);
        assert_eq!(cfg.dataset.split_ratio, 0.9);
        assert_eq!(cfg.estimator.name(), "lstd-q");
    }

    #[test]
    fn rejects_unknown_estimator_name() {
        let text = BASE.replace("lstd-q", "mystery-method");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{BASE}\nwhatever = 3\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text2 = BASE.replace("name = \"lstd-q\"", "name = \"lstd-q\"\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&text2).is_err());
    }

    #[test]
    fn default_protocol_constants_follow_the_selection_protocol() {
        // Batch sizes 1024 (2048 for DFIV), 9:1 split, OAdam betas for
        // adversarial methods.
        let adv = AdversarialParams::default();
        assert_eq!(adv.batch_size, 1024);
        assert_eq!((adv.oadam_beta1, adv.oadam_beta2), (0.5, 0.9));
        assert_eq!(default_dfiv_batch(), 2048);
        assert_eq!(default_split_ratio(), 0.9);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
