//! Single-experiment runner: environment, dataset, split, fit, evaluate
//! against the dynamic-programming oracle, report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ivope::env::{exact_q, Policy};
use ivope::evaluation::{chain_value_bounds, ValueEstimate};
use ivope::neural::policy_value_on_task;

use crate::config::ExperimentConfig;
use crate::registry::{build_env_and_data, fit_estimator};
use crate::{HarnessError, Result};

/// One seed's outcome.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub seed_index: usize,
    pub seed: u64,
    pub rho_hat: f64,
    pub rho_true: f64,
    /// `|Qhat(s_0) - Q*(s_0)|` in raw units (the ablation quantity).
    pub q_s0_abs_error: f64,
    /// Absolute error after the [0,1] normalization.
    pub normalized_abs_error: f64,
    pub validation_metric: f64,
    pub curve_path: String,
    pub q_values_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub mean_rho_hat: f64,
    pub std_rho_hat: f64,
    pub mean_normalized_abs_error: f64,
    pub std_normalized_abs_error: f64,
    pub mean_q_s0_abs_error: f64,
}

/// Full record of one experiment: config echo, per-seed rows, aggregates.
/// Serialized bytes are a pure function of the config (timings live in a
/// sidecar file).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub rho_bounds: (f64, f64),
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
    #[serde(skip)]
    pub wall_times_s: Vec<f64>,
}

impl ExperimentReport {
    pub fn recompute_aggregate(runs: &[RunRecord]) -> Aggregate {
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunRecord) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
        let mean_rho = mean(&|r| r.rho_hat);
        let mean_err = mean(&|r| r.normalized_abs_error);
        let var = |f: &dyn Fn(&RunRecord) -> f64, m: f64| {
            if runs.len() < 2 {
                0.0
            } else {
                runs.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)
            }
        };
        Aggregate {
            mean_rho_hat: mean_rho,
            std_rho_hat: var(&|r| r.rho_hat, mean_rho).sqrt(),
            mean_normalized_abs_error: mean_err,
            std_normalized_abs_error: var(&|r| r.normalized_abs_error, mean_err).sqrt(),
            mean_q_s0_abs_error: mean(&|r| r.q_s0_abs_error),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Report(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

/// Runs `config.n_seeds` independent fits in a worker pool and writes
/// `report.json`, per-seed curve and Q-value CSVs, and a `timings.csv`
/// sidecar (kept out of the report so report bytes stay deterministic).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let curves_dir = config.output_dir.join("curves");
    std::fs::create_dir_all(&curves_dir)?;

    let results: Vec<(RunRecord, f64)> = (0..config.n_seeds)
        .into_par_iter()
        .map(|i| run_one_seed(config, i, &curves_dir))
        .collect::<Result<Vec<_>>>()?;

    let mut runs = Vec::with_capacity(results.len());
    let mut wall_times_s = Vec::with_capacity(results.len());
    for (r, w) in results {
        runs.push(r);
        wall_times_s.push(w);
    }
    let aggregate = ExperimentReport::recompute_aggregate(&runs);
    let report = ExperimentReport {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        rho_bounds: chain_value_bounds(config.env.n_states, config.env.discount),
        runs,
        aggregate,
        wall_times_s,
    };
    report.save(&config.output_dir.join("report.json"))?;
    write_timings(&config.output_dir.join("timings.csv"), &report)?;
    Ok(report)
}

fn run_one_seed(
    config: &ExperimentConfig,
    seed_index: usize,
    curves_dir: &Path,
) -> Result<(RunRecord, f64)> {
    let started = Instant::now();
    let seed = config.dataset.seed + seed_index as u64;
    let (mdp, policy, data) = build_env_and_data(config, seed)?;
    let (train, valid) = data
        .split(config.dataset.split_ratio, seed)
        .map_err(HarnessError::Core)?;
    let outcome =
        fit_estimator(config, &mdp, &policy, &train, &valid, seed).map_err(|e| match e {
            HarnessError::Core(source) => HarnessError::Run { seed_index, source },
            other => other,
        })?;

    let task = ivope::neural::Task::from_mdp(&mdp, &policy);
    let rho_hat = policy_value_on_task(outcome.q.as_ref(), &task);
    let q_star = exact_q(&mdp, &policy).map_err(HarnessError::Core)?;
    let rho_true = exact_policy_value(&mdp, &policy, &q_star);
    let (rho_min, rho_max) = chain_value_bounds(config.env.n_states, config.env.discount);
    let estimate = ValueEstimate::new(rho_hat, Some(rho_true), rho_min, rho_max)
        .map_err(HarnessError::Core)?;

    let curve_path = curves_dir.join(format!("seed-{seed_index}.csv"));
    outcome
        .curve
        .write_csv(&curve_path)
        .map_err(HarnessError::Core)?;
    let q_values_path = curves_dir.join(format!("seed-{seed_index}-q.csv"));
    write_q_values(&q_values_path, &mdp, outcome.q.as_ref(), &q_star)?;

    let record = RunRecord {
        seed_index,
        seed,
        rho_hat,
        rho_true,
        q_s0_abs_error: (outcome.q.q(0, 0) - q_star[[0, 0]]).abs(),
        normalized_abs_error: estimate.normalized_error.unwrap_or(f64::NAN),
        validation_metric: outcome.validation_metric,
        curve_path: curve_path.display().to_string(),
        q_values_path: q_values_path.display().to_string(),
    };
    Ok((record, started.elapsed().as_secs_f64()))
}

fn exact_policy_value(
    mdp: &ivope::env::TabularMdp,
    policy: &Policy,
    q_star: &ndarray::Array2<f64>,
) -> f64 {
    let mut rho = 0.0;
    for s in 0..mdp.n_states {
        rho += mdp.initial_dist[s] * policy.action_probs(s).dot(&q_star.row(s));
    }
    rho
}

/// Per-state fitted and true Q values (the Q-curve figure's raw data).
fn write_q_values(
    path: &Path,
    mdp: &ivope::env::TabularMdp,
    q: &dyn ivope::evaluation::QFunction,
    q_star: &ndarray::Array2<f64>,
) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "state,q_hat,q_star")?;
    for s in 0..mdp.n_states {
        writeln!(w, "{},{},{}", s, q.q(s, 0), q_star[[s, 0]])?;
    }
    Ok(())
}

fn write_timings(path: &PathBuf, report: &ExperimentReport) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "seed_index,wall_time_s")?;
    for (i, t) in report.wall_times_s.iter().enumerate() {
        writeln!(w, "{i},{t}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            n_seeds = 2
            output_dir = "{}"

            [env]
            p_advance = 0.5

            [dataset]
            n_transitions = 3000
            seed = 11

            [estimator]
            name = "lstd-q"
            n_features = 30
            "#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        run_experiment(&config).unwrap();
        let first = std::fs::read(dir.path().join("report.json")).unwrap();
        run_experiment(&config).unwrap();
        let second = std::fs::read(dir.path().join("report.json")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn aggregate_recomputable_from_rows() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let report = run_experiment(&config).unwrap();
        let re = ExperimentReport::recompute_aggregate(&report.runs);
        assert_eq!(re, report.aggregate);
    }
}
