//! Ablation sweeps over dataset size, feature count, transition
//! randomness, and distribution shift.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{EstimatorSpec, ExperimentConfig};
use crate::experiment::{run_experiment, ExperimentReport};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    DatasetSize,
    NFeatures,
    PAdvance,
    Alpha,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dataset-size" => Ok(AblationAxis::DatasetSize),
            "n-features" => Ok(AblationAxis::NFeatures),
            "p-advance" => Ok(AblationAxis::PAdvance),
            "alpha" => Ok(AblationAxis::Alpha),
            other => Err(HarnessError::Config(format!("unknown ablation axis `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationAxis::DatasetSize => "dataset_size",
            AblationAxis::NFeatures => "n_features",
            AblationAxis::PAdvance => "p_advance",
            AblationAxis::Alpha => "alpha",
        }
    }
}

/// One row of the merged ablation table: the absolute error of
/// `Q(s_0, right)` per (axis value, estimator, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: f64,
    pub estimator: String,
    pub seed_index: usize,
    pub q_s0_abs_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<ExperimentReport>,
}

impl AblationTable {
    /// Mean error per axis value, in the order the values were run.
    pub fn mean_errors(&self) -> Vec<(f64, f64)> {
        let mut order: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.value) {
                order.push(r.value);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let errs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.value == v)
                    .map(|r| r.q_s0_abs_error)
                    .collect();
                (v, errs.iter().sum::<f64>() / errs.len() as f64)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "axis,value,estimator,seed_index,q_s0_abs_error")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.axis, r.value, r.estimator, r.seed_index, r.q_s0_abs_error
            )?;
        }
        Ok(())
    }
}

fn patched(base: &ExperimentConfig, axis: AblationAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::DatasetSize => {
            if value < 2.0 {
                return Err(HarnessError::Config(format!("dataset size {value} too small")));
            }
            cfg.dataset.n_transitions = value as usize;
        }
        AblationAxis::NFeatures => {
            let n = value as usize;
            match &mut cfg.estimator {
                EstimatorSpec::LstdQ { n_features, .. }
                | EstimatorSpec::LinearDbrm { n_features, .. }
                | EstimatorSpec::LinearFqe { n_features, .. }
                | EstimatorSpec::KernelIv { n_features, .. } => *n_features = n,
                other => {
                    return Err(HarnessError::Config(format!(
                        "n-features ablation does not apply to `{}`",
                        other.name()
                    )))
                }
            }
        }
        AblationAxis::PAdvance => {
            cfg.env.p_advance = value;
        }
        AblationAxis::Alpha => {
            cfg.dataset.alpha = value;
        }
    }
    // The output of each point goes to its own subdirectory.
    cfg.output_dir = base
        .output_dir
        .join(format!("{}-{}", axis.label(), value));
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one experiment per axis value and merges the per-seed
/// `|Qhat(s_0) - Q*(s_0)|` rows into a single table (the ablation figure's
/// raw data).
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[f64],
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one value".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &value in values {
        let cfg = patched(base, axis, value)?;
        let report = run_experiment(&cfg)?;
        for run in &report.runs {
            rows.push(AblationRow {
                axis: axis.label().to_string(),
                value,
                estimator: cfg.estimator.name().to_string(),
                seed_index: run.seed_index,
                q_s0_abs_error: run.q_s0_abs_error,
            });
        }
        reports.push(report);
    }
    let table = AblationTable { rows, reports };
    std::fs::create_dir_all(&base.output_dir)?;
    table.write_csv(&base.output_dir.join("ablation.csv"))?;
    Ok(table)
}
