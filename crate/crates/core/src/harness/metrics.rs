//! Accuracy-matrix metrics and run reports.
//!
//! `A[i][j]` is the accuracy on task `j` after training step `i`. Forgetting
//! follows the usual continual-learning definition
//!
//! ```text
//! F = 1/(T−1) · Σ_{j<T−1} ( max_{j ≤ i < T−1} A[i][j] − A[T−1][j] )
//! ```
//!
//! and is not clamped, so improvement on old tasks makes it negative.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MiraError, Result};
use crate::pipeline::{RunProgress, TrainConfig};
use crate::tasks::Setting;

pub type AccuracyMatrix = Vec<Vec<Option<f64>>>;

fn entry(a: &[Vec<Option<f64>>], i: usize, j: usize) -> Result<f64> {
    a.get(i)
        .and_then(|row| row.get(j).copied().flatten())
        .ok_or_else(|| MiraError::Contract(format!("accuracy entry [{i}][{j}] is not populated")))
}

/// Mean of the final row.
pub fn avg_accuracy(a: &[Vec<Option<f64>>]) -> Result<f64> {
    let t = a.len();
    if t == 0 {
        return Err(MiraError::Contract("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for j in 0..t {
        sum += entry(a, t - 1, j)?;
    }
    Ok(sum / t as f64)
}

pub fn forgetting(a: &[Vec<Option<f64>>]) -> Result<f64> {
    let t = a.len();
    if t < 2 {
        return Err(MiraError::Contract(format!(
            "forgetting needs at least 2 steps, got {t}"
        )));
    }
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for i in j..t - 1 {
            best = best.max(entry(a, i, j)?);
        }
        sum += best - entry(a, t - 1, j)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// The leading `(i+1) × (i+1)` block of `a`.
fn prefix(a: &[Vec<Option<f64>>], i: usize) -> AccuracyMatrix {
    a[..=i].iter().map(|row| row[..=i].to_vec()).collect()
}

/// Mean over steps of the average accuracy on the tasks seen so far.
pub fn step_avg_accuracy(a: &[Vec<Option<f64>>]) -> Result<f64> {
    if a.is_empty() {
        return Err(MiraError::Contract("empty accuracy matrix".into()));
    }
    let mut sum = 0.0;
    for i in 0..a.len() {
        sum += avg_accuracy(&prefix(a, i))?;
    }
    Ok(sum / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub seed: u64,
    pub num_tasks: usize,
    /// Continual settings only.
    pub accuracy: AccuracyMatrix,
    /// DG only.
    pub held_out_accuracy: Option<f64>,
    pub final_avg_acc: f64,
    pub step_avg_acc: f64,
    pub forgetting: Option<f64>,
    /// Evaluation samples whose read was degenerate in at least one layer.
    pub degenerate_eval: usize,
    /// Same count over consolidation epochs.
    pub degenerate_train: usize,
    pub warnings: Vec<String>,
    pub config: TrainConfig,
}

impl EvalReport {
    pub fn from_run(cfg: &TrainConfig, progress: &RunProgress) -> Result<Self> {
        let degenerate_train = progress
            .consolidate_logs
            .iter()
            .flat_map(|l| l.degenerate.iter())
            .sum();
        let (final_avg_acc, step_avg_acc, forgetting_value, num_tasks) =
            if cfg.setting.is_continual() {
                let a = &progress.accuracy;
                let f = if a.len() >= 2 {
                    Some(forgetting(a)?)
                } else {
                    None
                };
                (avg_accuracy(a)?, step_avg_accuracy(a)?, f, a.len())
            } else {
                let acc = progress.held_out_accuracy.ok_or_else(|| {
                    MiraError::Contract("held-out accuracy not evaluated yet".into())
                })?;
                let tasks = progress
                    .trace
                    .iter()
                    .filter(|s| matches!(s, crate::pipeline::Stage::Adapt(_)))
                    .count();
                (acc, acc, None, tasks)
            };
        Ok(Self {
            setting: cfg.setting,
            seed: cfg.seed,
            num_tasks,
            accuracy: progress.accuracy.clone(),
            held_out_accuracy: progress.held_out_accuracy,
            final_avg_acc,
            step_avg_acc,
            forgetting: forgetting_value,
            degenerate_eval: progress.degenerate_eval,
            degenerate_train,
            warnings: progress.warnings.clone(),
            config: cfg.clone(),
        })
    }

    /// `step,task,acc,avg_acc,forgetting` rows. Step-level columns repeat on
    /// every row of that step; forgetting is empty before the second step.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "task", "acc", "avg_acc", "forgetting"])?;
        if self.setting.is_continual() {
            for i in 0..self.accuracy.len() {
                let block = prefix(&self.accuracy, i);
                let avg = avg_accuracy(&block)?;
                let f = if i >= 1 {
                    forgetting(&block)?.to_string()
                } else {
                    String::new()
                };
                for j in 0..=i {
                    let acc = entry(&self.accuracy, i, j)?;
                    w.write_record([
                        i.to_string(),
                        j.to_string(),
                        acc.to_string(),
                        avg.to_string(),
                        f.clone(),
                    ])?;
                }
            }
        } else if let Some(acc) = self.held_out_accuracy {
            let step = self.num_tasks.saturating_sub(1);
            w.write_record([
                step.to_string(),
                self.num_tasks.to_string(),
                acc.to_string(),
                acc.to_string(),
                String::new(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| MiraError::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
