//! Grid runs over separation function, adapters per task and query module.

use rayon::prelude::*;

use crate::error::Result;
use crate::harness::metrics::EvalReport;
use crate::memory::SeparationKind;
use crate::pipeline::{run_mira, TrainConfig};
use crate::retrieval::QueryKind;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub separation: SeparationKind,
    pub adapters_per_task: usize,
    pub query_kind: QueryKind,
    pub seed: u64,
    pub report: EvalReport,
    pub metrics_csv: String,
}

#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub separations: Vec<SeparationKind>,
    pub adapters_per_task: Vec<usize>,
    pub query_kinds: Vec<QueryKind>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn full(beta: f64, seeds: Vec<u64>) -> Self {
        Self {
            separations: SeparationKind::all(beta).to_vec(),
            adapters_per_task: vec![1, 2, 5, 10],
            query_kinds: QueryKind::ALL.to_vec(),
            seeds,
        }
    }

    fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &separation in &self.separations {
            for &m in &self.adapters_per_task {
                for &query_kind in &self.query_kinds {
                    for &seed in &self.seeds {
                        out.push(TrainConfig {
                            separation,
                            adapters_per_task: m,
                            query_kind,
                            seed,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell of the grid in parallel. Each cell is independent and
/// deterministic, so the result does not depend on scheduling.
pub fn run_ablation(base: &TrainConfig, grid: &AblationGrid) -> Result<Vec<AblationCell>> {
    grid.configs(base)
        .into_par_iter()
        .map(|cfg| {
            let stream = cfg.load_stream()?;
            let (_, report) = run_mira(stream, &cfg)?;
            Ok(AblationCell {
                separation: cfg.separation,
                adapters_per_task: cfg.adapters_per_task,
                query_kind: cfg.query_kind,
                seed: cfg.seed,
                metrics_csv: report.metrics_csv()?,
                report,
            })
        })
        .collect()
}

/// For each (separation, query kind, seed), whether average accuracy is
/// non-decreasing in the number of adapters per task.
pub fn adapter_count_trend(cells: &[AblationCell]) -> Vec<String> {
    let mut keys: Vec<(&'static str, QueryKind, u64)> = cells
        .iter()
        .map(|c| (c.separation.name(), c.query_kind, c.seed))
        .collect();
    keys.dedup();
    keys.sort_by_key(|k| (k.0, k.1.name(), k.2));
    keys.dedup();
    keys.into_iter()
        .map(|(sep, q, seed)| {
            let mut row: Vec<(usize, f64)> = cells
                .iter()
                .filter(|c| c.separation.name() == sep && c.query_kind == q && c.seed == seed)
                .map(|c| (c.adapters_per_task, c.report.final_avg_acc))
                .collect();
            row.sort_by_key(|r| r.0);
            let monotone = row.windows(2).all(|w| w[1].1 >= w[0].1);
            let accs: Vec<String> = row.iter().map(|(m, a)| format!("m={m}:{a:.3}")).collect();
            format!(
                "sep={sep} query={} seed={seed} {} non-decreasing={monotone}",
                q.name(),
                accs.join(" ")
            )
        })
        .collect()
}
