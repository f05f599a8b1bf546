//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{MiraError, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::harness::selftest::run_selftest;
use crate::numerics::Tensor;
use crate::pipeline::{evaluate, Runner, Stage, TrainConfig};
use crate::tasks::{build_stream, read_domains_csv, Setting};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const SEED_ENV: &str = "MIRA_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "mira",
    version,
    about = "Memory-retrieved LoRA adapters for continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline; writes report.json, metrics.csv and checkpoint.mira.
    Run {
        #[arg(long)]
        setting: Option<Setting>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the next adaptation stage.
    Adapt {
        /// Resume from this checkpoint; start a fresh run when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        setting: Option<Setting>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the next consolidation stage and any evaluation that follows it.
    Consolidate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write report.json and metrics.csv here once the run is complete.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the test splits of a stream CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: PathBuf,
    },
    /// Memory sizes, key norms and retrieval entropy on a probe set.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        probe: usize,
    },
    /// Runs the built-in invariant checks.
    Selftest,
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(MiraError),
}

impl From<MiraError> for CliError {
    fn from(e: MiraError) -> Self {
        Self::Runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Config from file (or defaults), then the seed by precedence
/// `--seed` > `MIRA_SEED` > config.
fn resolve_config(
    path: Option<&Path>,
    setting: Option<Setting>,
    seed: Option<u64>,
) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(e.into()))?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Runtime(MiraError::Config(format!("{}: {e}", p.display())))
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = setting {
        cfg.setting = s;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runner_from(ckpt: Checkpoint) -> Result<Runner> {
    let stream = ckpt.config.load_stream()?;
    Runner::resume(ckpt.config, ckpt.state, ckpt.progress, stream)
}

fn save_runner(runner: &Runner, out: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            config: runner.config.clone(),
            state: runner.state.clone(),
            progress: runner.progress.clone(),
        },
        out,
    )
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run {
            setting,
            config,
            seed,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), setting, seed)?;
            let stream = cfg.load_stream()?;
            let mut runner = Runner::new(cfg, stream)?;
            runner.run_until(|_, _| false)?;
            let report = runner.report()?;
            report.write(&out)?;
            save_runner(&runner, &out.join("checkpoint.mira"))?;
            println!("{}", serde_json::to_string(&summary(&report))?);
            Ok(())
        }
        Command::Adapt {
            checkpoint,
            config,
            setting,
            seed,
            out,
        } => {
            let mut runner = match checkpoint {
                Some(path) => {
                    if config.is_some() || setting.is_some() || seed.is_some() {
                        return Err(CliError::Usage(
                            "--config, --setting and --seed only apply to a fresh run".into(),
                        ));
                    }
                    runner_from(load_checkpoint(&path)?)?
                }
                None => {
                    let cfg = resolve_config(config.as_deref(), setting, seed)?;
                    let stream = cfg.load_stream()?;
                    Runner::new(cfg, stream)?
                }
            };
            match runner.next_stage() {
                Some(Stage::Adapt(_)) => {}
                other => return Err(stage_error("adaptation", other)),
            }
            runner.run_until(|done, _| matches!(done, Stage::Adapt(_)))?;
            save_runner(&runner, &out)?;
            println!(
                "{}",
                serde_json::to_string(&json!({
                    "memory_sizes": runner.state.memory_sizes(),
                    "next_stage": runner.next_stage(),
                }))?
            );
            Ok(())
        }
        Command::Consolidate {
            checkpoint,
            out,
            report_dir,
        } => {
            let mut runner = runner_from(load_checkpoint(&checkpoint)?)?;
            match runner.next_stage() {
                Some(Stage::Consolidate(_) | Stage::ConsolidateAll) => {}
                other => return Err(stage_error("consolidation", other)),
            }
            runner.run_until(|done, next| {
                matches!(
                    done,
                    Stage::Consolidate(_) | Stage::ConsolidateAll | Stage::Evaluate(_)
                ) && !matches!(next, Some(Stage::Evaluate(_)))
            })?;
            save_runner(&runner, &out)?;
            if runner.is_done() {
                let report = runner.report()?;
                if let Some(dir) = report_dir {
                    report.write(&dir)?;
                }
                println!("{}", serde_json::to_string(&summary(&report))?);
            } else {
                println!(
                    "{}",
                    serde_json::to_string(&json!({"next_stage": runner.next_stage()}))?
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, stream } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let domains = read_domains_csv(&stream)?;
            let cfg = &ckpt.config;
            let stream = build_stream(cfg.setting, &domains, &cfg.data.split, cfg.seed)?;
            let adapted: BTreeSet<usize> = ckpt
                .progress
                .trace
                .iter()
                .filter_map(|s| match s {
                    Stage::Adapt(t) => Some(*t),
                    _ => None,
                })
                .collect();
            let allowed: Option<BTreeSet<usize>> = (cfg.setting == Setting::Cil).then(|| {
                adapted
                    .iter()
                    .filter_map(|&t| stream.tasks.get(t))
                    .flat_map(|t| t.label_set.iter().copied())
                    .collect()
            });
            let mut accs = Vec::new();
            let mut degenerate = 0;
            for test in &stream.tests {
                let (acc, deg) = evaluate(&ckpt.state, test, allowed.as_ref())?;
                accs.push(acc);
                degenerate += deg;
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "setting": cfg.setting,
                    "accuracy": accs,
                    "mean_accuracy": mean,
                    "degenerate_samples": degenerate,
                }))?
            );
            Ok(())
        }
        Command::Inspect { checkpoint, probe } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&inspect(&ckpt, probe)?)?);
            Ok(())
        }
        Command::Selftest => {
            let results = run_selftest();
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Runtime(MiraError::Contract(
                    "selftest failed".into(),
                )))
            }
        }
    }
}

fn stage_error(wanted: &str, next: Option<Stage>) -> CliError {
    CliError::Runtime(MiraError::Contract(match next {
        Some(s) => format!("cannot run {wanted}: next stage is {s:?}"),
        None => format!("cannot run {wanted}: the run is complete"),
    }))
}

fn summary(report: &crate::harness::metrics::EvalReport) -> serde_json::Value {
    json!({
        "setting": report.setting,
        "seed": report.seed,
        "final_avg_acc": report.final_avg_acc,
        "step_avg_acc": report.step_avg_acc,
        "forgetting": report.forgetting,
        "warnings": report.warnings.len(),
    })
}

/// Per-layer memory size, key norms and mean retrieval-weight entropy over
/// the first `probe` test samples of the configured stream.
pub fn inspect(ckpt: &Checkpoint, probe: usize) -> Result<serde_json::Value> {
    let state = &ckpt.state;
    let mut layers: Vec<serde_json::Value> = state
        .memories
        .iter()
        .map(|m| {
            let norms: Vec<f64> = (0..m.len())
                .map(|j| m.key(j).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            json!({ "layer": m.layer, "size": m.len(), "key_norms": norms })
        })
        .collect();
    let ready = state.memories.iter().all(|m| !m.is_empty());
    let mut probed = 0;
    if ready && probe > 0 {
        let stream = ckpt.config.load_stream()?;
        let rows: Vec<(usize, usize)> = stream
            .tests
            .iter()
            .enumerate()
            .flat_map(|(t, d)| (0..d.len()).map(move |i| (t, i)))
            .take(probe)
            .collect();
        probed = rows.len();
        let d = stream.input_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &(t, i) in &rows {
            data.extend_from_slice(stream.tests[t].features.row(i));
        }
        let x = Tensor::matrix(rows.len(), d, data)?;
        let trace = state.model().inference_trace(&x)?;
        for (l, layer) in trace.layers.iter().enumerate() {
            let mut total = 0.0;
            for w in &layer.weights {
                total += entropy(w.weights.data());
            }
            layers[l]["mean_weight_entropy"] = json!(total / layer.weights.len() as f64);
        }
    }
    Ok(json!({
        "setting": ckpt.config.setting,
        "next_stage": crate::pipeline::plan(
            ckpt.config.setting,
            ckpt.config.load_stream().map(|s| s.num_tasks()).unwrap_or(0),
            ckpt.config.dg_mixed_batches,
        ).get(ckpt.progress.cursor),
        "probe_samples": probed,
        "layers": layers,
    }))
}

/// Shannon entropy of the absolute weights renormalized to sum to one.
fn entropy(w: &[f64]) -> f64 {
    let total: f64 = w.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    w.iter()
        .map(|v| v.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}
