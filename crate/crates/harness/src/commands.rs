//! The five CLI commands as library functions.

use std::path::{Path, PathBuf};

use geodp_core::checkpoint::Checkpoint;
use geodp_core::diffusion::Normalizer;
use geodp_core::{Error, ParamStore, PolicySpec, Result, VisuomotorPolicy};
use geodp_env::{generate_demos, read_dataset, write_dataset, DatasetIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_sweep, BenchRow};
use crate::config::RunConfig;
use crate::eval::{evaluate, success_rate, EpisodeOutcome};
use crate::report::{read_history, top5, TopK};
use crate::train::{csv_err, train, write_json, TrainOptions, TrainReport, BEST_FILE, CHECKPOINT_DIR};

pub const DEMO_DIR: &str = "demos";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const PERTURB_CSV: &str = "perturb.csv";

pub fn cmd_gen_demos(cfg: &RunConfig, out: &Path) -> Result<DatasetIndex> {
    let task = cfg.task()?;
    let demos = generate_demos(task, &cfg.env, cfg.demos.count, cfg.seed + cfg.demos.seed_offset)?;
    write_dataset(&out.join(DEMO_DIR), task.name(), &demos)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    let dir = out.join(DEMO_DIR);
    if !dir.exists() {
        return Err(Error::Dataset(format!(
            "no demos at {}; run gen-demos with the same --out first",
            dir.display()
        )));
    }
    let (index, demos) = read_dataset(&dir)?;
    if index.task != cfg.task {
        return Err(Error::Config(format!(
            "demos are for `{}`, config asks for `{}`",
            index.task, cfg.task
        )));
    }
    train(cfg, demos, out, opts)
}

pub fn load_policy(path: &Path) -> Result<(VisuomotorPolicy, ParamStore<f32>)> {
    let ck = Checkpoint::<f32>::load(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    VisuomotorPolicy::from_checkpoint(&ck)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn default_checkpoint(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(BEST_FILE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub checkpoint: String,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointEval>,
    /// From the history file if given, otherwise from the evaluated
    /// checkpoints when there are at least five.
    pub top5: Option<TopK>,
}

#[derive(Debug, Serialize)]
struct EvalCsvRow<'a> {
    checkpoint: &'a str,
    episode: usize,
    seed: u64,
    success: bool,
    steps: usize,
}

/// Evaluates each checkpoint (default: the best one from training).
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoints: &[PathBuf], history: Option<&Path>) -> Result<EvalReport> {
    let task = cfg.task()?;
    let paths = if checkpoints.is_empty() {
        vec![default_checkpoint(out)]
    } else {
        checkpoints.to_vec()
    };
    let mut evals = Vec::with_capacity(paths.len());
    for p in &paths {
        let (policy, store) = load_policy(p)?;
        let episodes = evaluate(&policy, &store, task, &cfg.env, cfg.seed, cfg.train.eval_episodes, cfg.train.ftr)?;
        evals.push(CheckpointEval {
            checkpoint: file_name(p),
            success_rate: success_rate(&episodes),
            episodes,
        });
    }
    let top5 = match history {
        Some(h) => Some(top5(&read_history(h)?)?),
        None if evals.len() >= 5 => Some(top5(&evals.iter().map(|e| e.success_rate).collect::<Vec<_>>())?),
        None => None,
    };
    let report = EvalReport {
        task: task.name().to_string(),
        seed: cfg.seed,
        checkpoints: evals,
        top5,
    };
    std::fs::create_dir_all(out)?;
    write_json(&out.join(EVAL_JSON), &report)?;
    let mut w = csv::Writer::from_path(out.join(EVAL_CSV)).map_err(csv_err)?;
    for ce in &report.checkpoints {
        for e in &ce.episodes {
            w.serialize(EvalCsvRow {
                checkpoint: &ce.checkpoint,
                episode: e.episode,
                seed: e.seed,
                success: e.success,
                steps: e.steps,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub delta_deg: f64,
    pub episodes: usize,
    pub success_rate: f64,
    /// Per-episode outcomes in episode order, `1` success and `0` failure.
    pub outcomes: String,
}

pub fn cmd_perturb_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Vec<PerturbRow>> {
    let task = cfg.task()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(out));
    let (policy, store) = load_policy(&path)?;
    let mut rows = Vec::new();
    for &delta in &cfg.perturb.deltas {
        let mut env = cfg.env.clone();
        env.delta_deg = delta;
        let eps = evaluate(&policy, &store, task, &env, cfg.seed, cfg.perturb.episodes, cfg.train.ftr)?;
        rows.push(PerturbRow {
            delta_deg: delta,
            episodes: eps.len(),
            success_rate: success_rate(&eps),
            outcomes: eps.iter().map(|e| if e.success { '1' } else { '0' }).collect(),
        });
    }
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(PERTURB_CSV)).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Randomly initialized policy of the configured size with window `obs_steps`.
pub fn bench_policy(cfg: &RunConfig, obs_steps: usize) -> Result<(VisuomotorPolicy, ParamStore<f32>)> {
    let mut policy = cfg.policy.clone();
    policy.obs_steps = obs_steps;
    let spec = PolicySpec {
        encoder: cfg.encoder.clone(),
        action_norm: Normalizer {
            min: vec![-1.0; policy.action_dim],
            max: vec![1.0; policy.action_dim],
        },
        proprio_norm: Normalizer {
            min: vec![-1.0; policy.proprio_dim()],
            max: vec![1.0; policy.proprio_dim()],
        },
        policy,
    };
    let mut store = ParamStore::new();
    let p = VisuomotorPolicy::new(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    Ok((p, store))
}

pub fn cmd_bench_latency(cfg: &RunConfig, out: &Path, verbose: bool) -> Result<Vec<BenchRow>> {
    std::fs::create_dir_all(out)?;
    let path = out.join(BENCH_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut write_err = None;
    let rows = bench_sweep(&cfg.bench, |to| bench_policy(cfg, to), cfg.seed, |row| {
        if verbose {
            println!(
                "T={} batch={} ftr={}: {} invocations/step, median {:.2} ms",
                row.obs_steps, row.batch, row.ftr, row.invocations_per_step, row.median_ms
            );
        }
        if let Err(e) = w.serialize(row).and_then(|_| w.flush().map_err(csv::Error::from)) {
            write_err.get_or_insert(csv_err(e));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok(rows)
}
