use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geodp_core::{Error, Result};
use geodp_harness::commands::{cmd_bench_latency, cmd_eval, cmd_gen_demos, cmd_perturb_eval, cmd_train};
use geodp_harness::train::TrainOptions;
use geodp_harness::{Preset, RunConfig};

#[derive(Parser)]
#[command(name = "geodp", version, about = "Visuomotor diffusion policy: demos, training, evaluation, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration, merged over the preset.
    #[arg(long)]
    config: PathBuf,
    /// desk (minutes) or full (long schedule).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demos into OUT/demos.
    GenDemos(Common),
    /// Train on OUT/demos; writes metrics.csv, checkpoints/ and train_report.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch, saving state.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate checkpoints; writes eval.json and eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; repeatable. Defaults to OUT/checkpoints/best.ckpt.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Success-rate history (JSON array or metrics.csv) for the top-5 summary.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Encoder latency sweep with and without frame token reuse; writes bench.csv.
    BenchLatency(Common),
    /// Success under camera rotation noise; writes perturb.csv.
    PerturbEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDemos(_) => "gen-demos",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::BenchLatency(_) => "bench-latency",
            Command::PerturbEval { .. } => "perturb-eval",
        }
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    let preset: Preset = c.preset.parse()?;
    let mut cfg = RunConfig::load(&c.config, preset)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cmd: &Command) -> Result<serde_json::Value> {
    match cmd {
        Command::GenDemos(c) => {
            let index = cmd_gen_demos(&load(c)?, &c.out)?;
            Ok(serde_json::json!({"episodes": index.episodes.len(), "dir": c.out.join("demos")}))
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let opts = TrainOptions {
                resume: resume.clone(),
                stop_after: *stop_after,
                verbose: true,
            };
            let report = cmd_train(&load(common)?, &common.out, &opts)?;
            to_json(&report)
        }
        Command::Eval {
            common,
            checkpoint,
            history,
        } => {
            let report = cmd_eval(&load(common)?, &common.out, checkpoint, history.as_deref())?;
            let rates: Vec<_> = report
                .checkpoints
                .iter()
                .map(|c| serde_json::json!({"checkpoint": c.checkpoint, "success_rate": c.success_rate}))
                .collect();
            Ok(serde_json::json!({"checkpoints": rates, "top5": report.top5}))
        }
        Command::BenchLatency(c) => {
            let rows = cmd_bench_latency(&load(c)?, &c.out, true)?;
            Ok(serde_json::json!({"rows": rows.len()}))
        }
        Command::PerturbEval { common, checkpoint } => {
            let rows = cmd_perturb_eval(&load(common)?, &common.out, checkpoint.as_deref())?;
            to_json(&rows)
        }
    }
}

fn to_json<S: serde::Serialize>(v: &S) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Io(e.into()))
}

fn error_json(command: &str, kind: &str, message: &str) -> String {
    serde_json::json!({"error": kind, "command": command, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("", "usage", &e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(cli.command.name(), e.kind(), &e.to_string()));
            ExitCode::from(match e {
                Error::Config(_) | Error::Usage(_) => 2,
                _ => 1,
            })
        }
    }
}
