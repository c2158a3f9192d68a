//! Run configuration.
//!
//! A config file is TOML. It is merged key by key over the selected preset,
//! then deserialized with unknown keys rejected, so a typo is an error rather
//! than a silently ignored setting.

use std::path::Path;
use std::str::FromStr;

use geodp_core::encoder::EncoderConfig;
use geodp_core::optim::{AdamWConfig, EmaConfig};
use geodp_core::{Error, PolicyConfig, Result};
use geodp_env::{EnvConfig, TaskKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Minutes on a laptop CPU.
    #[default]
    Desk,
    /// Long schedule: 3000 epochs, evaluation every 200.
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset `{s}`; valid presets: desk, full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub count: usize,
    /// Demo episodes use seeds `seed + seed_offset + attempt`, keeping them
    /// apart from evaluation seeds `seed + episode`.
    pub seed_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluation checkpoints retained, best first.
    pub keep_best: usize,
    pub ftr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub obs_steps: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub deltas: Vec<f64>,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub demos: DemoConfig,
    pub train: TrainConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub ema: EmaConfig,
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub bench: BenchConfig,
    pub perturb: PerturbConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let full = Self {
            task: TaskKind::Reach.name().to_string(),
            seed: 0,
            demos: DemoConfig {
                count: 10,
                seed_offset: 1_000_000,
            },
            train: TrainConfig {
                epochs: 3000,
                batch_size: 128,
                eval_interval: 200,
                eval_episodes: 20,
                keep_best: 5,
                ftr: true,
            },
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig { warmup_steps: 500 },
            ema: EmaConfig::default(),
            env: EnvConfig::default(),
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            bench: BenchConfig {
                obs_steps: (1..=6).collect(),
                batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128],
                warmup: 3,
                repetitions: 20,
            },
            perturb: PerturbConfig {
                deltas: vec![0.0, 5.0, 10.0, 15.0],
                episodes: 20,
            },
        };
        match p {
            Preset::Full => full,
            Preset::Desk => Self {
                train: TrainConfig {
                    epochs: 300,
                    eval_interval: 50,
                    batch_size: 4,
                    ..full.train
                },
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..full.optimizer
                },
                schedule: ScheduleConfig { warmup_steps: 100 },
                // Ten demos give only ten scene layouts. A stronger proprio
                // term is what gets the encoder to localize objects, and
                // pruning would often drop the one patch holding the target.
                policy: PolicyConfig {
                    lambda: 1.0,
                    r_prune: 0.0,
                    ..full.policy
                },
                ..full
            },
        }
    }

    /// Preset, overlaid with `text`, then validated.
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, file);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, preset)
    }

    pub fn task(&self) -> Result<TaskKind> {
        self.task.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_interval == 0 || t.eval_episodes == 0 {
            return bad("train: epochs, batch_size, eval_interval and eval_episodes must be positive".into());
        }
        if t.epochs % t.eval_interval != 0 {
            return bad(format!(
                "train: eval_interval {} does not divide epochs {}",
                t.eval_interval, t.epochs
            ));
        }
        if self.demos.count == 0 {
            return bad("demos: count must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad(format!("optimizer: invalid settings {o:?}"));
        }
        let e = &self.ema;
        if !(e.gamma > 0.0) || !(e.power > 0.0) || !(0.0..1.0).contains(&e.max_decay) {
            return bad(format!("ema: invalid settings {e:?}"));
        }
        self.env.validate()?;
        self.encoder.validate().map_err(as_config)?;
        self.policy.validate().map_err(as_config)?;
        let (enc, env) = (&self.encoder, &self.env);
        if enc.views != env.view_angles.len() || enc.height != env.height || enc.width != env.width {
            return bad(format!(
                "encoder expects {} views at {}x{}, env renders {} at {}x{}",
                enc.views,
                enc.height,
                enc.width,
                env.view_angles.len(),
                env.height,
                env.width
            ));
        }
        if enc.channels != geodp_env::CHANNELS
            || self.policy.action_dim != geodp_env::ACTION_DIM
            || self.policy.proprio_dim() != geodp_env::PROPRIO_DIM
        {
            return bad("encoder channels / policy action and proprio dims do not match the env".into());
        }
        let b = &self.bench;
        if b.obs_steps.contains(&0) || b.batch_sizes.contains(&0) || b.repetitions == 0 {
            return bad("bench: obs_steps, batch_sizes and repetitions must be positive".into());
        }
        if self.perturb.episodes == 0 || self.perturb.deltas.iter().any(|d| !(0.0..180.0).contains(d)) {
            return bad("perturb: episodes must be positive and deltas in [0, 180)".into());
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

/// Recursive table merge; `over` wins.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Preset::Desk).validate().unwrap();
        RunConfig::preset(Preset::Full).validate().unwrap();
    }

    #[test]
    fn file_overrides_preset() {
        let c = RunConfig::from_toml_str("task = \"sweep_into\"\n[train]\nepochs = 100\n", Preset::Desk).unwrap();
        assert_eq!(c.task().unwrap(), TaskKind::SweepInto);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.eval_interval, 50);
        let full = RunConfig::from_toml_str("", Preset::Full).unwrap();
        assert_eq!((full.train.epochs, full.train.eval_interval), (3000, 200));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["tsak = \"reach\"", "[train]\nepoch = 3", "[policy]\nlamda = 0.1", "[policy.unet]\ndims = [1]"] {
            let err = RunConfig::from_toml_str(text, Preset::Desk).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_task_lists_valid_ones() {
        let err = RunConfig::from_toml_str("task = \"stick_pull\"", Preset::Desk).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("reach") && msg.contains("sweep_into") && msg.contains("pick_out_of_hole"));
    }

    #[test]
    fn eval_interval_must_divide_epochs() {
        assert!(RunConfig::from_toml_str("[train]\nepochs = 120", Preset::Desk).is_err());
    }
}
