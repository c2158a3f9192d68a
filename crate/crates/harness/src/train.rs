//! Training loop: AdamW with warmup-cosine learning rate, EMA shadow
//! weights, periodic closed-loop evaluation and resumable state.
//!
//! Every epoch draws its shuffle and noise from its own rng stream derived
//! from `(seed, epoch)`, so a run resumed from a saved state continues
//! exactly as the uninterrupted run would have.

use std::path::{Path, PathBuf};

use geodp_core::checkpoint::Checkpoint;
use geodp_core::optim::{AdamW, Ema, LrSchedule};
use geodp_core::{EpisodeRecord, Error, Graph, ParamId, ParamStore, PolicySpec, Result, Tensor, VisuomotorPolicy};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::TrainingSet;
use crate::eval::{evaluate, success_rate};
use crate::report::{top5, TopK};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "train_report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";

/// One row of `metrics.csv`. `train` rows carry epoch-mean losses and the
/// learning rate of the epoch's last step; `eval` rows carry the success
/// rate (percent) of the EMA weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub diffusion_loss: Option<f64>,
    pub proprio_loss: Option<f64>,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub success_rate: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: String,
    pub epochs: usize,
    pub steps: u64,
    pub evals: Vec<EvalPoint>,
    pub top5: Option<TopK>,
    pub best_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from a state file written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Stop (saving state) after this epoch.
    pub stop_after: Option<usize>,
    /// Print progress lines.
    pub verbose: bool,
}

struct State {
    store: ParamStore<f32>,
    opt: AdamW<f32>,
    ema: Ema<f32>,
    epoch: usize,
    rows: Vec<MetricsRow>,
    evals: Vec<EvalPoint>,
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn train(cfg: &RunConfig, demos: Vec<EpisodeRecord>, out: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let task = cfg.task()?;
    let set = TrainingSet::new(demos, &cfg.policy)?;
    let spec = PolicySpec {
        encoder: cfg.encoder.clone(),
        policy: cfg.policy.clone(),
        action_norm: set.action_norm.clone(),
        proprio_norm: set.proprio_norm.clone(),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let policy = VisuomotorPolicy::new(spec.clone(), &mut store, &mut init_rng)?;

    let tc = &cfg.train;
    let steps_per_epoch = set.len().div_ceil(tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let lr = LrSchedule::new(cfg.optimizer.lr, cfg.schedule.warmup_steps.min(total_steps), total_steps)?;

    let ck_dir = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ck_dir)?;
    let mut st = match &opts.resume {
        Some(path) => load_state(path, cfg, &spec)?,
        None => State {
            opt: AdamW::new(cfg.optimizer, &store),
            ema: Ema::new(cfg.ema, &store),
            store,
            epoch: 0,
            rows: Vec::new(),
            evals: Vec::new(),
        },
    };
    let last_epoch = opts.stop_after.unwrap_or(tc.epochs).min(tc.epochs);

    let mut order: Vec<usize> = (0..set.len()).collect();
    while st.epoch < last_epoch {
        let epoch = st.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_d, mut sum_p) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch = set.batch(chunk)?;
            let step = st.opt.step + 1;
            // diverged weights surface as a non-finite forward op or loss
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
                e => e,
            };
            let mut g = Graph::new();
            let parts = policy.loss_graph(&mut g, &st.store, &batch, &mut rng).map_err(diverged)?;
            let loss = g.value(parts.total).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let w = chunk.len() as f64;
            sum += loss * w;
            sum_d += g.value(parts.diffusion).data()[0] as f64 * w;
            sum_p += g.value(parts.proprio).data()[0] as f64 * w;
            let grads = g.backward(parts.total).map_err(diverged)?.into_param_grads(st.store.len());
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            last_lr = lr.lr_at(step)?;
            st.opt.step(&mut st.store, &grads, last_lr)?;
            st.ema.update(&st.store)?;
        }
        let n = set.len() as f64;
        st.rows.push(MetricsRow {
            kind: "train".into(),
            epoch,
            step: st.opt.step,
            lr: Some(last_lr),
            loss: Some(sum / n),
            diffusion_loss: Some(sum_d / n),
            proprio_loss: Some(sum_p / n),
            success_rate: None,
        });
        st.epoch = epoch;

        if epoch % tc.eval_interval == 0 {
            let outcomes = evaluate(
                &policy,
                &st.ema.shadow,
                task,
                &cfg.env,
                cfg.seed,
                tc.eval_episodes,
                tc.ftr,
            )?;
            let rate = success_rate(&outcomes);
            let name = format!("epoch_{epoch:05}.ckpt");
            let ck = policy.to_checkpoint(
                &st.ema.shadow,
                serde_json::json!({"task": task.name(), "epoch": epoch, "success_rate": rate}),
            )?;
            save_verified(&ck, &ck_dir.join(&name), true)?;
            st.rows.push(MetricsRow {
                kind: "eval".into(),
                epoch,
                step: st.opt.step,
                lr: None,
                loss: None,
                diffusion_loss: None,
                proprio_loss: None,
                success_rate: Some(rate),
            });
            st.evals.push(EvalPoint {
                epoch,
                success_rate: rate,
                checkpoint: name,
            });
            prune_checkpoints(&ck_dir, &st.evals, tc.keep_best)?;
            if opts.verbose {
                println!("{} epoch {epoch}: loss {:.4}, success {rate:.1}%", task, sum / n);
            }
        }
        write_metrics(&out.join(METRICS_FILE), &st.rows)?;
        if epoch % tc.eval_interval == 0 || epoch == last_epoch {
            save_state(&st, cfg, &spec, &ck_dir.join(STATE_FILE))?;
        }
    }

    let best = best_evals(&st.evals, 1).into_iter().next();
    if let Some(b) = &best {
        std::fs::copy(ck_dir.join(&b.checkpoint), ck_dir.join(BEST_FILE))?;
    }
    let rates: Vec<f64> = st.evals.iter().map(|e| e.success_rate).collect();
    let report = TrainReport {
        task: task.name().to_string(),
        epochs: st.epoch,
        steps: st.opt.step,
        top5: top5(&rates).ok(),
        best_checkpoint: best.map(|b| b.checkpoint.clone()),
        evals: st.evals,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Highest success first, earlier epoch on ties.
fn best_evals(evals: &[EvalPoint], k: usize) -> Vec<&EvalPoint> {
    let mut v: Vec<&EvalPoint> = evals.iter().collect();
    v.sort_by(|a, b| b.success_rate.total_cmp(&a.success_rate).then(a.epoch.cmp(&b.epoch)));
    v.truncate(k);
    v
}

fn prune_checkpoints(dir: &Path, evals: &[EvalPoint], keep: usize) -> Result<()> {
    let kept = best_evals(evals, keep);
    for e in evals {
        if !kept.iter().any(|k| k.epoch == e.epoch) {
            let p = dir.join(&e.checkpoint);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes next to `path`, reads it back and checks it before moving it into
/// place, so a checkpoint that does not reload never appears.
pub fn save_verified(ck: &Checkpoint<f32>, path: &Path, is_policy: bool) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    let back = std::fs::read(&tmp)?;
    let parsed = Checkpoint::<f32>::from_bytes(&back)?;
    if back != bytes || parsed != *ck {
        return Err(Error::Checkpoint(format!("{} did not read back identically", path.display())));
    }
    if is_policy {
        VisuomotorPolicy::from_checkpoint(&parsed)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn save_state(st: &State, cfg: &RunConfig, spec: &PolicySpec, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "train_state",
        "epoch": st.epoch,
        "adam_step": st.opt.step,
        "ema_updates": st.ema.updates,
        "config": cfg,
        "spec": spec,
        "rows": st.rows,
        "evals": st.evals,
    });
    let mut ck = Checkpoint::new(meta);
    for (id, name, t) in st.store.iter() {
        ck.push(format!("param/{name}"), t.clone());
        ck.push(format!("adam_m/{name}"), st.opt.m[id.0].clone());
        ck.push(format!("adam_v/{name}"), st.opt.v[id.0].clone());
        ck.push(format!("ema/{name}"), st.ema.shadow.get(id).clone());
    }
    save_verified(&ck, path, false)
}

fn load_state(path: &Path, cfg: &RunConfig, spec: &PolicySpec) -> Result<State> {
    let ck = Checkpoint::<f32>::load(path)?;
    let meta = &ck.meta;
    if meta["kind"] != "train_state" {
        return Err(Error::Checkpoint(format!("{} is not a training state", path.display())));
    }
    let same_cfg = meta["config"] == serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let same_spec = meta["spec"] == serde_json::to_value(spec).map_err(|e| Error::Config(e.to_string()))?;
    if !same_cfg || !same_spec {
        return Err(Error::Config(format!(
            "{} was written with a different config or dataset",
            path.display()
        )));
    }
    let field = |k: &str| -> Result<u64> {
        meta[k]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("state field `{k}` missing")))
    };
    let parse = |k: &str| -> Result<serde_json::Value> { Ok(meta[k].clone()) };
    let rows: Vec<MetricsRow> =
        serde_json::from_value(parse("rows")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let evals: Vec<EvalPoint> =
        serde_json::from_value(parse("evals")?).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut store = ParamStore::<f32>::new();
    VisuomotorPolicy::new(spec.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = AdamW::new(cfg.optimizer, &store);
    let mut ema = Ema::new(cfg.ema, &store);
    let ids: Vec<ParamId> = store.ids().collect();
    let get = |prefix: &str, name: &str, like: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = ck
            .get(&format!("{prefix}/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("state lacks `{prefix}/{name}`")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!("state tensor `{prefix}/{name}` has the wrong shape")));
        }
        Ok(t.clone())
    };
    for id in ids {
        let name = store.name(id).to_string();
        let like = store.get(id).clone();
        *store.get_mut(id) = get("param", &name, &like)?;
        opt.m[id.0] = get("adam_m", &name, &like)?;
        opt.v[id.0] = get("adam_v", &name, &like)?;
        *ema.shadow.get_mut(id) = get("ema", &name, &like)?;
    }
    opt.step = field("adam_step")?;
    ema.updates = field("ema_updates")?;
    Ok(State {
        store,
        opt,
        ema,
        epoch: field("epoch")? as usize,
        rows,
        evals,
    })
}
