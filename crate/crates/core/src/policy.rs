//! The full visuomotor policy: encoder, conditioning, denoiser and proprio
//! head, plus an inference runner that plugs into the rollout loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    build_schedule, ddim_sample_clipped, training_loss, BetaSchedule, Normalizer, NoiseSchedule, UNet1d, UNetConfig,
};
use crate::encoder::{prune_tokens, Encoder, EncoderConfig, TokenSet};
use crate::error::{Error, Result};
use crate::ftr_cache::{CacheStats, Frame, FrameTokenCache};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::proprio::{combined_loss, proprio_dim, proprio_loss, ProprioDecoder};
use crate::rollout::{window_indices, Observation, Planner};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_steps: usize,
    pub horizon: usize,
    pub action_steps: usize,
    pub action_dim: usize,
    pub joint_dim: usize,
    pub train_steps: usize,
    pub inference_steps: usize,
    pub beta_schedule: BetaSchedule,
    pub lambda: f64,
    pub proprio_hidden: usize,
    pub r_prune: f64,
    pub prune_at_inference: bool,
    pub unet: UNetConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            obs_steps: 2,
            horizon: 16,
            action_steps: 8,
            action_dim: 4,
            joint_dim: 2,
            train_steps: 100,
            inference_steps: 10,
            beta_schedule: BetaSchedule::SquaredCos,
            lambda: 0.1,
            proprio_hidden: 64,
            r_prune: 0.25,
            prune_at_inference: false,
            unet: UNetConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("policy config: {m}")));
        if self.obs_steps == 0 || self.horizon == 0 || self.action_dim == 0 {
            return bad("obs_steps, horizon and action_dim must be positive".into());
        }
        if self.action_steps == 0 || self.action_steps > self.horizon {
            return bad(format!("action_steps {} must be in 1..={}", self.action_steps, self.horizon));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.r_prune) {
            return bad(format!("r_prune {} outside [0, 1)", self.r_prune));
        }
        self.unet.validate()?;
        if self.horizon % self.unet.horizon_multiple() != 0 {
            return bad(format!(
                "horizon {} not divisible by {}",
                self.horizon,
                self.unet.horizon_multiple()
            ));
        }
        build_schedule(self.train_steps, self.inference_steps, self.beta_schedule)?;
        Ok(())
    }

    pub fn proprio_dim(&self) -> usize {
        proprio_dim(self.joint_dim)
    }
}

/// Everything needed to rebuild a policy besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub action_norm: Normalizer,
    pub proprio_norm: Normalizer,
}

/// Training batch; proprio and actions already normalized.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, T_o, V, C, H, W]`
    pub images: Tensor<T>,
    /// `[B, T_o, n_q + 3]`
    pub proprio: Tensor<T>,
    /// `[B, T_p, d_a]`
    pub actions: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub diffusion: Var,
    pub proprio: Var,
}

#[derive(Debug, Clone)]
pub struct VisuomotorPolicy {
    pub spec: PolicySpec,
    pub encoder: Encoder,
    pub denoiser: UNet1d,
    pub proprio_head: ProprioDecoder,
    pub schedule: NoiseSchedule,
}

impl VisuomotorPolicy {
    pub fn new<T: Scalar, R: Rng + ?Sized>(spec: PolicySpec, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let pc = &spec.policy;
        pc.validate()?;
        if spec.action_norm.dim() != pc.action_dim || spec.proprio_norm.dim() != pc.proprio_dim() {
            return Err(Error::invalid(format!(
                "normalizer dims {}/{} do not match action {} / proprio {}",
                spec.action_norm.dim(),
                spec.proprio_norm.dim(),
                pc.action_dim,
                pc.proprio_dim()
            )));
        }
        let encoder = Encoder::new(spec.encoder.clone(), store, rng)?;
        let d_c = spec.encoder.cond_dim;
        let cond = pc.obs_steps * (d_c + pc.proprio_dim());
        let denoiser = UNet1d::new(store, "unet", &pc.unet, pc.action_dim, cond, rng)?;
        let proprio_head = ProprioDecoder::new(store, "proprio", d_c, pc.proprio_hidden, pc.proprio_dim(), rng);
        let schedule = build_schedule(pc.train_steps, pc.inference_steps, pc.beta_schedule)?;
        Ok(Self {
            spec,
            encoder,
            denoiser,
            proprio_head,
            schedule,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.spec.policy
    }

    /// Width of the global conditioning vector fed to the denoiser.
    pub fn cond_dim(&self) -> usize {
        self.denoiser.cond_dim()
    }

    /// Diffusion, proprio and combined losses for one batch.
    pub fn loss_graph<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch<T>,
        rng: &mut R,
    ) -> Result<LossParts> {
        let pc = self.config();
        let ec = &self.spec.encoder;
        let (to, pd) = (pc.obs_steps, pc.proprio_dim());
        let b = batch.images.shape().first().copied().unwrap_or(0);
        let want = [b, to, ec.views, ec.channels, ec.height, ec.width];
        if b == 0 || batch.images.shape() != want {
            return Err(Error::invalid(format!("batch images {:?}, expected {want:?}", batch.images.shape())));
        }
        if batch.proprio.shape() != [b, to, pd] || batch.actions.shape() != [b, pc.horizon, pc.action_dim] {
            return Err(Error::invalid(format!(
                "batch proprio {:?} / actions {:?} do not match [{b}, {to}, {pd}] / [{b}, {}, {}]",
                batch.proprio.shape(),
                batch.actions.shape(),
                pc.horizon,
                pc.action_dim
            )));
        }
        let frames = b * to;
        let images = batch.images.clone().reshape([frames, ec.views, ec.channels, ec.height, ec.width])?;
        let mut tokens = self.encoder.encode_graph(g, store, &images)?;
        if pc.r_prune > 0.0 {
            let plan = self.encoder.sample_prune_plan(frames, pc.r_prune, rng)?;
            tokens = self.encoder.prune_graph(g, tokens, &plan)?;
        }
        let emb = self.encoder.project_graph(g, store, tokens)?;
        let emb_flat = g.reshape(emb, &[b, to * ec.cond_dim])?;
        let prop = g.constant(batch.proprio.clone().reshape([b, to * pd])?);
        let cond = g.concat(&[emb_flat, prop], 1)?;
        let diffusion = training_loss(g, store, &self.denoiser, cond, &batch.actions, &self.schedule, rng)?;
        let p_hat = self.proprio_head.predict_graph(g, store, emb)?;
        let target = g.constant(batch.proprio.clone().reshape([frames, pd])?);
        let proprio = proprio_loss(g, p_hat, target)?;
        let total = combined_loss(g, diffusion, proprio, pc.lambda)?;
        Ok(LossParts {
            total,
            diffusion,
            proprio,
        })
    }

    /// `[1, cond]` from per-frame embeddings and raw proprio of the window.
    pub fn conditioning<T: Scalar>(&self, embeddings: &[Tensor<T>], proprio: &[&[f64]]) -> Result<Tensor<T>> {
        let to = self.config().obs_steps;
        if embeddings.len() != to || proprio.len() != to {
            return Err(Error::invalid(format!(
                "window of {} embeddings / {} proprio vectors, expected {to}",
                embeddings.len(),
                proprio.len()
            )));
        }
        let mut data: Vec<T> = Vec::with_capacity(self.cond_dim());
        for e in embeddings {
            data.extend_from_slice(e.data());
        }
        for p in proprio {
            if p.len() != self.config().proprio_dim() {
                return Err(Error::invalid(format!("proprio vector of length {}", p.len())));
            }
            data.extend(self.spec.proprio_norm.normalize_row(p).into_iter().map(T::lit));
        }
        Tensor::new([1, self.cond_dim()], data)
    }

    /// Normalized chunk `[1, T_p, d_a]` for a conditioning vector.
    pub fn sample_chunk<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        cond: &Tensor<T>,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let pc = self.config();
        ddim_sample_clipped(&self.denoiser, store, cond, [1, pc.horizon, pc.action_dim], &self.schedule, 1.0, rng)
    }

    /// Per-episode inference state. `base_seed` and the episode id fix the
    /// sampling noise stream.
    pub fn runner<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, ftr: bool, base_seed: u64) -> PolicyRunner<'a, T> {
        let to = self.config().obs_steps;
        PolicyRunner {
            policy: self,
            store,
            cache: if ftr {
                FrameTokenCache::new(to)
            } else {
                FrameTokenCache::disabled(to)
            },
            base_seed,
            rng: ChaCha8Rng::seed_from_u64(base_seed),
            episode: 0,
        }
    }

    pub fn to_checkpoint<T: Scalar>(&self, store: &ParamStore<T>, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = serde_json::json!({
            "spec": serde_json::to_value(&self.spec).map_err(|e| Error::Checkpoint(e.to_string()))?,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta);
        for (_, name, t) in store.iter() {
            ck.push(name, t.clone());
        }
        Ok(ck)
    }

    /// Rebuilds the policy and its weights; every parameter must be present
    /// with the right shape.
    pub fn from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<(Self, ParamStore<T>)> {
        let spec: PolicySpec = serde_json::from_value(ck.meta["spec"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad policy spec: {e}")))?;
        let mut store = ParamStore::new();
        let policy = Self::new(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        if ck.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ck.tensors.len(),
                store.len()
            )));
        }
        Ok((policy, store))
    }
}

pub struct PolicyRunner<'a, T: Scalar> {
    policy: &'a VisuomotorPolicy,
    store: &'a ParamStore<T>,
    cache: FrameTokenCache<T>,
    base_seed: u64,
    rng: ChaCha8Rng,
    episode: u64,
}

impl<T: Scalar> PolicyRunner<'_, T> {
    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    /// Per-frame condition embeddings for the window ending at the newest
    /// observation.
    pub fn embeddings(&mut self, history: &[Observation]) -> Result<Vec<Tensor<T>>> {
        let t = history
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("empty observation history"))?;
        let idx = window_indices(t, self.policy.config().obs_steps);
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| history[i].images.cast()).collect();
        let frames: Vec<Frame<'_, T>> = idx
            .iter()
            .zip(&images)
            .map(|(&index, image)| Frame { index, image })
            .collect();
        let (enc, store) = (&self.policy.encoder, self.store);
        let mut encode = |img: &Tensor<T>, i: usize| enc.encode_frame(store, img, i);
        let mut window: Vec<TokenSet<T>> = self.cache.window_tokens(self.episode, &frames, &mut encode)?;
        let pc = self.policy.config();
        if pc.prune_at_inference && pc.r_prune > 0.0 {
            window = window
                .iter()
                .map(|ts| prune_tokens(ts, pc.r_prune, &mut self.rng))
                .collect::<Result<_>>()?;
        }
        enc.project(store, &window)
    }

    /// `[1, cond]` conditioning vector for the newest observation.
    pub fn condition(&mut self, history: &[Observation]) -> Result<Tensor<T>> {
        let emb = self.embeddings(history)?;
        let t = history.len() - 1;
        let idx = window_indices(t, self.policy.config().obs_steps);
        let prop: Vec<&[f64]> = idx.iter().map(|&i| history[i].proprio.as_slice()).collect();
        self.policy.conditioning(&emb, &prop)
    }
}

impl<T: Scalar> Planner for PolicyRunner<'_, T> {
    fn reset(&mut self, episode_id: u64) {
        self.cache.invalidate();
        self.episode = episode_id;
        self.rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        self.rng.set_stream(episode_id);
    }

    fn plan(&mut self, history: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let cond = self.condition(history)?;
        let chunk = self.policy.sample_chunk(self.store, &cond, &mut self.rng)?;
        let pc = self.policy.config();
        let rows = chunk
            .data()
            .chunks(pc.action_dim)
            .map(|r| {
                let r: Vec<f64> = r.iter().map(|x| x.as_f64()).collect();
                self.policy.spec.action_norm.denormalize_row(&r)
            })
            .collect();
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> PolicySpec {
        let encoder = EncoderConfig {
            height: 16,
            width: 16,
            dim: 16,
            agg_depth: 2,
            proj_depth: 1,
            cond_dim: 8,
            ..EncoderConfig::default()
        };
        let policy = PolicyConfig {
            horizon: 8,
            action_steps: 4,
            proprio_hidden: 8,
            unet: UNetConfig {
                down_dims: vec![8, 16],
                kernel: 3,
                groups: 4,
                step_embed_dim: 8,
            },
            ..PolicyConfig::default()
        };
        PolicySpec {
            encoder,
            policy,
            action_norm: Normalizer {
                min: vec![-0.05, -0.05, 0.0, 0.0],
                max: vec![0.05, 0.05, 0.0, 1.0],
            },
            proprio_norm: Normalizer {
                min: vec![-1.0; 5],
                max: vec![1.0, 1.0, 1.0, 1.0, -1.0],
            },
        }
    }

    fn obs(rng: &mut ChaCha8Rng) -> Observation {
        Observation {
            images: Tensor::rand_uniform([2, 3, 16, 16], 0.0, 1.0, rng),
            proprio: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        state: vec![],
        }
    }

    #[test]
    fn loss_and_plan_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let policy = VisuomotorPolicy::new(tiny_spec(), &mut store, &mut rng).unwrap();
        let batch = Batch {
            images: Tensor::rand_uniform([3, 2, 2, 3, 16, 16], 0.0, 1.0, &mut rng),
            proprio: Tensor::rand_uniform([3, 2, 5], -1.0, 1.0, &mut rng),
            actions: Tensor::rand_uniform([3, 8, 4], -1.0, 1.0, &mut rng),
        };
        let mut g = Graph::new();
        let parts = policy.loss_graph(&mut g, &store, &batch, &mut rng).unwrap();
        assert!(g.value(parts.total).data()[0].is_finite());
        let grads = g.backward(parts.total).unwrap();
        assert!(grads.params().count() > 10);

        let history: Vec<_> = (0..3).map(|_| obs(&mut rng)).collect();
        let mut runner = policy.runner(&store, true, 7);
        runner.reset(0);
        let chunk = runner.plan(&history).unwrap();
        assert_eq!(chunk.len(), 8);
        assert!(chunk.iter().all(|r| r.len() == 4));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let policy = VisuomotorPolicy::new(tiny_spec(), &mut store, &mut rng).unwrap();
        let ck = policy.to_checkpoint(&store, serde_json::json!({"epoch": 3})).unwrap();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (p2, s2) = VisuomotorPolicy::from_checkpoint(&back).unwrap();
        assert_eq!(p2.spec, policy.spec);
        assert_eq!(s2.tensors(), store.tensors());
    }

    #[test]
    fn planning_is_deterministic_per_episode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let policy = VisuomotorPolicy::new(tiny_spec(), &mut store, &mut rng).unwrap();
        let history: Vec<_> = (0..2).map(|_| obs(&mut rng)).collect();
        let mut a = policy.runner(&store, true, 5);
        let mut b = policy.runner(&store, false, 5);
        a.reset(4);
        b.reset(4);
        assert_eq!(a.plan(&history).unwrap(), b.plan(&history).unwrap());
        a.reset(4);
        b.reset(5);
        assert_ne!(a.plan(&history[..1]).unwrap(), b.plan(&history[..1]).unwrap());
    }
}
