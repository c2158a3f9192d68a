//! Demo episodes → normalized training batches.
//!
//! Sample `(episode, t)` pairs the observation window ending at step `t` with
//! the action chunk starting at `t`. Chunks running past the end of an
//! episode are padded with zero motion and the last gripper command.

use geodp_core::diffusion::Normalizer;
use geodp_core::rollout::window_indices;
use geodp_core::{Batch, EpisodeRecord, Error, PolicyConfig, Result, Tensor};

#[derive(Debug, Clone)]
pub struct TrainingSet {
    episodes: Vec<EpisodeRecord>,
    samples: Vec<(usize, usize)>,
    obs_steps: usize,
    horizon: usize,
    pub action_norm: Normalizer,
    pub proprio_norm: Normalizer,
}

impl TrainingSet {
    pub fn new(episodes: Vec<EpisodeRecord>, pc: &PolicyConfig) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Dataset("no demo episodes".into()));
        }
        let mut samples = Vec::new();
        let mut action_rows = Vec::new();
        let mut proprio_rows = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            if ep.actions.is_empty() || ep.observations.len() != ep.actions.len() + 1 {
                return Err(Error::Dataset(format!("episode {e} (seed {}) is malformed", ep.seed)));
            }
            if ep.actions.iter().any(|a| a.len() != pc.action_dim) {
                return Err(Error::Dataset(format!("episode {e} has actions of the wrong width")));
            }
            if ep.observations.iter().any(|o| o.proprio.len() != pc.proprio_dim()) {
                return Err(Error::Dataset(format!("episode {e} has proprio of the wrong width")));
            }
            for t in 0..ep.actions.len() {
                samples.push((e, t));
            }
            action_rows.extend(ep.actions.iter().cloned());
            action_rows.push(pad_row(ep));
            proprio_rows.extend(ep.observations.iter().map(|o| o.proprio.clone()));
        }
        Ok(Self {
            action_norm: Normalizer::fit(action_rows.iter().map(Vec::as_slice), pc.action_dim)?,
            proprio_norm: Normalizer::fit(proprio_rows.iter().map(Vec::as_slice), pc.proprio_dim())?,
            episodes,
            samples,
            obs_steps: pc.obs_steps,
            horizon: pc.horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    /// Batch of the samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<f32>> {
        let first = &self.episodes[0].observations[0].images;
        let frame = first.numel();
        let pd = self.proprio_norm.dim();
        let ad = self.action_norm.dim();
        let b = indices.len();
        let mut images = Vec::with_capacity(b * self.obs_steps * frame);
        let mut proprio = Vec::with_capacity(b * self.obs_steps * pd);
        let mut actions = Vec::with_capacity(b * self.horizon * ad);
        for &i in indices {
            let (e, t) = *self
                .samples
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("sample {i} out of range")))?;
            let ep = &self.episodes[e];
            for j in window_indices(t, self.obs_steps) {
                let obs = &ep.observations[j];
                if obs.images.numel() != frame {
                    return Err(Error::Dataset(format!("episode {e} frame {j} has a different image size")));
                }
                images.extend_from_slice(obs.images.data());
                proprio.extend(self.proprio_norm.normalize_row(&obs.proprio).into_iter().map(|x| x as f32));
            }
            let pad = pad_row(ep);
            for k in t..t + self.horizon {
                let row = ep.actions.get(k).unwrap_or(&pad);
                actions.extend(self.action_norm.normalize_row(row).into_iter().map(|x| x as f32));
            }
        }
        let mut ishape = vec![b, self.obs_steps];
        ishape.extend_from_slice(first.shape());
        Ok(Batch {
            images: Tensor::new(ishape, images)?,
            proprio: Tensor::new([b, self.obs_steps, pd], proprio)?,
            actions: Tensor::new([b, self.horizon, ad], actions)?,
        })
    }
}

fn pad_row(ep: &EpisodeRecord) -> Vec<f64> {
    let last = ep.actions.last().expect("non-empty episode");
    let mut row = vec![0.0; last.len()];
    if let (Some(r), Some(&g)) = (row.last_mut(), last.last()) {
        *r = g;
    }
    row
}
