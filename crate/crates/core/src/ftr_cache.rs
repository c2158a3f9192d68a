//! Frame-wise token reuse.
//!
//! Consecutive observation windows overlap in all but their newest frame, so
//! the aggregated tokens of the previous `T_o − 1` frames are kept and only
//! the newest frame goes through the encoder. Tokens are cached before
//! pruning; pruning is stochastic per step and is applied downstream.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::TokenSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Something that turns one frame's views into aggregated tokens.
pub trait FrameEncoder<T> {
    fn encode(&mut self, image: &Tensor<T>, frame_index: usize) -> Result<TokenSet<T>>;
}

impl<T, F> FrameEncoder<T> for F
where
    F: FnMut(&Tensor<T>, usize) -> Result<TokenSet<T>>,
{
    fn encode(&mut self, image: &Tensor<T>, frame_index: usize) -> Result<TokenSet<T>> {
        self(image, frame_index)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Frame<'a, T> {
    pub index: usize,
    pub image: &'a Tensor<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub encoder_invocations: u64,
}

#[derive(Debug, Clone)]
pub struct FrameTokenCache<T> {
    capacity: usize,
    enabled: bool,
    episode: Option<u64>,
    entries: VecDeque<TokenSet<T>>,
    stats: CacheStats,
}

impl<T: Scalar> FrameTokenCache<T> {
    /// Cache for an observation window of `obs_steps` frames.
    pub fn new(obs_steps: usize) -> Self {
        Self {
            capacity: obs_steps.saturating_sub(1),
            enabled: true,
            episode: None,
            entries: VecDeque::new(),
            stats: CacheStats::default(),
        }
    }

    /// Same interface, but every window frame is re-encoded on every call.
    pub fn disabled(obs_steps: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(obs_steps)
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn episode(&self) -> Option<u64> {
        self.episode
    }

    pub fn cached_frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Drops every entry; the next call may start any episode.
    pub fn invalidate(&mut self) {
        self.stats.evictions += self.entries.len() as u64;
        self.entries.clear();
        self.episode = None;
    }

    /// Tokens for a window ordered oldest → newest. Repeated indices are only
    /// allowed as episode-start padding of the oldest frame.
    pub fn window_tokens<E: FrameEncoder<T> + ?Sized>(
        &mut self,
        episode_id: u64,
        frames: &[Frame<'_, T>],
        encoder: &mut E,
    ) -> Result<Vec<TokenSet<T>>> {
        let newest = frames
            .last()
            .ok_or_else(|| Error::invalid("empty observation window"))?
            .index;
        check_window(frames)?;

        if !self.enabled {
            self.episode = Some(episode_id);
            let mut out = Vec::with_capacity(frames.len());
            for f in frames {
                self.stats.misses += 1;
                self.stats.encoder_invocations += 1;
                out.push(encoder.encode(f.image, f.index)?);
            }
            return Ok(out);
        }

        if let Some(ep) = self.episode {
            if ep != episode_id && !self.entries.is_empty() {
                return Err(Error::CacheCoherence(format!(
                    "cache holds episode {ep}, asked for episode {episode_id}; invalidate first"
                )));
            }
        }
        if let Some(last) = self.entries.back().map(|e| e.frame_index) {
            if newest < last {
                return Err(Error::CacheCoherence(format!(
                    "newest frame {newest} precedes cached frame {last}"
                )));
            }
            // replanning less often than every frame: keep what still overlaps
            let oldest = frames[0].index;
            while self.entries.front().is_some_and(|e| e.frame_index < oldest) {
                self.entries.pop_front();
                self.stats.evictions += 1;
            }
        }
        self.episode = Some(episode_id);

        let mut out: Vec<TokenSet<T>> = Vec::with_capacity(frames.len());
        let mut fresh: Vec<TokenSet<T>> = Vec::new();
        for f in frames {
            if let Some(prev) = out.last().filter(|p| p.frame_index == f.index) {
                let dup = prev.clone();
                out.push(dup);
                continue;
            }
            if let Some(hit) = self.entries.iter().find(|e| e.frame_index == f.index) {
                self.stats.hits += 1;
                out.push(hit.clone());
                continue;
            }
            self.stats.misses += 1;
            self.stats.encoder_invocations += 1;
            let ts = encoder.encode(f.image, f.index)?;
            if ts.frame_index != f.index {
                return Err(Error::CacheCoherence(format!(
                    "encoder returned frame {} for frame {}",
                    ts.frame_index, f.index
                )));
            }
            fresh.push(ts.clone());
            out.push(ts);
        }

        for ts in fresh {
            if self.capacity == 0 {
                break;
            }
            if let Some(last) = self.entries.back() {
                if ts.frame_index != last.frame_index + 1 {
                    // an older frame re-encoded after the cache moved past it
                    if ts.frame_index <= last.frame_index {
                        continue;
                    }
                    self.stats.evictions += self.entries.len() as u64;
                    self.entries.clear();
                }
            }
            self.entries.push_back(ts);
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
                self.stats.evictions += 1;
            }
        }
        Ok(out)
    }
}

fn check_window<T>(frames: &[Frame<'_, T>]) -> Result<()> {
    let first = frames[0].index;
    for w in frames.windows(2) {
        let (a, b) = (w[0].index, w[1].index);
        let padding = a == b && a == first;
        if !(padding || b == a + 1) {
            return Err(Error::CacheCoherence(format!(
                "window frames {a} → {b} are not contiguous"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Encoder whose tokens are a pure function of the frame's first pixel.
    fn fake(image: &Tensor<f64>, frame_index: usize) -> Result<TokenSet<f64>> {
        Ok(TokenSet {
            tokens: Tensor::full([1, 2, 3], image.data()[0]),
            frame_index,
            kept: vec![vec![0]],
        })
    }

    fn img(i: usize) -> Tensor<f64> {
        Tensor::full([1, 2], i as f64)
    }

    #[test]
    fn fresh_cache_has_zero_stats() {
        let c = FrameTokenCache::<f64>::new(2);
        assert_eq!(c.stats(), CacheStats::default());
    }

    #[test]
    fn cold_start_padding_encodes_once() {
        let mut c = FrameTokenCache::new(2);
        let i0 = img(0);
        let w = [Frame { index: 0, image: &i0 }, Frame { index: 0, image: &i0 }];
        let out = c.window_tokens(1, &w, &mut fake).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(c.stats().encoder_invocations, 1);
        assert_eq!(c.stats().hits, 0);
    }

    #[test]
    fn warm_steps_count_one_invocation_each() {
        let mut c = FrameTokenCache::new(2);
        let imgs: Vec<_> = (0..30).map(img).collect();
        let w0 = [
            Frame { index: 0, image: &imgs[0] },
            Frame { index: 0, image: &imgs[0] },
        ];
        c.window_tokens(0, &w0, &mut fake).unwrap();
        let n = 25;
        for t in 1..=n {
            let w = [
                Frame { index: t - 1, image: &imgs[t - 1] },
                Frame { index: t, image: &imgs[t] },
            ];
            let before = c.stats().encoder_invocations;
            c.window_tokens(0, &w, &mut fake).unwrap();
            assert_eq!(c.stats().encoder_invocations - before, 1);
        }
        assert_eq!(c.stats().hits, n as u64);
        assert_eq!(c.stats().encoder_invocations, n as u64 + 1);
        assert!(c.len() <= c.capacity());
    }

    #[test]
    fn other_episode_without_invalidate_is_rejected() {
        let mut c = FrameTokenCache::new(2);
        let i0 = img(0);
        let w = [Frame { index: 0, image: &i0 }, Frame { index: 0, image: &i0 }];
        c.window_tokens(1, &w, &mut fake).unwrap();
        assert!(matches!(
            c.window_tokens(2, &w, &mut fake),
            Err(Error::CacheCoherence(_))
        ));
        c.invalidate();
        assert!(c.window_tokens(2, &w, &mut fake).is_ok());
    }

    #[test]
    fn gap_between_calls_reencodes_and_backwards_is_rejected() {
        let mut c = FrameTokenCache::new(2);
        let (i0, i5, i6) = (img(0), img(5), img(6));
        c.window_tokens(0, &[Frame { index: 0, image: &i0 }, Frame { index: 0, image: &i0 }], &mut fake)
            .unwrap();
        let w = [Frame { index: 5, image: &i5 }, Frame { index: 6, image: &i6 }];
        let out = c.window_tokens(0, &w, &mut fake).unwrap();
        assert_eq!(out[0].tokens.data()[0], 5.0);
        assert_eq!(c.stats().encoder_invocations, 3);
        assert_eq!(c.cached_frames(), vec![6]);
        let back = [Frame { index: 2, image: &i0 }, Frame { index: 3, image: &i0 }];
        assert!(matches!(
            c.window_tokens(0, &back, &mut fake),
            Err(Error::CacheCoherence(_))
        ));
        let bad = [Frame { index: 0, image: &i0 }, Frame { index: 5, image: &i5 }];
        assert!(c.window_tokens(0, &bad, &mut fake).is_err());
    }

    #[test]
    fn invalidate_empty_is_noop() {
        let mut c = FrameTokenCache::<f64>::new(3);
        c.invalidate();
        assert_eq!(c.stats(), CacheStats::default());
        assert!(c.is_empty());
    }

    #[test]
    fn disabled_cache_reencodes_whole_window() {
        let mut c = FrameTokenCache::disabled(3);
        let imgs: Vec<_> = (0..3).map(img).collect();
        let w: Vec<_> = (0..3).map(|i| Frame { index: i, image: &imgs[i] }).collect();
        c.window_tokens(0, &w, &mut fake).unwrap();
        c.window_tokens(0, &w, &mut fake).unwrap();
        assert_eq!(c.stats().encoder_invocations, 6);
        assert!(c.is_empty());
    }
}
