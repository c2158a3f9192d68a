use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    #[default]
    SquaredCos,
    Linear {
        start: f64,
        end: f64,
    },
}

/// Coefficients of one deterministic update
/// `A_{k_prev} = α·(A_k − γ·ε̂) + σ·z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimStep {
    pub k: usize,
    pub k_prev: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
}

/// Diffusion steps are 1-based: `betas[k − 1]` is β_k and `alpha_bar[k]` is
/// ᾱ_k, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    inference: Vec<usize>,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

fn cosine_alpha_bar(t: f64) -> f64 {
    let c = ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

/// `k` training steps, `inference_steps` evenly spaced sampling steps.
pub fn build_schedule(k: usize, inference_steps: usize, kind: BetaSchedule) -> Result<NoiseSchedule> {
    if k == 0 || inference_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if k < inference_steps {
        return Err(Error::invalid(format!(
            "{k} training steps cannot host {inference_steps} inference steps"
        )));
    }
    let betas: Vec<f64> = match kind {
        BetaSchedule::SquaredCos => (1..=k)
            .map(|i| {
                let t0 = (i - 1) as f64 / k as f64;
                let t1 = i as f64 / k as f64;
                (1.0 - cosine_alpha_bar(t1) / cosine_alpha_bar(t0)).min(MAX_BETA)
            })
            .collect(),
        BetaSchedule::Linear { start, end } => {
            if !(0.0 < start && start <= end && end < 1.0) {
                return Err(Error::invalid(format!("linear betas {start}..{end}")));
            }
            (0..k)
                .map(|i| {
                    if k == 1 {
                        start
                    } else {
                        start + (end - start) * i as f64 / (k - 1) as f64
                    }
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(k + 1);
    alpha_bar.push(1.0);
    for b in &betas {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    let inference = (0..inference_steps)
        .map(|i| (i + 1) * k / inference_steps)
        .collect();
    Ok(NoiseSchedule {
        betas,
        alpha_bar,
        inference,
    })
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_k for `k ∈ 0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// Inference subset in ascending order.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference
    }

    /// Sampling updates from k = K down to 0, σ = 0.
    pub fn ddim_steps(&self) -> Vec<DdimStep> {
        (0..self.inference.len())
            .rev()
            .map(|i| {
                let k = self.inference[i];
                let k_prev = if i == 0 { 0 } else { self.inference[i - 1] };
                let (ab, ab_prev) = (self.alpha_bar[k], self.alpha_bar[k_prev]);
                // x̂₀ = (A − √(1−ᾱ)ε)/√ᾱ;  A' = √ᾱ'·x̂₀ + √(1−ᾱ')·ε
                let alpha = (ab_prev / ab).sqrt();
                let gamma = (1.0 - ab).sqrt() - (1.0 - ab_prev).sqrt() / alpha;
                DdimStep {
                    k,
                    k_prev,
                    alpha,
                    gamma,
                    sigma: 0.0,
                }
            })
            .collect()
    }
}
