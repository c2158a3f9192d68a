use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::schedule::NoiseSchedule;

/// Expert chunks outside `±NORMALIZED_BOUND` are treated as unnormalized.
pub const NORMALIZED_BOUND: f64 = 1.5;

/// ε-predictor `ε_θ(A_k, k, cond)`.
pub trait Denoiser<T: Scalar> {
    /// `noisy: [B, T_p, d_a]`, one step per batch row, `cond: [B, c]`.
    fn predict_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        noisy: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var>;

    fn predict(
        &self,
        store: &ParamStore<T>,
        noisy: &Tensor<T>,
        steps: &[usize],
        cond: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(noisy.clone());
        let c = g.constant(cond.clone());
        let y = self.predict_graph(&mut g, store, x, steps, c)?;
        Ok(g.value(y).clone())
    }
}

/// `[B, dim]` sin/cos features of the diffusion step.
pub fn sinusoidal_embedding<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    Tensor::from_fn([steps.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let freq = (-(10000f64.ln()) * (j % half) as f64 / denom).exp();
        let arg = steps[b] as f64 * freq;
        T::lit(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// Noised chunk `√ᾱ_k·A + √(1−ᾱ_k)·ε` together with the draw that made it.
#[derive(Debug, Clone)]
pub struct NoisedChunk<T> {
    pub noisy: Tensor<T>,
    pub noise: Tensor<T>,
    pub steps: Vec<usize>,
}

pub fn add_noise<T: Scalar, R: Rng + ?Sized>(
    actions: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisedChunk<T>> {
    if actions.rank() != 3 {
        return Err(Error::invalid(format!("action chunk must be [B, T_p, d_a], got {:?}", actions.shape())));
    }
    if let Some(x) = actions.data().iter().find(|x| x.as_f64().abs() > NORMALIZED_BOUND || !x.is_finite()) {
        return Err(Error::invalid(format!("expert chunk is not normalized (value {x})")));
    }
    let b = actions.shape()[0];
    let per = actions.numel() / b.max(1);
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.train_steps())).collect();
    let noise = Tensor::<T>::randn(actions.shape().to_vec(), rng);
    let noisy = Tensor::from_fn(actions.shape().to_vec(), |i| {
        let ab = schedule.alpha_bar(steps[i / per]);
        T::lit(ab.sqrt() * actions.data()[i].as_f64() + (1.0 - ab).sqrt() * noise.data()[i].as_f64())
    });
    Ok(NoisedChunk { noisy, noise, steps })
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, noise: Var) -> Result<Var> {
    let d = g.sub(pred, noise)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// ε-prediction objective on a batch of normalized expert chunks.
pub fn training_loss<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &D,
    cond: Var,
    expert: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let batch = add_noise(expert, schedule, rng)?;
    let noisy = g.constant(batch.noisy);
    let noise = g.constant(batch.noise);
    let pred = net.predict_graph(g, store, noisy, &batch.steps, cond)?;
    epsilon_loss(g, pred, noise)
}

/// Deterministic DDIM from `A_K ~ N(0, I)` of shape `[B, T_p, d_a]`.
pub fn ddim_sample<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    net: &D,
    store: &ParamStore<T>,
    cond: &Tensor<T>,
    chunk_shape: [usize; 3],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let init = Tensor::randn(chunk_shape.to_vec(), rng);
    ddim_sample_from(net, store, cond, init, schedule)
}

/// DDIM from a given initial noise; a pure function of its arguments.
pub fn ddim_sample_from<T: Scalar, D: Denoiser<T> + ?Sized>(
    net: &D,
    store: &ParamStore<T>,
    cond: &Tensor<T>,
    init: Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    ddim_sample_clipped_from(net, store, cond, init, schedule, None)
}

/// [`ddim_sample`] with the predicted clean sample clamped to `[−clip, clip]`
/// at every step and the noise estimate made consistent with it. Keeps
/// samples inside the normalized data range.
pub fn ddim_sample_clipped<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    net: &D,
    store: &ParamStore<T>,
    cond: &Tensor<T>,
    chunk_shape: [usize; 3],
    schedule: &NoiseSchedule,
    clip: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let init = Tensor::randn(chunk_shape.to_vec(), rng);
    ddim_sample_clipped_from(net, store, cond, init, schedule, Some(clip))
}

pub fn ddim_sample_clipped_from<T: Scalar, D: Denoiser<T> + ?Sized>(
    net: &D,
    store: &ParamStore<T>,
    cond: &Tensor<T>,
    init: Tensor<T>,
    schedule: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Tensor<T>> {
    let b = init.shape().first().copied().unwrap_or(0);
    let mut a = init;
    for st in schedule.ddim_steps() {
        let eps = net.predict(store, &a, &vec![st.k; b], cond)?;
        match clip {
            None => {
                let (alpha, gamma) = (T::lit(st.alpha), T::lit(st.gamma));
                for (x, e) in a.data_mut().iter_mut().zip(eps.data()) {
                    *x = alpha * (*x - gamma * *e);
                }
            }
            Some(c) => {
                let (ab, abp) = (schedule.alpha_bar(st.k), schedule.alpha_bar(st.k_prev));
                let (sa, sn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
                let (spa, spn) = (T::lit(abp.sqrt()), T::lit((1.0 - abp).sqrt()));
                let (lo, hi) = (T::lit(-c), T::lit(c));
                for (x, e) in a.data_mut().iter_mut().zip(eps.data()) {
                    let x0 = ((*x - sn * *e) / sa).max(lo).min(hi);
                    let e2 = (*x - sa * x0) / sn;
                    *x = spa * x0 + spn * e2;
                }
            }
        }
        if !a.is_finite() {
            return Err(Error::SamplerNonFinite { step: st.k });
        }
    }
    Ok(a)
}

/// Small fully connected ε-predictor over flattened chunks; useful for
/// low-dimensional problems and tests.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    pub mlp: Mlp,
    pub step_dim: usize,
    pub chunk: [usize; 2],
    pub cond_dim: usize,
}

impl MlpDenoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        horizon: usize,
        action_dim: usize,
        cond_dim: usize,
        step_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let flat = horizon * action_dim;
        let mut dims = vec![flat + cond_dim + step_dim];
        dims.extend_from_slice(hidden);
        dims.push(flat);
        Self {
            mlp: Mlp::new(store, name, &dims, Activation::Mish, rng),
            step_dim,
            chunk: [horizon, action_dim],
            cond_dim,
        }
    }
}

impl<T: Scalar> Denoiser<T> for MlpDenoiser {
    fn predict_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        noisy: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let [h, d] = self.chunk;
        let b = steps.len();
        if g.shape(noisy) != [b, h, d] || g.shape(cond) != [b, self.cond_dim] {
            return Err(Error::invalid(format!(
                "mlp denoiser expects [{b}, {h}, {d}] and [{b}, {}], got {:?} and {:?}",
                self.cond_dim,
                g.shape(noisy),
                g.shape(cond)
            )));
        }
        let x = g.reshape(noisy, &[b, h * d])?;
        let emb = g.constant(sinusoidal_embedding(steps, self.step_dim));
        let z = g.concat(&[x, cond, emb], 1)?;
        let y = self.mlp.forward(g, store, z)?;
        g.reshape(y, &[b, h, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, BetaSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl Denoiser<f64> for Zero {
        fn predict_graph(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: Var, _: &[usize], _: Var) -> Result<Var> {
            g.scale(x, 0.0)
        }
    }

    #[test]
    fn embedding_shape_and_range() {
        let e: Tensor<f64> = sinusoidal_embedding(&[0, 1, 99], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|x| x.abs() <= 1.0));
        assert_eq!(e.get(&[0, 0]), 0.0);
        assert_eq!(e.get(&[0, 8]), 1.0);
    }

    #[test]
    fn unnormalized_chunk_rejected() {
        let s = build_schedule(100, 10, BetaSchedule::SquaredCos).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::full([1, 4, 2], 7.0);
        assert!(add_noise(&a, &s, &mut rng).is_err());
    }

    #[test]
    fn zero_net_scales_by_alpha_product() {
        let s = build_schedule(100, 10, BetaSchedule::SquaredCos).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = Tensor::<f64>::randn([2, 4, 2], &mut rng);
        let cond = Tensor::zeros([2, 1]);
        let out = ddim_sample_from(&Zero, &ParamStore::new(), &cond, init.clone(), &s).unwrap();
        let prod: f64 = s.ddim_steps().iter().map(|st| st.alpha).product();
        // telescopes to 1/√ᾱ_K
        assert!((prod - 1.0 / s.alpha_bar(100).sqrt()).abs() < 1e-9 * prod);
        for (o, i) in out.data().iter().zip(init.data()) {
            assert!((o - prod * i).abs() <= 1e-12 * prod.abs().max(1.0));
        }
    }
}
