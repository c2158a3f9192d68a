use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Conv1d, Conv1dBlock, Linear, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::sampler::{sinusoidal_embedding, Denoiser};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub down_dims: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub step_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            down_dims: vec![32, 64],
            kernel: 5,
            groups: 8,
            step_embed_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_dims.is_empty() || self.down_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("unet needs non-empty positive down_dims"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("unet kernel must be odd"));
        }
        if let Some(d) = self.down_dims.iter().find(|&&d| d % self.groups != 0) {
            return Err(Error::invalid(format!("{d} channels not divisible into {} groups", self.groups)));
        }
        if self.step_embed_dim < 4 || self.step_embed_dim % 2 != 0 {
            return Err(Error::invalid("step_embed_dim must be even and >= 4"));
        }
        Ok(())
    }

    /// Horizons must halve cleanly at every downsampling level.
    pub fn horizon_multiple(&self) -> usize {
        1 << (self.down_dims.len() - 1)
    }
}

/// Two conv blocks with FiLM modulation from the global condition and a
/// residual connection.
#[derive(Debug, Clone)]
struct ResBlock {
    blocks: [Conv1dBlock; 2],
    film: Linear,
    residual: Option<Conv1d>,
    c_out: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        let b0 = Conv1dBlock::new(store, &format!("{name}.block0"), c_in, c_out, cfg.kernel, cfg.groups, rng);
        let b1 = Conv1dBlock::new(store, &format!("{name}.block1"), c_out, c_out, cfg.kernel, cfg.groups, rng);
        Self {
            blocks: [b0, b1],
            film: Linear::new(store, &format!("{name}.film"), cond_dim, 2 * c_out, true, rng),
            residual: (c_in != c_out)
                .then(|| Conv1d::new(store, &format!("{name}.residual"), c_in, c_out, 1, 1, rng)),
            c_out,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, cond: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let h = self.blocks[0].forward(g, store, x)?;
        let c = g.mish(cond)?;
        let film = self.film.forward(g, store, c)?;
        let film = g.reshape(film, &[b, 2, self.c_out])?;
        let scale = g.slice(film, 1, 0, 1)?;
        let scale = g.reshape(scale, &[b, self.c_out, 1])?;
        let bias = g.slice(film, 1, 1, 1)?;
        let bias = g.reshape(bias, &[b, self.c_out, 1])?;
        let h = g.mul(h, scale)?;
        let h = g.add(h, bias)?;
        let h = self.blocks[1].forward(g, store, h)?;
        let res = match &self.residual {
            Some(conv) => conv.forward(g, store, x)?,
            None => x,
        };
        g.add(h, res)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: [ResBlock; 2],
    resample: Option<Conv1d>,
}

/// 1-D temporal U-Net over action chunks `[B, T_p, d_a]`, conditioned on a
/// global vector through FiLM.
#[derive(Debug, Clone)]
pub struct UNet1d {
    pub config: UNetConfig,
    action_dim: usize,
    cond_dim: usize,
    step_mlp: Mlp,
    down: Vec<Level>,
    mid: [ResBlock; 2],
    up: Vec<Level>,
    final_block: Conv1dBlock,
    final_conv: Conv1d,
}

impl UNet1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &UNetConfig,
        action_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let dsed = cfg.step_embed_dim;
        let step_mlp = Mlp::new(store, &format!("{name}.step"), &[dsed, 4 * dsed, dsed], Activation::Mish, rng);
        let gdim = dsed + cond_dim;
        let mut dims = vec![action_dim];
        dims.extend(&cfg.down_dims);
        let pairs: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let n = pairs.len();

        let mut down = Vec::new();
        for (i, &(din, dout)) in pairs.iter().enumerate() {
            let p = format!("{name}.down{i}");
            down.push(Level {
                res: [
                    ResBlock::new(store, &format!("{p}.res0"), din, dout, gdim, cfg, rng),
                    ResBlock::new(store, &format!("{p}.res1"), dout, dout, gdim, cfg, rng),
                ],
                resample: (i + 1 < n).then(|| Conv1d::new(store, &format!("{p}.downsample"), dout, dout, 3, 2, rng)),
            });
        }
        let top = *cfg.down_dims.last().unwrap();
        let mid = [
            ResBlock::new(store, &format!("{name}.mid0"), top, top, gdim, cfg, rng),
            ResBlock::new(store, &format!("{name}.mid1"), top, top, gdim, cfg, rng),
        ];
        let mut up = Vec::new();
        for (i, &(din, dout)) in pairs[1..].iter().rev().enumerate() {
            let p = format!("{name}.up{i}");
            up.push(Level {
                res: [
                    ResBlock::new(store, &format!("{p}.res0"), 2 * dout, din, gdim, cfg, rng),
                    ResBlock::new(store, &format!("{p}.res1"), din, din, gdim, cfg, rng),
                ],
                resample: Some(Conv1d::new(store, &format!("{p}.upsample"), din, din, 3, 1, rng)),
            });
        }
        let first = cfg.down_dims[0];
        Ok(Self {
            config: cfg.clone(),
            action_dim,
            cond_dim,
            step_mlp,
            down,
            mid,
            up,
            final_block: Conv1dBlock::new(store, &format!("{name}.final"), first, first, cfg.kernel, cfg.groups, rng),
            final_conv: Conv1d::new(store, &format!("{name}.out"), first, action_dim, 1, 1, rng),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }
}

/// Nearest-neighbour ×2 along the last axis.
fn upsample_nearest<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let l = g.shape(x)[2];
    g.gather(x, 2, (0..2 * l).map(|i| i / 2).collect())
}

impl<T: Scalar> Denoiser<T> for UNet1d {
    fn predict_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        noisy: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let shape = g.shape(noisy).to_vec();
        let [b, horizon, da] = shape[..] else {
            return Err(Error::invalid(format!("noisy actions must be [B, T_p, d_a], got {shape:?}")));
        };
        if da != self.action_dim || steps.len() != b || g.shape(cond) != [b, self.cond_dim] {
            return Err(Error::invalid(format!(
                "denoiser expects d_a={} cond=[{b}, {}] and {b} steps; got d_a={da}, cond={:?}, {} steps",
                self.action_dim,
                self.cond_dim,
                g.shape(cond),
                steps.len()
            )));
        }
        if horizon % self.config.horizon_multiple() != 0 {
            return Err(Error::invalid(format!(
                "horizon {horizon} not divisible by {}",
                self.config.horizon_multiple()
            )));
        }
        let emb = g.constant(sinusoidal_embedding(steps, self.config.step_embed_dim));
        let step = self.step_mlp.forward(g, store, emb)?;
        let gcond = g.concat(&[step, cond], 1)?;

        let mut x = g.permute(noisy, &[0, 2, 1])?;
        let mut skips = Vec::new();
        for level in &self.down {
            x = level.res[0].forward(g, store, x, gcond)?;
            x = level.res[1].forward(g, store, x, gcond)?;
            skips.push(x);
            if let Some(ds) = &level.resample {
                x = ds.forward(g, store, x)?;
            }
        }
        for r in &self.mid {
            x = r.forward(g, store, x, gcond)?;
        }
        for level in &self.up {
            let skip = skips.pop().expect("one skip per up level");
            x = g.concat(&[x, skip], 1)?;
            x = level.res[0].forward(g, store, x, gcond)?;
            x = level.res[1].forward(g, store, x, gcond)?;
            if let Some(us) = &level.resample {
                x = upsample_nearest(g, x)?;
                x = us.forward(g, store, x)?;
            }
        }
        x = self.final_block.forward(g, store, x)?;
        x = self.final_conv.forward(g, store, x)?;
        g.permute(x, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = UNet1d::new(&mut store, "unet", &UNetConfig::default(), 3, 10, &mut rng).unwrap();
        for horizon in [8, 16, 32] {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::randn([2, horizon, 3], &mut rng));
            let c = g.constant(Tensor::randn([2, 10], &mut rng));
            let y = net.predict_graph(&mut g, &store, x, &[1, 50], c).unwrap();
            assert_eq!(g.shape(y), &[2, horizon, 3]);
            assert!(g.value(y).is_finite());
        }
    }

    #[test]
    fn odd_horizon_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = UNet1d::new(&mut store, "unet", &UNetConfig::default(), 2, 4, &mut rng).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros([1, 7, 2]));
        let c = g.constant(Tensor::zeros([1, 4]));
        assert!(net.predict_graph(&mut g, &store, x, &[1], c).is_err());
    }

    #[test]
    fn bad_groups_rejected() {
        let cfg = UNetConfig {
            groups: 5,
            ..UNetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
