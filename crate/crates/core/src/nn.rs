//! Layers assembled from graph primitives.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Broadcastable view of a 1-D parameter: `[1, .., 1, n]` with `rank` axes,
/// or `[1, n, 1]` style when `axis` is given.
fn aligned(g: &mut Graph<impl Scalar>, v: Var, rank: usize, axis: usize) -> Result<Var> {
    let n = g.shape(v)[0];
    let mut shape = vec![1; rank];
    shape[axis] = n;
    g.reshape(v, &shape)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Linear layer initialised to zero, so it outputs exactly zero until trained.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([d_in, d_out]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x: [.., d_in]` → `[.., d_out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                let rank = g.shape(y).len();
                let b = aligned(g, b, rank, rank - 1)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let rank = g.shape(y).len();
        let gamma = g.param(store, self.gamma);
        let gamma = aligned(g, gamma, rank, rank - 1)?;
        let beta = g.param(store, self.beta);
        let beta = aligned(g, beta, rank, rank - 1)?;
        let y = g.mul(y, gamma)?;
        g.add(y, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Mish,
}

pub fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Mish => g.mish(x),
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = activate(g, h, self.act)?;
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

/// Multi-head self-attention over `[n, s, d]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (n, s, d) = {
            let sh = g.shape(x);
            (sh[0], sh[1], sh[2])
        };
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = g.reshape(qkv, &[n, s, 3, h, dh])?;
        // [3, n, h, s, dh]
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = g.slice(qkv, 0, 0, 1)?;
        let q = g.reshape(q, &[n * h, s, dh])?;
        let k = g.slice(qkv, 0, 1, 1)?;
        let k = g.reshape(k, &[n * h, s, dh])?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let v = g.slice(qkv, 0, 2, 1)?;
        let v = g.reshape(v, &[n * h, s, dh])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[n, h, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, s, d])?;
        self.out.forward(g, store, ctx)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[dim, dim * mlp_ratio, dim],
                Activation::Gelu,
                rng,
            ),
        }
    }

    /// `x: [n, s, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[c_out, c_in, kernel], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng),
            stride,
            pad: kernel / 2,
        }
    }

    /// `x: [b, c_in, l]` → `[b, c_out, l_out]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv1d(x, w, self.stride, self.pad)?;
        let b = g.param(store, self.bias);
        let b = aligned(g, b, 3, 1)?;
        g.add(y, b)
    }
}

/// Conv1d → GroupNorm (affine) → Mish.
#[derive(Debug, Clone)]
pub struct Conv1dBlock {
    pub conv: Conv1d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Conv1dBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv1d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, 1, rng),
            gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones([c_out])),
            beta: store.add(format!("{name}.gn.beta"), Tensor::zeros([c_out])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = g.group_norm(y, self.groups, LN_EPS)?;
        let gamma = g.param(store, self.gamma);
        let gamma = aligned(g, gamma, 3, 1)?;
        let beta = g.param(store, self.beta);
        let beta = aligned(g, beta, 3, 1)?;
        let y = g.mul(y, gamma)?;
        let y = g.add(y, beta)?;
        g.mish(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([3, 5, 8], &mut rng));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 8]);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let attn = SelfAttention::new(&mut store, "a", 4, 2, &mut rng);
        let x = Tensor::<f64>::randn([1, 3, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = attn.forward(&mut g, &store, xv).unwrap();
        let xp = g.gather(xv, 1, vec![2, 0, 1]).unwrap();
        let yp = attn.forward(&mut g, &store, xp).unwrap();
        let y_perm = g.gather(y, 1, vec![2, 0, 1]).unwrap();
        assert!(g.value(yp).max_abs_diff(g.value(y_perm)) < 1e-12);
    }

    #[test]
    fn conv_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let blk = Conv1dBlock::new(&mut store, "c", 4, 8, 5, 4, &mut rng);
        let down = Conv1d::new(&mut store, "d", 8, 8, 3, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([2, 4, 16], &mut rng));
        let y = blk.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 16]);
        let z = down.forward(&mut g, &store, y).unwrap();
        assert_eq!(g.shape(z), &[2, 8, 8]);
    }
}
