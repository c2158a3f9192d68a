//! Multi-view token encoder.
//!
//! Images are cut into patches, each patch is layer-normalized and linearly
//! embedded, a learned camera token is prepended per view, and an aggregator
//! alternates per-view and global self-attention over all views of a frame. The projector runs a second
//! transformer over the (optionally pruned) tokens, mean-pools them and maps
//! the pooled vector to the condition embedding consumed by the denoiser.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub views: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub agg_depth: usize,
    pub agg_heads: usize,
    pub proj_depth: usize,
    pub proj_heads: usize,
    pub mlp_ratio: usize,
    pub cond_dim: usize,
    pub view_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            views: 2,
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            dim: 32,
            agg_depth: 2,
            agg_heads: 2,
            proj_depth: 2,
            proj_heads: 2,
            mlp_ratio: 2,
            cond_dim: 64,
            view_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("encoder config: {m}")));
        if self.views == 0 || self.channels == 0 || self.patch == 0 {
            return bad("views, channels and patch must be positive".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "{}x{} image not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.cond_dim == 0 || self.dim == 0 {
            return bad("dim and cond_dim must be positive".into());
        }
        if self.dim % self.agg_heads.max(1) != 0 || self.dim % self.proj_heads.max(1) != 0 {
            return bad("dim must be divisible by the head counts".into());
        }
        if self.agg_heads == 0 || self.proj_heads == 0 {
            return bad("head counts must be positive".into());
        }
        Ok(())
    }

    /// Patch tokens per view.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens per view including the camera token.
    pub fn tokens_per_view(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.views, self.channels, self.height, self.width]
    }
}

/// Patch tokens kept after pruning: `ceil((1 − r)·n)`.
pub fn kept_patch_count(num_patches: usize, r_prune: f64) -> usize {
    // guard against (1 − r)·n landing a hair above an integer
    (((1.0 - r_prune) * num_patches as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-frame token block `[views, kept + 1, dim]`; token 0 of each view is
/// the camera token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub tokens: Tensor<T>,
    pub frame_index: usize,
    /// Patch indices present for each view, ascending.
    pub kept: Vec<Vec<usize>>,
}

impl<T: Scalar> TokenSet<T> {
    pub const CAMERA_TOKEN: usize = 0;

    pub fn views(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Token mask cardinality per view (kept patches plus the camera token).
    pub fn mask_cardinality(&self) -> Vec<usize> {
        self.kept.iter().map(|k| k.len() + 1).collect()
    }

    pub fn is_pruned(&self, num_patches: usize) -> bool {
        self.kept.iter().any(|k| k.len() != num_patches)
    }

    fn check(&self) -> Result<()> {
        let s = self.tokens.shape();
        if s.len() != 3 || self.kept.len() != s[0] || self.kept.iter().any(|k| k.len() + 1 != s[1]) {
            return Err(Error::invalid(format!(
                "token set {:?} inconsistent with kept lists",
                s
            )));
        }
        Ok(())
    }
}

/// Randomly keeps `ceil((1 − r)·N_p)` patch tokens per view; camera tokens
/// are never dropped.
pub fn prune_tokens<T: Scalar, R: Rng + ?Sized>(
    tokens: &TokenSet<T>,
    r_prune: f64,
    rng: &mut R,
) -> Result<TokenSet<T>> {
    if !(0.0..1.0).contains(&r_prune) {
        return Err(Error::invalid(format!("r_prune {r_prune} outside [0, 1)")));
    }
    tokens.check()?;
    let plan = sample_keep_plan(&tokens.kept, r_prune, rng);
    apply_keep_plan(tokens, plan)
}

/// Chooses, per view, which of the currently present patch tokens survive.
fn sample_keep_plan<R: Rng + ?Sized>(
    present: &[Vec<usize>],
    r_prune: f64,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    present
        .iter()
        .map(|p| {
            let keep = kept_patch_count(p.len(), r_prune);
            let mut pos = sample(rng, p.len(), keep).into_vec();
            pos.sort_unstable();
            pos
        })
        .collect()
}

/// `plan[v]` lists positions (within the present patch tokens) to keep.
fn apply_keep_plan<T: Scalar>(tokens: &TokenSet<T>, plan: Vec<Vec<usize>>) -> Result<TokenSet<T>> {
    let (v, s, d) = (tokens.views(), tokens.tokens_per_view(), tokens.dim());
    let keep = plan.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(v * (keep + 1) * d);
    let mut kept = Vec::with_capacity(v);
    for (view, pos) in plan.iter().enumerate() {
        let base = view * s * d;
        data.extend_from_slice(&tokens.tokens.data()[base..base + d]);
        for &p in pos {
            let row = base + (p + 1) * d;
            data.extend_from_slice(&tokens.tokens.data()[row..row + d]);
        }
        kept.push(pos.iter().map(|&p| tokens.kept[view][p]).collect());
    }
    Ok(TokenSet {
        tokens: Tensor::new([v, keep + 1, d], data)?,
        frame_index: tokens.frame_index,
        kept,
    })
}

/// Row indices into a `[frames·views·tokens, dim]` flattening that keep the
/// camera token plus `plan[f][v]` patch positions.
fn keep_rows(plan: &[Vec<Vec<usize>>], tokens_per_view: usize) -> Vec<usize> {
    let views = plan.first().map_or(0, Vec::len);
    let mut rows = Vec::new();
    for (f, frame) in plan.iter().enumerate() {
        for (v, pos) in frame.iter().enumerate() {
            let base = (f * views + v) * tokens_per_view;
            rows.push(base);
            rows.extend(pos.iter().map(|&p| base + p + 1));
        }
    }
    rows
}

/// Encoder parameters; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_norm: LayerNorm,
    patch_proj: Linear,
    pos_emb: ParamId,
    camera_token: ParamId,
    view_emb: ParamId,
    agg: Vec<TransformerBlock>,
    proj: Vec<TransformerBlock>,
    proj_norm: LayerNorm,
    cond_mlp: Mlp,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_norm = LayerNorm::new(store, "encoder.patch_norm", config.patch_len());
        let patch_proj = Linear::new(store, "encoder.patch", config.patch_len(), d, true, rng);
        let np = config.num_patches();
        let pos_emb = store.add_normal("encoder.pos", &[np, d], 0.02, rng);
        let camera_token = store.add_normal("encoder.camera", &[d], 0.02, rng);
        let view_emb = store.add_normal("encoder.view", &[config.views, d], 0.02, rng);
        let agg = (0..config.agg_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.agg.{i}"),
                    d,
                    config.agg_heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let proj = (0..config.proj_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.proj.{i}"),
                    d,
                    config.proj_heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let proj_norm = LayerNorm::new(store, "encoder.proj_norm", d);
        let cond_mlp = Mlp::new(
            store,
            "encoder.cond",
            &[d, config.cond_dim, config.cond_dim],
            Activation::Mish,
            rng,
        );
        Ok(Self {
            config,
            patch_norm,
            patch_proj,
            pos_emb,
            camera_token,
            view_emb,
            agg,
            proj,
            proj_norm,
            cond_mlp,
        })
    }

    /// `[frames, views, C, H, W]` → `[frames, views, N_p, C·p·p]`, checking
    /// shape and the `[0, 1]` value range.
    pub fn patchify<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 5 || s[1..] != c.image_shape() {
            return Err(Error::invalid(format!(
                "images {:?} do not match [frames, {}, {}, {}, {}]",
                s, c.views, c.channels, c.height, c.width
            )));
        }
        if images
            .data()
            .iter()
            .any(|&x| !(x >= T::zero() && x <= T::one()))
        {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        let (frames, views) = (s[0], s[1]);
        let (p, gh, gw) = (c.patch, c.height / c.patch, c.width / c.patch);
        let plen = c.patch_len();
        let mut out = Vec::with_capacity(images.numel());
        for fv in 0..frames * views {
            let img = &images.data()[fv * c.channels * c.height * c.width..];
            for py in 0..gh {
                for px in 0..gw {
                    for ch in 0..c.channels {
                        for y in 0..p {
                            let row = (ch * c.height + py * p + y) * c.width + px * p;
                            out.extend_from_slice(&img[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new([frames, views, c.num_patches(), plen], out)
    }

    /// Patch embedding plus positional embedding, camera token prepended:
    /// `[F, V, N_p, P]` → `[F, V, N_p + 1, D]`.
    pub fn tokenize_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
    ) -> Result<Var> {
        let (f, v) = (g.shape(patches)[0], g.shape(patches)[1]);
        let (np, d) = (self.config.num_patches(), self.config.dim);
        // Normalizing each raw patch makes a plain background patch vanish
        // and gives a patch holding a small object full contrast.
        let x = self.patch_norm.forward(g, store, patches)?;
        let x = self.patch_proj.forward(g, store, x)?;
        let pos = g.param(store, self.pos_emb);
        let pos = g.reshape(pos, &[1, 1, np, d])?;
        let x = g.add(x, pos)?;
        let cam = g.param(store, self.camera_token);
        let cam = g.reshape(cam, &[1, 1, 1, d])?;
        let cam = g.gather(cam, 0, vec![0; f])?;
        let cam = g.gather(cam, 1, vec![0; v])?;
        g.concat(&[cam, x], 2)
    }

    /// Alternating per-view and global attention; `[F, V, S, D]` in and out.
    pub fn aggregate_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<Var> {
        if self.agg.is_empty() {
            return Ok(tokens);
        }
        let shape = g.shape(tokens).to_vec();
        let (f, v, s, d) = (shape[0], shape[1], shape[2], shape[3]);
        if d != self.config.dim || v != self.config.views {
            return Err(Error::invalid(format!(
                "tokens {:?} do not match encoder dim {} / views {}",
                shape, self.config.dim, self.config.views
            )));
        }
        let mut x = tokens;
        if self.config.view_embeddings {
            let ve = g.param(store, self.view_emb);
            let ve = g.reshape(ve, &[1, v, 1, d])?;
            x = g.add(x, ve)?;
        }
        for (i, block) in self.agg.iter().enumerate() {
            let seq = if i % 2 == 0 { [f * v, s, d] } else { [f, v * s, d] };
            let h = g.reshape(x, &seq)?;
            let h = block.forward(g, store, h)?;
            x = g.reshape(h, &shape)?;
        }
        Ok(x)
    }

    /// Applies a per-frame keep plan to `[F, V, S, D]` tokens.
    pub fn prune_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        tokens: Var,
        plan: &[Vec<Vec<usize>>],
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        let (f, v, s, d) = (shape[0], shape[1], shape[2], shape[3]);
        let keep = plan
            .first()
            .and_then(|p| p.first())
            .map_or(s - 1, Vec::len);
        let flat = g.reshape(tokens, &[f * v * s, d])?;
        let rows = g.gather(flat, 0, keep_rows(plan, s))?;
        g.reshape(rows, &[f, v, keep + 1, d])
    }

    /// Random keep plan for `frames` unpruned frames.
    pub fn sample_prune_plan<R: Rng + ?Sized>(
        &self,
        frames: usize,
        r_prune: f64,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        if !(0.0..1.0).contains(&r_prune) {
            return Err(Error::invalid(format!("r_prune {r_prune} outside [0, 1)")));
        }
        let all: Vec<Vec<usize>> = vec![(0..self.config.num_patches()).collect(); self.config.views];
        Ok((0..frames)
            .map(|_| sample_keep_plan(&all, r_prune, rng))
            .collect())
    }

    /// Transformer over each frame's tokens, mean pool, MLP:
    /// `[F, V, S, D]` → `[F, d_c]`.
    pub fn project_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<Var> {
        let pooled = self.pool_graph(g, store, tokens)?;
        self.cond_mlp.forward(g, store, pooled)
    }

    /// Projector transformer and mean pool, before the condition MLP:
    /// `[F, V, S, D]` → `[F, D]`.
    pub fn pool_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 4 || shape[2] == 0 {
            return Err(Error::invalid(format!("cannot project token block {shape:?}")));
        }
        let (f, v, s, d) = (shape[0], shape[1], shape[2], shape[3]);
        if d != self.config.dim {
            return Err(Error::invalid(format!(
                "token dim {d} does not match encoder dim {}",
                self.config.dim
            )));
        }
        let mut x = g.reshape(tokens, &[f, v * s, d])?;
        for block in &self.proj {
            x = block.forward(g, store, x)?;
        }
        if !self.proj.is_empty() {
            x = self.proj_norm.forward(g, store, x)?;
        }
        g.mean_axis(x, 1)
    }

    /// Image window `[F, V, C, H, W]` to aggregated tokens `[F, V, N_p+1, D]`.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let patches = self.patchify(images)?;
        let patches = g.constant(patches);
        let tokens = self.tokenize_graph(g, store, patches)?;
        self.aggregate_graph(g, store, tokens)
    }

    /// Tokenizes one frame `[V, C, H, W]` without aggregation.
    pub fn tokenize<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        frame_index: usize,
    ) -> Result<TokenSet<T>> {
        let images = image.clone().reshape(with_leading(image.shape()))?;
        let mut g = Graph::inference();
        let patches = g.constant(self.patchify(&images)?);
        let t = self.tokenize_graph(&mut g, store, patches)?;
        self.token_set(&g, t, frame_index)
    }

    pub fn aggregate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &TokenSet<T>,
    ) -> Result<TokenSet<T>> {
        tokens.check()?;
        if tokens.is_pruned(self.config.num_patches()) {
            return Err(Error::invalid("aggregate expects unpruned tokens"));
        }
        let mut g = Graph::inference();
        let t = g.constant(tokens.tokens.clone().reshape(with_leading(tokens.tokens.shape()))?);
        let t = self.aggregate_graph(&mut g, store, t)?;
        self.token_set(&g, t, tokens.frame_index)
    }

    /// Tokenize and aggregate one frame; the unit of work the frame cache
    /// saves.
    pub fn encode_frame<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        frame_index: usize,
    ) -> Result<TokenSet<T>> {
        let images = image.clone().reshape(with_leading(image.shape()))?;
        let mut g = Graph::inference();
        let t = self.encode_graph(&mut g, store, &images)?;
        self.token_set(&g, t, frame_index)
    }

    /// Condition embedding (length `d_c`) for each token set of a window.
    pub fn project<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        window: &[TokenSet<T>],
    ) -> Result<Vec<Tensor<T>>> {
        if window.is_empty() {
            return Err(Error::invalid("empty observation window"));
        }
        let mut out = Vec::with_capacity(window.len());
        for ts in window {
            ts.check()?;
            if ts.dim() != self.config.dim {
                return Err(Error::invalid(format!(
                    "token dim {} vs encoder dim {}",
                    ts.dim(),
                    self.config.dim
                )));
            }
            let mut g = Graph::inference();
            let t = g.constant(ts.tokens.clone().reshape(with_leading(ts.tokens.shape()))?);
            let c = self.project_graph(&mut g, store, t)?;
            out.push(g.value(c).clone().reshape([self.config.cond_dim])?);
        }
        Ok(out)
    }

    fn token_set<T: Scalar>(&self, g: &Graph<T>, t: Var, frame_index: usize) -> Result<TokenSet<T>> {
        let s = g.shape(t)[1..].to_vec();
        Ok(TokenSet {
            tokens: g.value(t).clone().reshape(s)?,
            frame_index,
            kept: vec![(0..self.config.num_patches()).collect(); self.config.views],
        })
    }
}

fn with_leading(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            dim: 16,
            cond_dim: 8,
            ..Default::default()
        }
    }

    fn build(cfg: EncoderConfig) -> (Encoder, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn image(cfg: &EncoderConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(cfg.image_shape().to_vec(), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn token_counts_follow_patch_grid() {
        let cfg = small();
        assert_eq!(cfg.num_patches(), 16);
        let (enc, store) = build(cfg.clone());
        let ts = enc.tokenize(&store, &image(&cfg, 1), 0).unwrap();
        assert_eq!(ts.tokens.shape(), &[2, 17, 16]);
        assert_eq!(ts.mask_cardinality(), vec![17, 17]);
    }

    #[test]
    fn identical_views_tokenize_identically() {
        let cfg = small();
        let (enc, store) = build(cfg.clone());
        let one = image(&cfg, 3).narrow_leading(0, 1).unwrap();
        let both = Tensor::cat_leading(&[one.clone(), one]).unwrap();
        let ts = enc.tokenize(&store, &both, 0).unwrap();
        let v0 = ts.tokens.narrow_leading(0, 1).unwrap();
        let v1 = ts.tokens.narrow_leading(1, 1).unwrap();
        assert_eq!(v0.data(), v1.data());
    }

    #[test]
    fn zero_image_gives_position_plus_bias() {
        let cfg = small();
        let (enc, store) = build(cfg.clone());
        let ts = enc
            .tokenize(&store, &Tensor::zeros(cfg.image_shape().to_vec()), 0)
            .unwrap();
        let pos = store.get(store.id("encoder.pos").unwrap());
        let bias = store.get(store.id("encoder.patch.bias").unwrap());
        for p in 0..16 {
            for d in 0..16 {
                let want = pos.get(&[p, d]) + bias.data()[d];
                assert!((ts.tokens.get(&[1, p + 1, d]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_images() {
        let cfg = small();
        let (enc, store) = build(cfg.clone());
        let mut img = image(&cfg, 2);
        img.data_mut()[5] = 1.5;
        assert!(enc.tokenize(&store, &img, 0).is_err());
        assert!(enc
            .tokenize(&store, &Tensor::zeros([2, 3, 16, 16]), 0)
            .is_err());
    }

    #[test]
    fn depth_zero_aggregator_is_identity() {
        let cfg = EncoderConfig {
            agg_depth: 0,
            ..small()
        };
        let (enc, store) = build(cfg.clone());
        let ts = enc.tokenize(&store, &image(&cfg, 4), 2).unwrap();
        let agg = enc.aggregate(&store, &ts).unwrap();
        assert_eq!(agg, ts);
    }

    #[test]
    fn prune_keeps_camera_token_and_ceil_count() {
        let cfg = small();
        let (enc, store) = build(cfg.clone());
        let ts = enc.encode_frame(&store, &image(&cfg, 5), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = prune_tokens(&ts, 0.5, &mut rng).unwrap();
        assert_eq!(p.tokens.shape(), &[2, 9, 16]);
        for v in 0..2 {
            for d in 0..16 {
                assert_eq!(p.tokens.get(&[v, 0, d]), ts.tokens.get(&[v, 0, d]));
            }
        }
        let p0 = prune_tokens(&ts, 0.0, &mut rng).unwrap();
        assert_eq!(p0, ts);
        assert!(prune_tokens(&ts, 1.0, &mut rng).is_err());
        assert!(prune_tokens(&ts, -0.1, &mut rng).is_err());
    }

    #[test]
    fn prune_is_seed_deterministic() {
        let cfg = small();
        let (enc, store) = build(cfg.clone());
        let ts = enc.encode_frame(&store, &image(&cfg, 6), 0).unwrap();
        let a = prune_tokens(&ts, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = prune_tokens(&ts, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.kept, b.kept);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn default_condition_dim_is_64() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let img = Tensor::rand_uniform(cfg.image_shape().to_vec(), 0.0, 1.0, &mut rng);
        let ts = enc.encode_frame(&store, &img, 0).unwrap();
        let c = enc.project(&store, &[ts]).unwrap();
        assert_eq!(c[0].shape(), &[64]);
    }

    #[test]
    fn project_rejects_empty_window() {
        let (enc, store) = build(small());
        assert!(enc.project(&store, &[]).is_err());
    }
}
