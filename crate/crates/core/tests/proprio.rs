use geodp_core::encoder::EncoderConfig;
use geodp_core::optim::{AdamW, AdamWConfig};
use geodp_core::policy::Batch;
use geodp_core::proprio::{proprio_loss, ProprioDecoder};
use geodp_core::diffusion::{Normalizer, UNetConfig};
use geodp_core::{Graph64, ParamStore, PolicyConfig, PolicySpec, Tensor64, VisuomotorPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn decoder_training_on_frozen_features_decreases_loss() {
    let steps = 100;
    let mut curve = vec![0.0; steps];
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // frozen random "encoder": fixed features from a random linear map
        let feats = Tensor64::randn([32, 16], &mut rng);
        let targets = Tensor64::rand_uniform([32, 5], -1.0, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let dec = ProprioDecoder::new(&mut store, "p", 16, 32, 5, &mut rng);
        let cfg = AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for c in curve.iter_mut() {
            let mut g = Graph64::new();
            let f = g.constant(feats.clone());
            let t = g.constant(targets.clone());
            let y = dec.predict_graph(&mut g, &store, f).unwrap();
            let l = proprio_loss(&mut g, y, t).unwrap();
            *c += g.value(l).data()[0] / 5.0;
            let grads = g.backward(l).unwrap();
            let mut per: Vec<Option<Tensor64>> = vec![None; store.len()];
            for (id, t) in grads.params() {
                per[id.0] = Some(t.clone());
            }
            opt.step(&mut store, &per, 1e-3).unwrap();
        }
    }
    for w in curve.windows(2) {
        assert!(w[1] < w[0], "{} !< {}", w[1], w[0]);
    }
}

fn tiny_spec(lambda: f64) -> PolicySpec {
    PolicySpec {
        encoder: EncoderConfig {
            height: 16,
            width: 16,
            dim: 16,
            proj_depth: 1,
            cond_dim: 8,
            ..EncoderConfig::default()
        },
        policy: PolicyConfig {
            horizon: 8,
            action_steps: 4,
            lambda,
            r_prune: 0.0,
            proprio_hidden: 8,
            unet: UNetConfig {
                down_dims: vec![8, 16],
                kernel: 3,
                groups: 4,
                step_embed_dim: 8,
            },
            ..PolicyConfig::default()
        },
        action_norm: Normalizer {
            min: vec![-1.0; 4],
            max: vec![1.0; 4],
        },
        proprio_norm: Normalizer {
            min: vec![-1.0; 5],
            max: vec![1.0; 5],
        },
    }
}

fn encoder_grads(lambda: f64) -> (Vec<(String, Tensor64)>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let policy = VisuomotorPolicy::new(tiny_spec(lambda), &mut store, &mut rng).unwrap();
    let mut data = ChaCha8Rng::seed_from_u64(1);
    let batch = Batch {
        images: Tensor64::rand_uniform([2, 2, 2, 3, 16, 16], 0.0, 1.0, &mut data),
        proprio: Tensor64::rand_uniform([2, 2, 5], -1.0, 1.0, &mut data),
        actions: Tensor64::rand_uniform([2, 8, 4], -1.0, 1.0, &mut data),
    };
    let mut g = Graph64::new();
    let parts = policy.loss_graph(&mut g, &store, &batch, &mut data).unwrap();
    let total = g.value(parts.total).data()[0];
    let grads = g.backward(parts.total).unwrap();
    let mut enc: Vec<(String, Tensor64)> = grads
        .params()
        .filter(|(id, _)| store.name(*id).starts_with("encoder."))
        .map(|(id, t)| (store.name(id).to_string(), t.clone()))
        .collect();
    enc.sort_by(|a, b| a.0.cmp(&b.0));
    (enc, total)
}

#[test]
fn auxiliary_loss_reaches_encoder() {
    let (g0, l0) = encoder_grads(0.0);
    let (g1, l1) = encoder_grads(0.5);
    assert_ne!(l0, l1);
    assert_eq!(g0.len(), g1.len());
    let diff: f64 = g0.iter().zip(&g1).map(|(a, b)| a.1.max_abs_diff(&b.1)).fold(0.0, f64::max);
    assert!(diff > 1e-9);
}

#[test]
fn zero_weight_is_the_plain_diffusion_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let policy = VisuomotorPolicy::new(tiny_spec(0.0), &mut store, &mut rng).unwrap();
    let batch = Batch {
        images: Tensor64::rand_uniform([1, 2, 2, 3, 16, 16], 0.0, 1.0, &mut rng),
        proprio: Tensor64::zeros([1, 2, 5]),
        actions: Tensor64::zeros([1, 8, 4]),
    };
    let mut g = Graph64::new();
    let parts = policy.loss_graph(&mut g, &store, &batch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(parts.total, parts.diffusion);
    assert_eq!(
        g.value(parts.total).data()[0].to_bits(),
        g.value(parts.diffusion).data()[0].to_bits()
    );
}
