use geodp_core::encoder::{kept_patch_count, prune_tokens, Encoder, EncoderConfig, TokenSet};
use geodp_core::{Graph64, ParamStore, Tensor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(config: EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(config, &mut store, &mut rng).unwrap();
    (enc, store, rng)
}

fn image(rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::rand_uniform([2, 3, 32, 32], 0.0, 1.0, rng)
}

#[test]
fn kept_count_on_ratio_grid() {
    let (enc, store, mut rng) = setup(EncoderConfig::default(), 0);
    let np = enc.config.num_patches();
    let ts = enc.encode_frame(&store, &image(&mut rng), 0).unwrap();
    for i in 0..10 {
        let r = i as f64 / 10.0;
        let want = ((1.0 - r) * np as f64 - 1e-9).ceil() as usize;
        assert_eq!(kept_patch_count(np, r), want);
        let pruned = prune_tokens(&ts, r, &mut rng).unwrap();
        assert_eq!(pruned.tokens_per_view(), want + 1, "r = {r}");
        assert_eq!(pruned.mask_cardinality(), vec![want + 1; 2]);
        for (v, kept) in pruned.kept.iter().enumerate() {
            // camera token survives untouched
            let cam = &pruned.tokens.data()[v * (want + 1) * 32..][..32];
            let orig = &ts.tokens.data()[v * (np + 1) * 32..][..32];
            assert_eq!(cam, orig);
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }
    assert!(prune_tokens(&ts, 1.0, &mut rng).is_err());
    assert!(prune_tokens(&ts, -0.1, &mut rng).is_err());
}

#[test]
fn zero_ratio_matches_unpruned_projection() {
    let (enc, store, mut rng) = setup(EncoderConfig::default(), 1);
    let window: Vec<TokenSet<f64>> = (0..2)
        .map(|i| enc.encode_frame(&store, &image(&mut rng), i).unwrap())
        .collect();
    let pruned: Vec<_> = window
        .iter()
        .map(|t| prune_tokens(t, 0.0, &mut rng).unwrap())
        .collect();
    let a = enc.project(&store, &window).unwrap();
    let b = enc.project(&store, &pruned).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y) <= 1e-6);
    }
}

#[test]
fn mean_pool_matches_direct_summation() {
    let cfg = EncoderConfig {
        proj_depth: 0,
        ..EncoderConfig::default()
    };
    let (enc, store, mut rng) = setup(cfg, 2);
    for keep in [17, 9, 1] {
        let tokens = Tensor64::randn([1, 2, keep, 32], &mut rng);
        let mut g = Graph64::inference();
        let t = g.constant(tokens.clone());
        let pooled = enc.pool_graph(&mut g, &store, t).unwrap();
        let n = (2 * keep) as f64;
        for d in 0..32 {
            let mut s = 0.0;
            for v in 0..2 {
                for k in 0..keep {
                    s += tokens.get(&[0, v, k, d]);
                }
            }
            assert!((g.value(pooled).get(&[0, d]) - s / n).abs() < 1e-12);
        }
    }
    let c = Tensor64::full([1, 2, 17, 32], 0.37);
    let mut g = Graph64::inference();
    let t = g.constant(c);
    let pooled = enc.pool_graph(&mut g, &store, t).unwrap();
    assert!(g.value(pooled).data().iter().all(|&x| (x - 0.37).abs() < 1e-15));
}

#[test]
fn swapping_views_swaps_outputs_without_view_embeddings() {
    let cfg = EncoderConfig {
        view_embeddings: false,
        ..EncoderConfig::default()
    };
    let (enc, store, mut rng) = setup(cfg, 3);
    let tokens = Tensor64::randn([1, 2, 17, 32], &mut rng);
    let half = 17 * 32;
    let mut swapped = tokens.data()[half..].to_vec();
    swapped.extend_from_slice(&tokens.data()[..half]);
    let swapped = Tensor64::new([1, 2, 17, 32], swapped).unwrap();
    let run = |x: Tensor64| {
        let mut g = Graph64::inference();
        let t = g.constant(x);
        let y = enc.aggregate_graph(&mut g, &store, t).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(tokens), run(swapped));
    for i in 0..half {
        assert!((a.data()[i] - b.data()[half + i]).abs() < 1e-12);
        assert!((a.data()[half + i] - b.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn embeddings_finite_for_extreme_images() {
    let (enc, store, mut rng) = setup(EncoderConfig::default(), 4);
    for img in [
        Tensor64::zeros([2, 3, 32, 32]),
        Tensor64::ones([2, 3, 32, 32]),
        image(&mut rng),
    ] {
        let ts = enc.encode_frame(&store, &img, 0).unwrap();
        let c = enc.project(&store, &[ts]).unwrap();
        assert_eq!(c[0].shape(), &[64]);
        assert!(c[0].is_finite());
    }
}

#[test]
fn graph_and_frame_paths_agree() {
    let (enc, store, mut rng) = setup(EncoderConfig::default(), 5);
    let imgs: Vec<_> = (0..3).map(|_| image(&mut rng)).collect();
    let batch = Tensor64::stack(&imgs).unwrap();
    let mut g = Graph64::inference();
    let t = enc.encode_graph(&mut g, &store, &batch).unwrap();
    let c = enc.project_graph(&mut g, &store, t).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let ts = enc.encode_frame(&store, img, i).unwrap();
        let one = enc.project(&store, &[ts]).unwrap();
        let row = &g.value(c).data()[i * 64..(i + 1) * 64];
        for (a, b) in row.iter().zip(one[0].data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
