use geodp_core::diffusion::Normalizer;
use geodp_core::encoder::EncoderConfig;
use geodp_core::{Observation, Planner, PolicyConfig, PolicySpec, Tensor, VisuomotorPolicy};
use geodp_core::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(obs_steps: usize) -> PolicySpec {
    PolicySpec {
        encoder: EncoderConfig::default(),
        policy: PolicyConfig {
            obs_steps,
            ..PolicyConfig::default()
        },
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

fn observation(rng: &mut ChaCha8Rng) -> Observation {
    Observation {
        images: Tensor::rand_uniform([2, 3, 32, 32], 0.0, 1.0, rng),
        proprio: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        state: vec![],
    }
}

#[test]
fn cached_conditioning_equals_full_recompute() {
    for obs_steps in [2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(obs_steps as u64);
        let mut store = ParamStore::<f64>::new();
        let policy = VisuomotorPolicy::new(spec(obs_steps), &mut store, &mut rng).unwrap();
        let mut cached = policy.runner(&store, true, 0);
        let mut full = policy.runner(&store, false, 0);
        cached.reset(9);
        full.reset(9);
        let mut history = Vec::new();
        for step in 0..100 {
            history.push(observation(&mut rng));
            let before = cached.cache_stats().encoder_invocations;
            let a = cached.condition(&history).unwrap();
            let b = full.condition(&history).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "step {step}");
            assert_eq!(cached.cache_stats().encoder_invocations - before, 1);
            let recomputed = obs_steps.min(step + 1) as u64;
            assert!(full.cache_stats().encoder_invocations >= recomputed);
        }
        let s = cached.cache_stats();
        assert_eq!(s.encoder_invocations, 100);
        assert_eq!(s.hits, 99 * (obs_steps as u64 - 1) - (obs_steps as u64 - 1) * (obs_steps as u64 - 2) / 2);
        assert_eq!(full.cache_stats().encoder_invocations, 100 * obs_steps as u64);
    }
}
