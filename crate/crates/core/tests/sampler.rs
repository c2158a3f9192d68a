use geodp_core::diffusion::{
    add_noise, build_schedule, ddim_sample, ddim_sample_clipped_from, ddim_sample_from, training_loss, BetaSchedule, Denoiser, MlpDenoiser,
};
use geodp_core::{Graph64, ParamStore, Result, Tensor64, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> geodp_core::diffusion::NoiseSchedule {
    build_schedule(100, 10, BetaSchedule::SquaredCos).unwrap()
}

/// Returns the noise it was told about, i.e. a perfect ε-predictor.
struct Oracle(Tensor64);

impl Denoiser<f64> for Oracle {
    fn predict_graph(&self, g: &mut Graph64, _: &ParamStore<f64>, _: Var, _: &[usize], _: Var) -> Result<Var> {
        Ok(g.constant(self.0.clone()))
    }
}

struct Zero;

impl Denoiser<f64> for Zero {
    fn predict_graph(&self, g: &mut Graph64, _: &ParamStore<f64>, x: Var, _: &[usize], _: Var) -> Result<Var> {
        g.scale(x, 0.0)
    }
}

fn loss_with<D: Denoiser<f64>>(net: &D, chunk: &Tensor64, seed: u64) -> f64 {
    let mut g = Graph64::inference();
    let c = g.constant(Tensor64::zeros([chunk.shape()[0], 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = training_loss(&mut g, &ParamStore::new(), net, c, chunk, &schedule(), &mut rng).unwrap();
    g.value(l).data()[0]
}

#[test]
fn exact_noise_prediction_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let chunk = Tensor64::rand_uniform([4, 16, 4], -1.0, 1.0, &mut rng);
    let noise = add_noise(&chunk, &schedule(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap().noise;
    assert_eq!(loss_with(&Oracle(noise), &chunk, 11), 0.0);
}

#[test]
fn zero_net_loss_is_unit_second_moment() {
    let chunk = Tensor64::zeros([64, 16, 4]);
    let l = loss_with(&Zero, &chunk, 3);
    // 4096 unit normals: standard error of the mean square is √(2/4096) ≈ 0.022
    assert!((l - 1.0).abs() < 0.1, "{l}");
    assert_eq!(l, loss_with(&Zero, &chunk, 3));
}

#[test]
fn noised_variance_matches_schedule() {
    let s = schedule();
    let a = Tensor64::full([10_000, 1, 2], 0.4);
    for k in [1, 10, 50, 100] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut draw = add_noise(&a, &s, &mut rng).unwrap();
        // recompute at a fixed k from the same noise draw
        let ab = s.alpha_bar(k);
        for (x, e) in draw.noisy.data_mut().iter_mut().zip(draw.noise.data()) {
            *x = ab.sqrt() * 0.4 + (1.0 - ab).sqrt() * e;
        }
        let n = draw.noisy.numel() as f64;
        let mean = draw.noisy.sum() / n;
        let var = draw.noisy.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let want = 1.0 - ab;
        assert!((var - want).abs() <= 0.1 * want, "k={k}: {var} vs {want}");
    }
}

#[test]
fn zero_net_closed_form_product() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = Tensor64::randn([3, 16, 4], &mut rng);
    let out = ddim_sample_from(&Zero, &ParamStore::new(), &Tensor64::zeros([3, 1]), init.clone(), &s).unwrap();
    // independent oracle: ∏ √(ᾱ_prev/ᾱ_k) over the subset, from the raw betas
    let mut ab = vec![1.0];
    for b in s.betas() {
        let last = *ab.last().unwrap();
        ab.push(last * (1.0 - b));
    }
    let subset: Vec<usize> = (1..=10).map(|i| i * 10).collect();
    let mut prod = 1.0;
    for (i, &k) in subset.iter().enumerate() {
        let prev = if i == 0 { 0 } else { subset[i - 1] };
        prod *= (ab[prev] / ab[k]).sqrt();
    }
    for (o, x) in out.data().iter().zip(init.data()) {
        assert!((o - prod * x).abs() <= 1e-10 * prod);
    }
}

#[test]
fn sampling_is_deterministic_given_seed() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = MlpDenoiser::new(&mut store, "eps", 4, 2, 3, 8, &[16], &mut rng);
    let cond = Tensor64::randn([2, 3], &mut rng);
    let run = |seed| ddim_sample(&net, &store, &cond, [2, 4, 2], &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn one_step_schedule_applies_net_once() {
    let s = build_schedule(1, 1, BetaSchedule::SquaredCos).unwrap();
    let init = Tensor64::full([1, 2, 1], 0.5);
    let out = ddim_sample_from(&Zero, &ParamStore::new(), &Tensor64::zeros([1, 1]), init, &s).unwrap();
    let want = 0.5 / s.alpha_bar(1).sqrt();
    assert!(out.data().iter().all(|x| (x - want).abs() < 1e-12));
}

#[test]
fn non_finite_sample_reports_step() {
    struct Huge;
    impl Denoiser<f64> for Huge {
        fn predict_graph(&self, g: &mut Graph64, _: &ParamStore<f64>, x: Var, _: &[usize], _: Var) -> Result<Var> {
            g.scale(x, 1e300)
        }
    }
    let err = ddim_sample_from(&Huge, &ParamStore::new(), &Tensor64::zeros([1, 1]), Tensor64::ones([1, 2, 1]), &schedule())
        .unwrap_err();
    assert!(matches!(err, geodp_core::Error::SamplerNonFinite { .. } | geodp_core::Error::NonFinite { .. }));
}

/// Exact ε for data concentrated at the point `c`.
struct PointMass {
    c: f64,
    alpha_bar: Vec<f64>,
}

impl Denoiser<f64> for PointMass {
    fn predict_graph(&self, g: &mut Graph64, _: &ParamStore<f64>, x: Var, k: &[usize], _: Var) -> Result<Var> {
        let ab = self.alpha_bar[k[0]];
        let shifted = g.add_scalar(x, -ab.sqrt() * self.c)?;
        g.scale(shifted, 1.0 / (1.0 - ab).sqrt())
    }
}

#[test]
fn clipping_keeps_in_range_targets_and_bounds_the_output() {
    let s = schedule();
    let cond = Tensor64::zeros([1, 1]);
    let alpha_bar = (0..=100).map(|k| s.alpha_bar(k)).collect();
    let net = PointMass { c: 0.3, alpha_bar };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let init = Tensor64::randn([2, 8, 2], &mut rng);
    for clip in [None, Some(1.0)] {
        let out = ddim_sample_clipped_from(&net, &ParamStore::new(), &cond, init.clone(), &s, clip).unwrap();
        assert!(out.data().iter().all(|x| (x - 0.3).abs() < 1e-9), "{clip:?}");
    }

    let wide = init.map(|x| 10.0 * x);
    let out = ddim_sample_clipped_from(&Zero, &ParamStore::new(), &cond, wide.clone(), &s, Some(1.0)).unwrap();
    for (o, x) in out.data().iter().zip(wide.data()) {
        assert_eq!(*o, x.signum());
    }
}
