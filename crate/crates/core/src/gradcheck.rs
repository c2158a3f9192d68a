//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever calls the forward path, so it stays independent of
//! the backward rules it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Evaluates the scalar `build(graph, inputs)` at `inputs`.
pub fn eval_scalar<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::inference();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(&format!("x{i}"), t.clone(), false))
        .collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Finite-difference gradient of a scalar function with respect to each input.
pub fn numeric_grads<F>(inputs: &[Tensor<f64>], build: &F, h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval_scalar(&probe, build)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval_scalar(&probe, build)?;
            probe[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Reverse-mode gradient of the same scalar function.
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], build: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(&format!("x{i}"), t.clone(), true))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    let numeric = numeric_grads(inputs, &build, DEFAULT_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Largest per-parameter relative error for a scalar built from `store`.
/// `build` must be deterministic (reseed any rng inside it).
pub fn param_max_relative_error<F>(store: &ParamStore<f64>, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, t) in grads.params() {
        analytic[id.0] = Some(t.clone());
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let out = build(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let mut numeric = Tensor::zeros(store.get(id).shape().to_vec());
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * DEFAULT_STEP);
        }
        let a = analytic[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(numeric.shape().to_vec()));
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}

/// The primitive and loss-head gradient checks, shared by the test suites.
pub mod suite {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::{max_relative_error, param_max_relative_error};
    use crate::diffusion::{build_schedule, training_loss, BetaSchedule, MlpDenoiser};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::params::ParamStore;
    use crate::proprio::{combined_loss, proprio_loss, ProprioDecoder};
    use crate::tensor::Tensor;

    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

    pub struct Case {
        pub name: &'static str,
        pub shapes: Vec<Vec<usize>>,
        pub build: Build,
    }

    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        Case {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build: Box::new(build),
        }
    }

    /// One case per primitive (and broadcast variant).
    pub fn primitive_cases() -> Vec<Case> {
        const X: &[usize] = &[2, 3, 4];
        let mut v = vec![
            case("matmul", &[X, &[4, 5]], |g, x| g.matmul(x[0], x[1])),
            case("matmul_batched", &[X, &[2, 4, 3]], |g, x| g.matmul(x[0], x[1])),
            case("add", &[X, X], |g, x| g.add(x[0], x[1])),
            case("add_broadcast", &[X, &[1, 3, 1]], |g, x| g.add(x[0], x[1])),
            case("sub_broadcast", &[X, &[2, 1, 4]], |g, x| g.sub(x[0], x[1])),
            case("mul", &[X, X], |g, x| g.mul(x[0], x[1])),
            case("mul_broadcast", &[X, &[1, 1, 4]], |g, x| g.mul(x[0], x[1])),
            case("scale", &[X], |g, x| g.scale(x[0], -1.7)),
            case("add_scalar", &[X], |g, x| g.add_scalar(x[0], 0.3)),
            case("conv1d", &[X, &[5, 3, 3]], |g, x| g.conv1d(x[0], x[1], 1, 1)),
            case("conv1d_stride2", &[X, &[2, 3, 3]], |g, x| g.conv1d(x[0], x[1], 2, 1)),
            case("conv1d_k5", &[&[2, 3, 6], &[2, 3, 5]], |g, x| g.conv1d(x[0], x[1], 1, 2)),
            case("group_norm", &[&[2, 4, 3]], |g, x| g.group_norm(x[0], 2, 1e-5)),
            case("layer_norm", &[X], |g, x| g.layer_norm(x[0], 1e-5)),
            case("softmax", &[X], |g, x| g.softmax(x[0])),
            case("gelu", &[X], |g, x| g.gelu(x[0])),
            case("mish", &[X], |g, x| g.mish(x[0])),
            case("mean_all", &[X], |g, x| g.mean_all(x[0])),
            case("sum_all", &[X], |g, x| g.sum_all(x[0])),
            case("gather", &[X], |g, x| g.gather(x[0], 2, vec![3, 0, 0, 2])),
            case("slice", &[X], |g, x| g.slice(x[0], 1, 1, 2)),
            case("concat", &[X, &[2, 2, 4]], |g, x| g.concat(&[x[0], x[1]], 1)),
            case("reshape", &[X], |g, x| g.reshape(x[0], &[6, 4])),
            case("permute", &[X], |g, x| g.permute(x[0], &[2, 0, 1])),
        ];
        for (axis, name) in ["mean_axis0", "mean_axis1", "mean_axis2"].into_iter().enumerate() {
            v.push(case(name, &[X], move |g, x| g.mean_axis(x[0], axis)));
        }
        v
    }

    /// `sum(w ⊙ y)` with fixed random weights, so every output element matters.
    fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let w = g.constant(Tensor::randn(g.shape(y).to_vec(), &mut rng));
        let p = g.mul(y, w)?;
        g.sum_all(p)
    }

    /// Worst relative error of `c` over seeds `0..seeds`.
    pub fn run_case(c: &Case, seeds: u64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| Tensor::randn(s.clone(), &mut rng)).collect();
            let err = max_relative_error(&inputs, |g, xs| {
                let y = (c.build)(g, xs)?;
                weighted_sum(g, y, seed)
            })?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Diffusion objective with respect to the denoiser parameters.
    pub fn diffusion_loss_error(seeds: u64) -> Result<f64> {
        let schedule = build_schedule(100, 10, BetaSchedule::SquaredCos)?;
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let net = MlpDenoiser::new(&mut store, "eps", 2, 2, 3, 4, &[5], &mut rng);
            let cond = Tensor::randn([2, 3], &mut rng);
            let chunk = Tensor::rand_uniform([2, 2, 2], -1.0, 1.0, &mut rng);
            let err = param_max_relative_error(&store, |g, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
                let c = g.constant(cond.clone());
                training_loss(g, s, &net, c, &chunk, &schedule, &mut rng)
            })?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Proprio reconstruction loss and the weighted combination, with
    /// respect to the decoder parameters.
    pub fn proprio_loss_error(seeds: u64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let dec = ProprioDecoder::new(&mut store, "p", 4, 6, 5, &mut rng);
            let f = Tensor::randn([3, 4], &mut rng);
            let p = Tensor::randn([3, 5], &mut rng);
            let err = param_max_relative_error(&store, |g, s| {
                let x = g.constant(f.clone());
                let t = g.constant(p.clone());
                let y = dec.predict_graph(g, s, x)?;
                let pl = proprio_loss(g, y, t)?;
                let w = g.constant(Tensor::scalar(0.7));
                let d = g.mul(y, y)?;
                let d = g.mean_all(d)?;
                let d = g.mul(d, w)?;
                combined_loss(g, d, pl, 0.3)
            })?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}
