//! Proprioception reconstruction from per-frame condition embeddings,
//! used as an auxiliary training signal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Drive coordinates in the planar environment.
pub const DEFAULT_JOINT_DIM: usize = 2;

/// `p = [q, x]` with a 3-D effector position.
pub const fn proprio_dim(joint_dim: usize) -> usize {
    joint_dim + 3
}

#[derive(Debug, Clone)]
pub struct ProprioDecoder {
    pub mlp: Mlp,
    pub d_in: usize,
    pub d_out: usize,
}

impl ProprioDecoder {
    /// `hidden = 0` gives a single linear layer.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let dims: Vec<usize> = if hidden == 0 {
            vec![d_in, d_out]
        } else {
            vec![d_in, hidden, d_out]
        };
        Self {
            mlp: Mlp::new(store, name, &dims, Activation::Mish, rng),
            d_in,
            d_out,
        }
    }

    /// `f: [N, d_c]` → `[N, n_q + 3]`.
    pub fn predict_graph<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        if g.shape(f).last() != Some(&self.d_in) {
            return Err(Error::invalid(format!(
                "proprio decoder expects features of dim {}, got {:?}",
                self.d_in,
                g.shape(f)
            )));
        }
        self.mlp.forward(g, store, f)
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        if !f.is_finite() {
            return Err(Error::invalid("proprio decoder input is not finite"));
        }
        let mut g = Graph::inference();
        let x = g.constant(f.clone());
        let y = self.predict_graph(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}

/// Mean squared error over every dimension and batch row.
pub fn proprio_loss<T: Scalar>(g: &mut Graph<T>, p_hat: Var, p: Var) -> Result<Var> {
    if g.shape(p_hat) != g.shape(p) {
        return Err(Error::invalid(format!(
            "proprio prediction {:?} vs target {:?}",
            g.shape(p_hat),
            g.shape(p)
        )));
    }
    let d = g.sub(p_hat, p)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// `diff + λ·proprio`; with `λ = 0` the diffusion loss node is returned as is.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, diff: Var, proprio: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("proprio weight {lambda} must be non-negative")));
    }
    if lambda == 0.0 {
        return Ok(diff);
    }
    let w = g.scale(proprio, lambda)?;
    g.add(diff, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_dim_matches_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        for (hidden, nq) in [(0, 2), (16, 2), (8, 7)] {
            let name = format!("p{hidden}_{nq}");
            let dec = ProprioDecoder::new(&mut store, &name, 64, hidden, proprio_dim(nq), &mut rng);
            let y = dec.predict(&store, &Tensor::randn([3, 64], &mut rng)).unwrap();
            assert_eq!(y.shape(), &[3, nq + 3]);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dec = ProprioDecoder::new(&mut store, "p", 4, 0, 5, &mut rng);
        let Linear { weight, bias, .. } = dec.mlp.layers[0].clone();
        *store.get_mut(weight) = Tensor::zeros([4, 5]);
        let b = store.get(bias.unwrap()).clone();
        let y = dec.predict(&store, &Tensor::randn([1, 4], &mut rng)).unwrap();
        assert_eq!(y.data(), b.data());
        assert!(dec.predict(&store, &Tensor::zeros([1, 3])).is_err());
    }

    fn loss_of(p_hat: &[f64], p: &[f64], rows: usize) -> f64 {
        let mut g = Graph::inference();
        let d = p.len() / rows;
        let a = g.constant(Tensor::from_f64([rows, d], p_hat).unwrap());
        let b = g.constant(Tensor::from_f64([rows, d], p).unwrap());
        let l = proprio_loss(&mut g, a, b).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss_of(&[1.0, 2.0], &[1.0, 2.0], 1), 0.0);
        assert_eq!(loss_of(&[0.0, 0.0], &[1.0, 2.0], 1), 2.5);
        assert_eq!(loss_of(&[0.0, 0.0, 0.0, 0.0], &[1.0, 2.0, 1.0, 2.0], 2), 2.5);
    }

    #[test]
    fn combined_values() {
        let mut g = Graph::<f64>::inference();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.5));
        let c = combined_loss(&mut g, a, b, 1.0).unwrap();
        assert_eq!(g.value(c).data()[0], 1.0);
        assert_eq!(combined_loss(&mut g, a, b, 0.0).unwrap(), a);
        assert!(combined_loss(&mut g, a, b, -0.1).is_err());
        let x = g.constant(Tensor::zeros([2, 3]));
        let y = g.constant(Tensor::zeros([3, 2]));
        assert!(proprio_loss(&mut g, x, y).is_err());
    }
}
