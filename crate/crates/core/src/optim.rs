//! AdamW, warmup-cosine learning rate and EMA parameter tracking.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update at learning rate `lr`; `grads` is indexed like `params`.
    /// Parameters without a gradient still receive weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} grads / {} moments for {} params",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(ParamId(i)).shape() {
                    return Err(Error::invalid(format!(
                        "grad shape {:?} for `{}` {:?}",
                        g.shape(),
                        params.name(ParamId(i)),
                        params.get(ParamId(i)).shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite gradient for `{}`",
                        params.name(ParamId(i))
                    )));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let one = T::one();
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if base_lr < 0.0 || warmup_steps > total_steps {
            return Err(Error::invalid(format!(
                "lr schedule base {base_lr}, warmup {warmup_steps}, total {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let decay = self.total_steps - self.warmup_steps;
        if decay == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / decay as f64;
        Ok(0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub gamma: f64,
    pub power: f64,
    pub max_decay: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            power: 0.75,
            max_decay: 0.9999,
        }
    }
}

impl EmaConfig {
    /// `min(max_decay, 1 − (1 + step/γ)^(−power))`, floored at zero.
    pub fn decay(&self, step: u64) -> f64 {
        let d = 1.0 - (1.0 + step as f64 / self.gamma).powf(-self.power);
        d.clamp(0.0, self.max_decay)
    }
}

/// Shadow copy of the parameters tracked with warmup EMA.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub config: EmaConfig,
    pub shadow: ParamStore<T>,
    pub updates: u64,
}

impl<T: Scalar> Ema<T> {
    pub fn new(config: EmaConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn decay(&self) -> f64 {
        self.config.decay(self.updates)
    }

    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::invalid("EMA shadow does not match parameters"));
        }
        let d = T::lit(self.decay());
        let one_minus = T::one() - d;
        for id in params.ids() {
            let src = params.get(id);
            let dst = self.shadow.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::invalid(format!(
                    "EMA shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            for (s, &p) in dst.data_mut().iter_mut().zip(src.data()) {
                *s = d * *s + one_minus * p;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut store = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..10 {
            opt.step(&mut store, &[Some(Tensor::scalar(0.0))], 1e-3)
                .unwrap();
        }
        assert_eq!(store.get(ParamId(0)).data(), &[0.7]);
    }

    #[test]
    fn single_step_by_hand() {
        // p=1, g=1, t=1: m=0.05, v=0.001, m̂=1, v̂=1
        // p ← 1·(1 − lr·wd) − lr·1/(1 + eps)
        let lr = 1e-4;
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Some(Tensor::scalar(1.0))], lr)
            .unwrap();
        let want = 1.0 * (1.0 - lr * 1e-6) - lr * 1.0 / (1.0 + 1e-8);
        let got = store.get(ParamId(0)).data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn pure_weight_decay_is_geometric() {
        let lr = 1e-2;
        let wd = 0.5;
        let mut store = scalar_store(2.0);
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut want = 2.0;
        for _ in 0..5 {
            let before = store.get(ParamId(0)).data()[0];
            opt.step(&mut store, &[Some(Tensor::scalar(0.0))], lr)
                .unwrap();
            let after = store.get(ParamId(0)).data()[0];
            assert!((before - after - lr * wd * before).abs() < 1e-15);
            want *= 1.0 - lr * wd;
        }
        assert!((store.get(ParamId(0)).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_grads() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(opt
            .step(&mut store, &[Some(Tensor::zeros([2]))], 1e-3)
            .is_err());
        assert!(opt
            .step(&mut store, &[Some(Tensor::scalar(f64::NAN))], 1e-3)
            .is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = LrSchedule::new(1e-4, 500, 10_000).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(500).unwrap(), 1e-4);
        assert!(s.lr_at(10_000).unwrap().abs() < 1e-20);
        assert!(s.lr_at(10_001).is_err());
        let left = s.lr_at(499).unwrap();
        let right = s.lr_at(501).unwrap();
        assert!((left - 1e-4).abs() < 1e-6 && (right - 1e-4).abs() < 1e-6);
    }

    #[test]
    fn ema_decay_values() {
        let c = EmaConfig::default();
        assert_eq!(c.decay(0), 0.0);
        assert_eq!(c.decay(10_000_000_000), 0.9999);
        let want = 1.0 - 101f64.powf(-0.75);
        assert!((c.decay(100) - want).abs() < 1e-12);
    }

    #[test]
    fn ema_first_update_copies_params() {
        let mut store = scalar_store(1.0);
        let mut ema = Ema::new(EmaConfig::default(), &store);
        store.get_mut(ParamId(0)).data_mut()[0] = 5.0;
        ema.update(&store).unwrap();
        assert_eq!(ema.shadow.get(ParamId(0)).data(), &[5.0]);
        store.get_mut(ParamId(0)).data_mut()[0] = 7.0;
        ema.update(&store).unwrap();
        let d = EmaConfig::default().decay(1);
        let want = d * 5.0 + (1.0 - d) * 7.0;
        assert!((ema.shadow.get(ParamId(0)).data()[0] - want).abs() < 1e-12);
    }
}
