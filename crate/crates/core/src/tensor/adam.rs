use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Array, ParamGrads, ParamStore, Scalar};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate ramp over this many steps; 0 disables it.
    pub warmup_steps: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100, max_grad_norm: None }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched and their moments are not decayed.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, _, a)| vec![T::zero(); a.len()]).collect::<Vec<_>>();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.step.max(1);
        if self.config.warmup_steps == 0 {
            self.config.lr
        } else {
            self.config.lr * (t as f64 / self.config.warmup_steps as f64).min(1.0)
        }
    }

    /// Optimiser state as a parameter store (`adam.m.*`, `adam.v.*`, `adam.step`)
    /// so it can travel in a checkpoint next to the weights.
    pub fn state_store(&self, store: &ParamStore<T>) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for (id, name, a) in store.iter() {
            out.add(format!("adam.m.{name}"), Array::new(a.shape().to_vec(), self.m[id.0].clone())?)?;
            out.add(format!("adam.v.{name}"), Array::new(a.shape().to_vec(), self.v[id.0].clone())?)?;
        }
        out.add("adam.step", Array::vector(vec![T::lit(self.step as f64)]))?;
        Ok(out)
    }

    /// Inverse of [`Adam::state_store`].
    pub fn restore(config: AdamConfig, store: &ParamStore<T>, state: &ParamStore<T>) -> Result<Self> {
        let mut adam = Self::new(config, store);
        let fetch = |name: String, len: usize| -> Result<Vec<T>> {
            let id = state.id(&name).ok_or_else(|| Error::Parameter(format!("optimiser state lacks {name}")))?;
            let a = state.get(id);
            if a.len() != len {
                return Err(Error::Dimension(format!("{name}: {} values, expected {len}", a.len())));
            }
            Ok(a.data().to_vec())
        };
        for (id, name, a) in store.iter() {
            adam.m[id.0] = fetch(format!("adam.m.{name}"), a.len())?;
            adam.v[id.0] = fetch(format!("adam.v.{name}"), a.len())?;
        }
        adam.step = fetch("adam.step".into(), 1)?[0].as_f64() as usize;
        Ok(adam)
    }

    /// Rounds the moments to single precision, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for x in self.m.iter_mut().chain(self.v.iter_mut()).flatten() {
            *x = T::lit(x.as_f64() as f32 as f64);
        }
    }

    /// Applies one update. A non-finite gradient rejects the whole step and
    /// leaves parameters and optimiser state unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient; optimiser step rejected".into()));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let n = grads.global_norm().as_f64();
                if n > max {
                    T::lit(max / n)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        self.step += 1;
        let lr = T::lit(self.current_lr());
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = T::lit(self.config.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
