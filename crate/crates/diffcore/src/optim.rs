use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Hyper(format!("{self:?}")))
        }
    }
}

/// Adam with decoupled weight decay over an explicit parameter list.
///
/// Parameters not in the list are never read or written by `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Result<Self> {
        config.validate()?;
        let first = params.iter().map(|&p| Tensor::zeros(store.get(p).shape())).collect();
        let second = params.iter().map(|&p| Tensor::zeros(store.get(p).shape())).collect();
        Ok(Self {
            config,
            step: 0,
            params,
            first,
            second,
        })
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        params: Vec<ParamId>,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if params.len() != first.len() || params.len() != second.len() {
            return Err(Error::Hyper("moment count does not match parameter count".into()));
        }
        Ok(Self {
            config,
            step,
            params,
            first,
            second,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One bias-corrected update of every listed parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        for (slot, &pid) in self.params.iter().enumerate() {
            if grads.get(pid).shape() != store.get(pid).shape()
                || self.first[slot].shape() != store.get(pid).shape()
            {
                return Err(Error::Dim {
                    op: "adam_step",
                    detail: format!("gradient shape mismatch for `{}`", store.name(pid)),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        for (slot, &pid) in self.params.iter().enumerate() {
            let g = grads.get(pid).data();
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = store.get_mut(pid).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamW<T>,
) -> Result<()> {
    state.step(store, grads)
}
