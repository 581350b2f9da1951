use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyper-parameters plus a step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by this factor every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_every: 50,
        }
    }
}

/// Per-parameter first and second moments and the step counter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.value(id).len()];
        Self {
            config,
            lr: config.lr,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Sets the learning rate for the given zero-based epoch.
    pub fn set_epoch(&mut self, epoch: usize) {
        let every = self.config.decay_every.max(1);
        self.lr = self.config.lr * self.config.decay_factor.powi((epoch / every) as i32);
    }

    /// One bias-corrected Adam update of every trainable parameter from the
    /// store's accumulated gradients. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            if let Some(i) = store.grad(id).data().iter().position(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    name: store.name(id).to_string(),
                    index: i,
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(c.eps);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, keyed like the parameters.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for id in store.ids() {
            let shape = store.value(id).shape().to_vec();
            let i = id.index();
            out.push((
                format!("adam.m.{}", store.name(id)),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v.{}", store.name(id)),
                Tensor::new(shape, self.v[i].clone()).expect("moment shape"),
            ));
        }
        out.push((
            "adam.step".into(),
            Tensor::scalar(T::from_f64_lossy(self.step as f64)),
        ));
        out
    }

    /// Restores moments and the step counter written by [`Adam::export`].
    pub fn import(
        &mut self,
        store: &ParamStore<T>,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for id in store.ids() {
            let i = id.index();
            for (key, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let name = format!("adam.{key}.{}", store.name(id));
                let t = lookup(&name)
                    .ok_or_else(|| TensorError::Checkpoint(format!("missing `{name}`")))?;
                if t.shape() != store.value(id).shape() {
                    return Err(TensorError::Checkpoint(format!("`{name}` has shape {:?}", t.shape())));
                }
                *buf = t.into_data();
            }
        }
        let step = lookup("adam.step")
            .ok_or_else(|| TensorError::Checkpoint("missing `adam.step`".into()))?;
        self.step = step.item().as_f64() as u64;
        Ok(())
    }
}
