//! Parameterized layers over the tape.

use cmtc_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Uniform initialization bound for a layer feeding a leaky ReLU.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

/// Uniform initialization bound for a linear (no activation) layer.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
    pub bound: f64,
}

impl ConvSpec {
    /// Same-padded convolution feeding a leaky ReLU.
    pub fn leaky(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride,
            bias: true,
            bound: kaiming_bound(cin * k * k),
        }
    }

    /// Same-padded convolution without a following nonlinearity.
    pub fn linear(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            bias: true,
            bound: xavier_bound(cin * k * k, cout * k * k),
        }
    }
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let shape = vec![spec.cout, spec.cin, spec.k, spec.k];
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&shape, -spec.bound, spec.bound, rng)?)?;
        let b = if spec.bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout])?)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            stride: spec.stride,
            pad: spec.k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        Ok(tape.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn forward_leaky<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE)?)
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).shape()[0]
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// Stored as `[in, out]`.
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), Tensor::uniform(&[cin, cout], -bound, bound, rng)?)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, cout])?)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                Ok(tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over the rows of `[N, D]`, scale only.
///
/// Running statistics live in the store as frozen parameters so they travel
/// with checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[1, dim])?)?;
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[1, dim])?)?;
        let running_var = store.add(format!("{name}.running_var"), Tensor::ones(&[1, dim])?)?;
        store.set_trainable(running_mean, false);
        store.set_trainable(running_var, false);
        Ok(Self {
            gamma,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Normalizes with batch statistics and returns the (mean, biased variance)
    /// used, for a later `update_running` call.
    pub fn forward_train<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let mean = tape.mean_axis(x, 0, true)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, 0, true)?;
        let shifted = tape.add_scalar(var, self.eps);
        let inv = tape.powf(shifted, -0.5);
        let normed = tape.mul(centered, inv)?;
        let gamma = tape.param(store, self.gamma);
        let y = tape.mul(normed, gamma)?;
        Ok((y, tape.value(mean).clone(), tape.value(var).clone()))
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, mean: &Tensor<T>, var: &Tensor<T>, n: usize) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        // unbiased variance for the running estimate
        let unbias = if n > 1 {
            T::from_f64_lossy(n as f64 / (n - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(var.data()) {
            *r = keep * *r + m * b * unbias;
        }
    }

    pub fn forward_eval<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(self.eps);
        let mean = tape.constant(store.value(self.running_mean).clone());
        let inv = tape.constant(store.value(self.running_var).map(|v| (v + eps).sqrt().recip()));
        let centered = tape.sub(x, mean)?;
        let normed = tape.mul(centered, inv)?;
        let gamma = tape.param(store, self.gamma);
        Ok(tape.mul(normed, gamma)?)
    }
}
