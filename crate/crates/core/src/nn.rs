//! Parameterized building blocks shared by the backbone, transformer and
//! decoder. Each block owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound to a tape on use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std.max(0.0)).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| T::lit(d.sample(&mut self.rng)))
    }

    /// He-normal for a layer with `fan_in` inputs feeding a ReLU.
    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn xavier<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / (fan_in + fan_out).max(1) as f64).sqrt())
    }
}

/// 2D convolution over `[C, H, W]` with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let weight = store.add(format!("{name}/weight"), init.he(&shape, c_in * kernel * kernel))?;
        let bias = store.add(format!("{name}/bias"), Tensor::zeros([c_out, 1, 1]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        tape.add(y, b)
    }
}

/// `x W + b` over token rows `[N, C_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}/weight"), init.xavier(&[c_in, c_out], c_in, c_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}/bias"), Tensor::zeros([1, c_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization along one axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
}

impl Norm {
    /// `affine_shape` is the broadcast shape of gamma/beta, e.g. `[C, 1, 1]`
    /// for channel normalization of `[C, H, W]`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, affine_shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= affine_shape.len() {
            return Err(Error::contract(format!("norm axis {axis} outside {affine_shape:?}")));
        }
        let gamma = store.add(format!("{name}/gamma"), Tensor::ones(affine_shape.to_vec()))?;
        let beta = store.add(format!("{name}/beta"), Tensor::zeros(affine_shape.to_vec()))?;
        Ok(Norm { gamma, beta, axis })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, self.axis, T::lit(NORM_EPS))?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

/// Two-layer ReLU perceptron on token rows.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, init, &format!("{name}/l1"), c, hidden, true)?,
            l2: Linear::new(store, init, &format!("{name}/l2"), hidden, c, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}
