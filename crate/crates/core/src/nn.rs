//! Parameterized building blocks shared by the encoder, equalization and decoder.

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::params::{Binder, Init, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Channel-first affine map: `[in×N] -> [out×N]`, weight stored `[out×in]`.
///
/// Applied to a `[C×H×W]` map it is a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.register(&format!("{name}.weight"), &[out_dim, in_dim], Init::Projection { fan_in: in_dim }),
            bias: store.register(&format!("{name}.bias"), &[out_dim], Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        b.param(self.weight).matmul(x)?.add_bias(b.param(self.bias), 0)
    }

    /// Applies the map at every position of a `[C×H×W]` map.
    pub fn forward_map<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.in_dim {
            return Err(TensorError::shape(
                "linear",
                format!("expected {}×H×W, got {shape:?}", self.in_dim),
            ));
        }
        let flat = x.reshape(&[shape[0], shape[1] * shape[2]])?;
        self.forward(b, flat)?.reshape(&[self.out_dim, shape[1], shape[2]])
    }
}

/// Layer norm over the channel axis of a channel-first tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: store.register(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: store.register(&format!("{name}.beta"), &[channels], Init::Zeros),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.layer_norm(b.param(self.gamma), b.param(self.beta), 0, LN_EPS)
    }
}
