//! Dense layers with explicit forward and analytic backward passes.
//!
//! Every layer stores only [`ParamId`](crate::params::ParamId) handles; values live in a
//! [`ParamSet`](crate::params::ParamSet) so the same layer runs in `f32` or `f64`.
//! A `backward` call accumulates parameter gradients into a gradient set with the same
//! layout and returns the gradient with respect to its inputs.

mod attention;
mod conv;
mod linear;
mod transformer;

pub use attention::{AttentionCache, AttentionMask, MultiHeadAttention};
pub use conv::{Conv2d, Conv2dCache, ConvStack, ConvStackCache, PatchEncoder};
pub use linear::{LayerNorm, LayerNormCache, Linear};
pub use transformer::{
    add_positional_and_flatten, unflatten_tokens, ConvFusion, ConvFusionCache, CrossAttentionBlock,
    CrossBlockCache, FeedForward, FeedForwardCache, SelfAttentionBlock, SelfBlockCache,
};

use crate::tensor::{Real, Tensor};

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K1: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let k0 = T::of(GELU_K0);
    let k1 = T::of(GELU_K1);
    let two = T::of(2.0);
    let mut out = x.clone();
    for v in out.data_mut() {
        let x = *v;
        // ½(1 + tanh u) = σ(2u)
        let s = T::one() / (T::one() + (-two * k0 * (x + k1 * x * x * x)).exp());
        *v = x * s;
    }
    out
}

/// Gradient of [`gelu`] given its input and the upstream gradient.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k0 = T::of(GELU_K0);
    let k1 = T::of(GELU_K1);
    let two = T::of(2.0);
    let three = T::of(3.0);
    let mut out = dy.clone();
    for (d, &x) in out.data_mut().iter_mut().zip(x.data()) {
        let s = T::one() / (T::one() + (-two * k0 * (x + k1 * x * x * x)).exp());
        let du = k0 * (T::one() + three * k1 * x * x);
        *d *= s + x * s * (T::one() - s) * two * du;
    }
    out
}
