//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward function returns whatever the matching backward needs; the
//! backward functions accumulate parameter gradients into a value of the same
//! type as the parameters, so gradients can be summed across calls.

mod affine;
mod bilinear;
mod ffn;
pub mod gradcheck;
mod layer_norm;
mod softmax;

pub use affine::{affine_backward, affine_forward, AffineParams};
pub use bilinear::{bilinear_sample, bilinear_sample_backward, bilinear_sample_into, MapDims};
pub use ffn::{
    ffn_backward, ffn_forward, mlp_backward, mlp_forward, relu, FfnCache, FfnParams, MlpCache, MlpParams,
};
pub use gradcheck::{finite_diff_grad, GradCheckConfig, GradCheckOutcome};
pub use layer_norm::{layer_norm_backward, layer_norm_forward, LayerNormCache, LayerNormParams};
pub use softmax::{softmax_backward, softmax_forward};

use crate::tensor::Tensor;

/// A bundle of named learnable tensors. `named` and `named_mut` must list the
/// same tensors in the same order.
pub trait Params {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named("").into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut("").into_iter().map(|(_, t)| t).collect()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
