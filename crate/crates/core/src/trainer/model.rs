use rand::Rng;

use crate::diffcore::{affine_backward, affine_forward, AffineParams, Params};
use crate::error::{Error, Result};
use crate::fusion::{FusionBatch, FusionModel};
use crate::tensor::Tensor;

use super::loss::argmax;
use super::optim::Optimizer;

/// A fusion strategy followed by a linear classification head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fusion: Box<dyn FusionModel>,
    pub head: AffineParams,
    head_grad: AffineParams,
    head_input: Option<Tensor>,
}

impl Classifier {
    pub fn new(fusion: Box<dyn FusionModel>, n_classes: usize, rng: &mut impl Rng) -> Self {
        let head = AffineParams::glorot(fusion.out_channels(), n_classes, rng);
        Classifier {
            fusion,
            head_grad: head.zeroed(),
            head,
            head_input: None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Logits, `N x n_classes`.
    pub fn forward(&mut self, batch: &FusionBatch<'_>) -> Result<Tensor> {
        let fused = self.fusion.forward(batch)?;
        let logits = affine_forward(&fused, &self.head)?;
        self.head_input = Some(fused);
        Ok(logits)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let input = self.head_input.take().ok_or(Error::State("Classifier"))?;
        let g = affine_backward(&input, &self.head, grad_logits, &mut self.head_grad)?;
        self.fusion.backward(&g)
    }

    pub fn zero_grad(&mut self) {
        self.fusion.zero_grad();
        self.head_grad.zero();
    }

    pub fn step(&mut self, opt: &mut dyn Optimizer) -> Result<()> {
        let (mut params, mut grads) = self.fusion.params_and_grads();
        params.extend(self.head.tensors_mut());
        grads.extend(self.head_grad.tensors());
        opt.step(&mut params, &grads)
    }

    pub fn predict(&mut self, batch: &FusionBatch<'_>) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        self.head_input = None;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Every parameter, fusion first (`fusion.*`) then the head (`head.*`).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.fusion.named_params().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)).collect();
        out.extend(self.head.named("head"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            self.fusion.named_params_mut().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)).collect();
        out.extend(self.head.named_mut("head"));
        out
    }
}
