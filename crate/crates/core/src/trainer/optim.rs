//! First-order optimizers behind a common trait.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Update `params` in place from `grads` (same order and shapes on
    /// every call).
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()>;

    /// Per-tensor learning-rate multipliers, in parameter order. Tensors
    /// beyond the end of the list use 1.
    fn set_lr_scales(&mut self, scales: Vec<f64>);
}

fn scale_of(scales: &[f64], i: usize) -> f64 {
    scales.get(i).copied().unwrap_or(1.0)
}

fn check_pairs(state: &mut Vec<Tensor>, params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("optimizer grads", params.len(), grads.len()));
    }
    if state.is_empty() {
        *state = params.iter().map(|p| Tensor::zeros_like(p)).collect();
    }
    if state.len() != params.len() {
        return Err(Error::dim("optimizer state", state.len(), params.len()));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state.iter()) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::dim("optimizer tensor", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    lr_scales: Vec<f64>,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            lr_scales: Vec::new(),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        check_pairs(&mut self.m, params, grads)?;
        check_pairs(&mut self.v, params, grads)?;
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = self.lr * scale_of(&self.lr_scales, i);
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }

    fn set_lr_scales(&mut self, scales: Vec<f64>) {
        self.lr_scales = scales;
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `b = mu * b + (g + wd * p); p -= lr * b`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    lr_scales: Vec<f64>,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            lr_scales: Vec::new(),
            buf: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        check_pairs(&mut self.buf, params, grads)?;
        for (i, p) in params.iter_mut().enumerate() {
            let lr = self.lr * scale_of(&self.lr_scales, i);
            let g = grads[i].data();
            let b = self.buf[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                b[j] = self.momentum * b[j] + g[j] + self.weight_decay * *x;
                *x -= lr * b[j];
            }
        }
        Ok(())
    }

    fn set_lr_scales(&mut self, scales: Vec<f64>) {
        self.lr_scales = scales;
    }
}

pub fn build_optimizer(kind: OptimizerKind, lr: f64, weight_decay: f64, momentum: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Adamw => Box::new(AdamW::new(lr, weight_decay)),
        OptimizerKind::Sgd => Box::new(Sgd::new(lr, momentum, weight_decay)),
    }
}
