use rand::Rng;

use super::affine::{affine_backward, affine_forward, AffineParams};
use super::{join, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectified linear unit; the derivative at exactly zero is taken as zero.
#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// A stack of affine layers with ReLU between them and none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<AffineParams>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Tensor>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Tensor>,
}

impl MlpCache {
    /// Smallest |pre-activation| over the hidden ReLUs.
    pub fn relu_margin(&self) -> f64 {
        self.pre.iter().map(min_abs).fold(f64::INFINITY, f64::min)
    }
}

impl MlpParams {
    pub fn new(layers: Vec<AffineParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("MlpParams::new", "at least one layer", 0));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim("MlpParams::new", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Glorot-initialized stack through the given widths, e.g. `[16, 32, 8]`.
    pub fn glorot(widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths.windows(2).map(|w| AffineParams::glorot(w[0], w[1], rng)).collect();
        MlpParams::new(layers).expect("at least two widths")
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, AffineParams::out_dim)
    }

    pub fn last_mut(&mut self) -> &mut AffineParams {
        self.layers.last_mut().expect("non-empty")
    }
}

impl Params for MlpParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named(&join(prefix, &i.to_string())))
            .collect()
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.named_mut(&join(prefix, &i.to_string())))
            .collect()
    }
}

pub fn mlp_forward(x: &Tensor, p: &MlpParams) -> Result<(Tensor, MlpCache)> {
    let mut cache = MlpCache {
        inputs: Vec::with_capacity(p.layers.len()),
        pre: Vec::with_capacity(p.layers.len().saturating_sub(1)),
    };
    let mut h = x.clone();
    let last = p.layers.len() - 1;
    for (i, layer) in p.layers.iter().enumerate() {
        let z = affine_forward(&h, layer)?;
        cache.inputs.push(h);
        if i == last {
            h = z;
        } else {
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = relu(*v));
            cache.pre.push(z);
            h = a;
        }
    }
    Ok((h, cache))
}

pub fn mlp_backward(cache: &MlpCache, p: &MlpParams, grad_out: &Tensor, grad_p: &mut MlpParams) -> Result<Tensor> {
    let mut g = grad_out.clone();
    for i in (0..p.layers.len()).rev() {
        if i < p.layers.len() - 1 {
            for (gv, z) in g.data_mut().iter_mut().zip(cache.pre[i].data()) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        g = affine_backward(&cache.inputs[i], &p.layers[i], &g, &mut grad_p.layers[i])?;
    }
    Ok(g)
}

/// Transformer-style feed-forward block: affine, ReLU, affine. The residual
/// connection belongs to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

impl FfnParams {
    pub fn new(fc1: AffineParams, fc2: AffineParams) -> Result<Self> {
        if fc1.out_dim() != fc2.in_dim() {
            return Err(Error::dim("FfnParams::new", fc1.out_dim(), fc2.in_dim()));
        }
        Ok(FfnParams { fc1, fc2 })
    }

    pub fn glorot(channels: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        FfnParams {
            fc1: AffineParams::glorot(channels, hidden, rng),
            fc2: AffineParams::glorot(hidden, out, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }
}

impl Params for FfnParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.fc1.named(&join(prefix, "fc1"));
        v.extend(self.fc2.named(&join(prefix, "fc2")));
        v
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.fc1.named_mut(&join(prefix, "fc1"));
        v.extend(self.fc2.named_mut(&join(prefix, "fc2")));
        v
    }
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl FfnCache {
    /// Smallest |pre-activation| of the hidden ReLU.
    pub fn relu_margin(&self) -> f64 {
        min_abs(&self.pre)
    }
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn ffn_forward(x: &Tensor, p: &FfnParams) -> Result<(Tensor, FfnCache)> {
    let pre = affine_forward(x, &p.fc1)?;
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = relu(*v));
    let y = affine_forward(&hidden, &p.fc2)?;
    Ok((
        y,
        FfnCache {
            input: x.clone(),
            pre,
            hidden,
        },
    ))
}

pub fn ffn_backward(cache: &FfnCache, p: &FfnParams, grad_out: &Tensor, grad_p: &mut FfnParams) -> Result<Tensor> {
    let mut gh = affine_backward(&cache.hidden, &p.fc2, grad_out, &mut grad_p.fc2)?;
    for (g, z) in gh.data_mut().iter_mut().zip(cache.pre.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    affine_backward(&cache.input, &p.fc1, &gh, &mut grad_p.fc1)
}
