use rand::Rng;

use super::{join, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x W^T + b`. Also serves as a 1x1 convolution applied per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    /// out x in
    pub weight: Tensor,
    /// out
    pub bias: Tensor,
}

impl AffineParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim(
                "AffineParams::new",
                "weight out x in with bias [out]",
                format!("{:?} / {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(AffineParams { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        AffineParams {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut p = AffineParams::zeros(n, n);
        for i in 0..n {
            p.weight.data_mut()[i * n + i] = 1.0;
        }
        p
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let mut p = AffineParams::zeros(input, output);
        for w in p.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Params for AffineParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(join(prefix, "weight"), &self.weight), (join(prefix, "bias"), &self.bias)]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (join(prefix, "weight"), &mut self.weight),
            (join(prefix, "bias"), &mut self.bias),
        ]
    }
}

fn check_input(x: &Tensor, p: &AffineParams, context: &'static str) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != p.in_dim() {
        return Err(Error::dim(
            context,
            format!("B x {}", p.in_dim()),
            format!("{:?}", x.shape()),
        ));
    }
    Ok(())
}

pub fn affine_forward(x: &Tensor, p: &AffineParams) -> Result<Tensor> {
    check_input(x, p, "affine_forward")?;
    let (rows, din, dout) = (x.rows(), p.in_dim(), p.out_dim());
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        let xr = x.row(r);
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            out.push(b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    Tensor::new(vec![rows, dout], out)
}

/// Returns the input gradient and adds parameter gradients into `grad_p`.
pub fn affine_backward(
    x: &Tensor,
    p: &AffineParams,
    grad_out: &Tensor,
    grad_p: &mut AffineParams,
) -> Result<Tensor> {
    check_input(x, p, "affine_backward")?;
    grad_out.check_shape("affine_backward", &[x.rows(), p.out_dim()])?;
    let (rows, din, dout) = (x.rows(), p.in_dim(), p.out_dim());
    let w = p.weight.data();
    let mut grad_x = Tensor::zeros(&[rows, din]);
    for r in 0..rows {
        let xr = x.row(r);
        let gr = grad_out.row(r);
        {
            let gw = grad_p.weight.data_mut();
            for o in 0..dout {
                let g = gr[o];
                if g == 0.0 {
                    continue;
                }
                for (acc, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                    *acc += g * xv;
                }
            }
        }
        for (acc, g) in grad_p.bias.data_mut().iter_mut().zip(gr) {
            *acc += g;
        }
        let gx = grad_x.row_mut(r);
        for o in 0..dout {
            let g = gr[o];
            if g == 0.0 {
                continue;
            }
            for (acc, wv) in gx.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                *acc += g * wv;
            }
        }
    }
    Ok(grad_x)
}
