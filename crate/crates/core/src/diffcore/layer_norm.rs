use super::{join, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        assert!(eps > 0.0, "layer norm eps must be positive");
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Params for LayerNormParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![(join(prefix, "gamma"), &self.gamma), (join(prefix, "beta"), &self.beta)]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (join(prefix, "gamma"), &mut self.gamma),
            (join(prefix, "beta"), &mut self.beta),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn layer_norm_forward(x: &Tensor, p: &LayerNormParams) -> Result<(Tensor, LayerNormCache)> {
    let c = p.channels();
    if x.shape().len() != 2 || x.shape()[1] != c {
        return Err(Error::dim("layer_norm_forward", format!("B x {c}"), format!("{:?}", x.shape())));
    }
    let rows = x.rows();
    let mut xhat = Tensor::zeros(&[rows, c]);
    let mut y = Tensor::zeros(&[rows, c]);
    let mut inv_std = Vec::with_capacity(rows);
    let (g, b) = (p.gamma.data(), p.beta.data());
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + p.eps).sqrt();
        inv_std.push(inv);
        let hr = xhat.row_mut(r);
        for (h, v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * inv;
        }
        let hr = xhat.row(r).to_vec();
        for (i, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = g[i] * hr[i] + b[i];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    p: &LayerNormParams,
    grad_out: &Tensor,
    grad_p: &mut LayerNormParams,
) -> Result<Tensor> {
    let c = p.channels();
    let rows = cache.xhat.rows();
    grad_out.check_shape("layer_norm_backward", &[rows, c])?;
    let g = p.gamma.data();
    let mut grad_x = Tensor::zeros(&[rows, c]);
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let gr = grad_out.row(r);
        let hr = cache.xhat.row(r);
        for i in 0..c {
            grad_p.gamma.data_mut()[i] += gr[i] * hr[i];
            grad_p.beta.data_mut()[i] += gr[i];
            dxhat[i] = gr[i] * g[i];
        }
        let sum: f64 = dxhat.iter().sum();
        let dot: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
        let inv = cache.inv_std[r];
        let n = c as f64;
        for (i, out) in grad_x.row_mut(r).iter_mut().enumerate() {
            *out = inv / n * (n * dxhat[i] - sum - hr[i] * dot);
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_params_grad, check_tensor_grad, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_maps_to_zero() {
        let x = Tensor::filled(&[1, 5], 3.25);
        let (y, _) = layer_norm_forward(&x, &LayerNormParams::new(5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_row_is_fixed() {
        let x = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let (y, _) = layer_norm_forward(&x, &LayerNormParams::new(2).with_eps(1e-12)).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = GradCheckConfig::primitive();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let c = 6;
            let mut x = Tensor::zeros(&[3, c]);
            x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
            let mut p = LayerNormParams::new(c);
            p.gamma.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            p.beta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            let mut probe = Tensor::zeros(&[3, c]);
            probe.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let loss = |x: &Tensor, p: &LayerNormParams| {
                let (y, _) = layer_norm_forward(x, p).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = layer_norm_forward(&x, &p).unwrap();
            let mut gp = p.zeroed();
            let gx = layer_norm_backward(&cache, &p, &probe, &mut gp).unwrap();
            let o = check_tensor_grad(&mut |t| loss(t, &p), &x, &gx, &cfg);
            assert!(o.passed, "seed {seed}: {o:?}");
            for (name, o) in check_params_grad(&p, &gp, &mut |pp| loss(&x, pp), &cfg) {
                assert!(o.passed, "seed {seed} {name}: {o:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_to_positive_affine_rescale(
            row in prop::collection::vec(-3.0f64..3.0, 4..12),
            a in 0.25f64..4.0,
            b in -5.0f64..5.0,
        ) {
            let c = row.len();
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(var > 1e-2);
            let p = LayerNormParams::new(c).with_eps(1e-14);
            let x = Tensor::new(vec![1, c], row.clone()).unwrap();
            let xs = Tensor::new(vec![1, c], row.iter().map(|v| a * v + b).collect()).unwrap();
            let (y, _) = layer_norm_forward(&x, &p).unwrap();
            let (ys, _) = layer_norm_forward(&xs, &p).unwrap();
            prop_assert!(y.max_abs_diff(&ys) < 1e-9);
        }
    }
}
