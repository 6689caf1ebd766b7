use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("softmax_forward", "B x J", format!("{:?}", logits.shape())));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient with respect to the logits, given the forward probabilities.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.check_shape("softmax_backward", probs.shape())?;
    let mut grad = Tensor::zeros_like(probs);
    for r in 0..probs.rows() {
        let (p, g) = (probs.row(r), grad_out.row(r));
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (i, out) in grad.row_mut(r).iter_mut().enumerate() {
            *out = p[i] * (g[i] - dot);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_tensor_grad, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let p = softmax_forward(&Tensor::zeros(&[1, 128])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 128.0).abs() < 1e-15));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax_forward(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-300);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = GradCheckConfig::primitive();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut x = Tensor::zeros(&[3, 7]);
            x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            let mut probe = Tensor::zeros(&[3, 7]);
            probe.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let p = softmax_forward(&x).unwrap();
            let g = softmax_backward(&p, &probe).unwrap();
            let mut f = |t: &Tensor| {
                let y = softmax_forward(t).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let o = check_tensor_grad(&mut f, &x, &g, &cfg);
            assert!(o.passed, "seed {seed}: {o:?}");
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 1..64),
            shift in -100.0f64..100.0,
        ) {
            let j = row.len();
            let x = Tensor::new(vec![1, j], row.clone()).unwrap();
            let xs = Tensor::new(vec![1, j], row.iter().map(|v| v + shift).collect()).unwrap();
            let p = softmax_forward(&x).unwrap();
            let ps = softmax_forward(&xs).unwrap();
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            prop_assert!(p.max_abs_diff(&ps) < 1e-9);
        }
    }
}
