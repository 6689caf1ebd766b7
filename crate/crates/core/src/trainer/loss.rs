use crate::diffcore::softmax_forward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of the true class and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::dim("cross_entropy_loss", "N x classes logits", format!("{:?}", logits.shape())));
    }
    let (n, k) = (logits.rows(), logits.row_len());
    if labels.len() != n {
        return Err(Error::dim("cross_entropy_loss labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    if n == 0 {
        return Ok((0.0, Tensor::zeros(&[0, k])));
    }
    let mut grad = softmax_forward(logits)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.row_mut(i)[y] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_tensor_grad, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_two_classes_is_ln2() {
        let (l, _) = cross_entropy_loss(&Tensor::zeros(&[3, 2]), &[0, 1, 1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let logits = Tensor::from_rows(&[vec![50.0, -50.0], vec![-50.0, 50.0]]).unwrap();
        let (l, g) = cross_entropy_loss(&logits, &[0, 1]).unwrap();
        assert!(l < 1e-40);
        assert!(g.max_abs() < 1e-40);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = GradCheckConfig::primitive();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Tensor::zeros(&[5, 4]);
            x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            let (_, g) = cross_entropy_loss(&x, &labels).unwrap();
            let o = check_tensor_grad(&mut |t| cross_entropy_loss(t, &labels).unwrap().0, &x, &g, &cfg);
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
