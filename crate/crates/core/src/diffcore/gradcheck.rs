//! Central finite-difference oracle for checking analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Params;
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work);
        work.data_mut()[i] = orig - h;
        let fm = f(&work);
        work.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rtol: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (random subset).
    pub max_coords: Option<usize>,
    pub subset_seed: u64,
    /// Coordinates whose difference quotient changes by more than `rtol`
    /// between step `h` and `h / 2` straddle a kink (ReLU at zero, bilinear
    /// cell boundary) and are skipped. The check fails if more than this
    /// fraction is skipped.
    pub max_skip_fraction: f64,
}

impl GradCheckConfig {
    pub fn primitive() -> Self {
        GradCheckConfig {
            h: 1e-4,
            rtol: 1e-4,
            abs_floor: 1e-5,
            max_coords: None,
            subset_seed: 0,
            max_skip_fraction: 0.05,
        }
    }

    pub fn end_to_end() -> Self {
        GradCheckConfig {
            rtol: 1e-3,
            max_coords: Some(24),
            ..GradCheckConfig::primitive()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckOutcome {
    pub fn empty() -> Self {
        GradCheckOutcome {
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            passed: true,
        }
    }

    pub fn merge(&mut self, other: &GradCheckOutcome) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.passed &= other.passed;
    }
}

fn coords_for(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.subset_seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compare `analytic` against central differences of `f` at `x`.
fn check_coords(
    f: &mut dyn FnMut(&mut Tensor) -> f64,
    x: &mut Tensor,
    analytic: &Tensor,
    coords: &[usize],
    cfg: &GradCheckConfig,
) -> GradCheckOutcome {
    let h = cfg.h;
    let mut out = GradCheckOutcome::empty();
    for &i in coords {
        let orig = x.data()[i];
        let mut eval = |x: &mut Tensor, v: f64| {
            x.data_mut()[i] = v;
            f(x)
        };
        let fp = eval(x, orig + h);
        let fm = eval(x, orig - h);
        let fp2 = eval(x, orig + 0.5 * h);
        let fm2 = eval(x, orig - 0.5 * h);
        x.data_mut()[i] = orig;
        let c1 = (fp - fm) / (2.0 * h);
        let c2 = (fp2 - fm2) / h;
        let scale = c1.abs().max(c2.abs()).max(cfg.abs_floor);
        if (c1 - c2).abs() > cfg.rtol * scale {
            out.skipped += 1;
            continue;
        }
        let a = analytic.data()[i];
        let rel = (a - c1).abs() / a.abs().max(c1.abs()).max(cfg.abs_floor);
        out.checked += 1;
        out.max_rel_error = out.max_rel_error.max(rel);
    }
    let total = out.checked + out.skipped;
    let allowed = (cfg.max_skip_fraction * total as f64).ceil() as usize;
    out.passed = out.max_rel_error <= cfg.rtol && out.skipped <= allowed && out.checked > 0;
    out
}

pub fn check_tensor_grad(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    cfg: &GradCheckConfig,
) -> GradCheckOutcome {
    let mut work = x.clone();
    let coords = coords_for(x.len(), cfg, 0);
    check_coords(&mut |t: &mut Tensor| f(t), &mut work, analytic, &coords, cfg)
}

/// Check every tensor of a parameter bundle; returns one outcome per tensor.
pub fn check_params_grad<P: Params + Clone>(
    params: &P,
    grads: &P,
    f: &mut dyn FnMut(&P) -> f64,
    cfg: &GradCheckConfig,
) -> Vec<(String, GradCheckOutcome)> {
    let mut work = params.clone();
    let names: Vec<String> = params.named("").into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    let mut results = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let coords = coords_for(len, cfg, ti as u64 + 1);
        let mut slot = work.tensors_mut()[ti].clone();
        let outcome = check_coords(
            &mut |t: &mut Tensor| {
                *work.tensors_mut()[ti] = t.clone();
                f(&work)
            },
            &mut slot,
            &analytic[ti],
            &coords,
            cfg,
        );
        *work.tensors_mut()[ti] = slot;
        results.push((name, outcome));
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn affine_recovers_weights() {
        let w = [0.5, -3.0, 2.25];
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let g = finite_diff_grad(|t| 7.0 + t.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>(), &x, 1e-3);
        for (gi, wi) in g.data().iter().zip(&w) {
            assert!((gi - wi).abs() < 1e-10);
        }
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let mut f = |t: &Tensor| t.data().iter().map(|v| v.sin()).sum::<f64>();
        let good = Tensor::new(vec![3], x.data().iter().map(|v| v.cos()).collect()).unwrap();
        let mut bad = good.clone();
        bad.data_mut()[1] *= 1.01;
        let cfg = GradCheckConfig::primitive();
        assert!(check_tensor_grad(&mut f, &x, &good, &cfg).passed);
        assert!(!check_tensor_grad(&mut f, &x, &bad, &cfg).passed);
    }

    #[test]
    fn kinks_are_skipped_not_failed() {
        // |x| at 0 has no derivative; the analytic value is irrelevant there.
        let x = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
        let analytic = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let cfg = GradCheckConfig {
            max_skip_fraction: 0.5,
            ..GradCheckConfig::primitive()
        };
        let mut f = |t: &Tensor| t.data()[0].abs() + t.data()[1];
        let o = check_tensor_grad(&mut f, &x, &analytic, &cfg);
        assert_eq!(o.skipped, 0, "symmetric kink gives matching quotients");
        let x = Tensor::new(vec![2], vec![3e-5, 0.5]).unwrap();
        let o = check_tensor_grad(&mut f, &x, &analytic, &cfg);
        assert_eq!((o.checked, o.skipped), (1, 1));
        assert!(o.passed);
    }
}
