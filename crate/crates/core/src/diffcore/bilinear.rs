//! Bilinear sampling of `H x W x C` maps at normalized coordinates.
//!
//! A normalized point `(u, v)` maps to continuous pixel coordinates
//! `(u W - 0.5, v H - 0.5)`, so pixel centers sit at half-integers in
//! normalized units times the extent. Neighbor indices are clamped to the
//! border; the fractional weights are not, so the derivative with respect to
//! the coordinates is that of the unclamped blend.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapDims {
    pub fn of(map: &Tensor) -> MapDims {
        let s = map.shape();
        assert_eq!(s.len(), 3, "feature maps are H x W x C");
        MapDims {
            height: s[0],
            width: s[1],
            channels: s[2],
        }
    }
}

struct Corners {
    /// Element offsets of the (y0,x0), (y0,x1), (y1,x0), (y1,x1) pixels.
    offsets: [usize; 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn corners(d: MapDims, uv: [f64; 2]) -> Corners {
    let px = uv[0] * d.width as f64 - 0.5;
    let py = uv[1] * d.height as f64 - 0.5;
    let x0f = px.floor();
    let y0f = py.floor();
    let clamp = |v: f64, n: usize| -> usize { v.max(0.0).min((n - 1) as f64) as usize };
    let (x0, x1) = (clamp(x0f, d.width), clamp(x0f + 1.0, d.width));
    let (y0, y1) = (clamp(y0f, d.height), clamp(y0f + 1.0, d.height));
    let at = |y: usize, x: usize| (y * d.width + x) * d.channels;
    Corners {
        offsets: [at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)],
        fx: px - x0f,
        fy: py - y0f,
    }
}

pub fn bilinear_sample_into(map: &Tensor, uv: [f64; 2], out: &mut [f64]) {
    let d = MapDims::of(map);
    debug_assert_eq!(out.len(), d.channels);
    let c = corners(d, uv);
    let m = map.data();
    let (fx, fy) = (c.fx, c.fy);
    let [a, b, cc, dd] = c.offsets;
    for (ch, o) in out.iter_mut().enumerate() {
        let top = m[a + ch] * (1.0 - fx) + m[b + ch] * fx;
        let bottom = m[cc + ch] * (1.0 - fx) + m[dd + ch] * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

pub fn bilinear_sample(map: &Tensor, uv: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; MapDims::of(map).channels];
    bilinear_sample_into(map, uv, &mut out);
    out
}

/// Accumulates `grad_out` into `grad_map` (when given) and returns the
/// gradient with respect to `uv`.
pub fn bilinear_sample_backward(
    map: &Tensor,
    uv: [f64; 2],
    grad_out: &[f64],
    grad_map: Option<&mut Tensor>,
) -> [f64; 2] {
    let d = MapDims::of(map);
    let c = corners(d, uv);
    let m = map.data();
    let (fx, fy) = (c.fx, c.fy);
    let [a, b, cc, dd] = c.offsets;
    let (mut gx, mut gy) = (0.0, 0.0);
    for (ch, &g) in grad_out.iter().enumerate() {
        let (va, vb, vc, vd) = (m[a + ch], m[b + ch], m[cc + ch], m[dd + ch]);
        gx += g * ((1.0 - fy) * (vb - va) + fy * (vd - vc));
        let top = va * (1.0 - fx) + vb * fx;
        let bottom = vc * (1.0 - fx) + vd * fx;
        gy += g * (bottom - top);
    }
    if let Some(gm) = grad_map {
        let gm = gm.data_mut();
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        for (off, wt) in c.offsets.iter().zip(w) {
            for (ch, &g) in grad_out.iter().enumerate() {
                gm[off + ch] += g * wt;
            }
        }
    }
    [gx * d.width as f64, gy * d.height as f64]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_tensor_grad, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, c]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn constant_field() {
        let map = Tensor::filled(&[5, 7, 3], 2.5);
        for uv in [[0.3, 0.9], [-0.4, 1.7], [0.0, 0.0], [1.0, 1.0]] {
            assert_eq!(bilinear_sample(&map, uv), vec![2.5; 3]);
            let g = bilinear_sample_backward(&map, uv, &[1.0, -2.0, 0.5], None);
            assert_eq!(g, [0.0, 0.0]);
        }
    }

    #[test]
    fn center_of_four_pixels() {
        let map = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&map, [0.5, 0.5]), vec![1.5]);
    }

    #[test]
    fn exact_at_pixel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = random_map(&mut rng, 8, 16, 2);
        for i in 0..8 {
            for j in 0..16 {
                let uv = [(j as f64 + 0.5) / 16.0, (i as f64 + 0.5) / 8.0];
                let s = bilinear_sample(&map, uv);
                let off = (i * 16 + j) * 2;
                assert_eq!(s, &map.data()[off..off + 2]);
            }
        }
    }

    #[test]
    fn saturates_outside_the_map() {
        let map = Tensor::new(vec![1, 2, 1], vec![4.0, 8.0]).unwrap();
        assert_eq!(bilinear_sample(&map, [-3.0, 0.5]), vec![4.0]);
        assert_eq!(bilinear_sample(&map, [5.0, -2.0]), vec![8.0]);
    }

    /// Distance in pixel units from the sample to the nearest cell boundary;
    /// central differences are only meaningful away from those kinks.
    fn kink_margin(d: MapDims, uv: [f64; 2]) -> f64 {
        let px = uv[0] * d.width as f64 - 0.5;
        let py = uv[1] * d.height as f64 - 0.5;
        let m = |v: f64| (v - v.round()).abs();
        m(px).min(m(py))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = GradCheckConfig::primitive();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for _ in 0..100 {
            let (h, w, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4));
            let map = random_map(&mut rng, h, w, c);
            let d = MapDims::of(&map);
            let uv = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
            if kink_margin(d, uv) < 0.01 {
                continue;
            }
            checked += 1;
            let probe: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dot = |s: Vec<f64>| s.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
            let mut gmap = Tensor::zeros_like(&map);
            let guv = bilinear_sample_backward(&map, uv, &probe, Some(&mut gmap));
            let uv_t = Tensor::new(vec![2], uv.to_vec()).unwrap();
            let guv_t = Tensor::new(vec![2], guv.to_vec()).unwrap();
            let o = check_tensor_grad(&mut |t| dot(bilinear_sample(&map, [t.data()[0], t.data()[1]])), &uv_t, &guv_t, &cfg);
            assert!(o.passed, "uv {uv:?}: {o:?}");
            let o = check_tensor_grad(&mut |m| dot(bilinear_sample(m, uv)), &map, &gmap, &cfg);
            assert!(o.passed, "map grad at {uv:?}: {o:?}");
        }
        assert!(checked > 80);
    }
}
