//! One-to-one fusion: each point reads the single pixel under its projected
//! reference point on one pyramid level, views are averaged, and the result
//! is concatenated with the point feature and passed through a linear layer.

use rand::Rng;

use crate::dca::{FeaturePyramid, PointFeatureSet};
use crate::diffcore::{affine_backward, affine_forward, bilinear_sample_backward, bilinear_sample_into, AffineParams, Params};
use crate::error::{Error, Result};
use crate::geometry::ReferencePointSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OneToOneParams {
    /// Pyramid level read by every point (0 is stride 4).
    pub level: usize,
    /// (C_lidar + C_level) -> C_out
    pub fuse: AffineParams,
}

impl OneToOneParams {
    pub fn init(lidar_channels: usize, level_channels: usize, out: usize, level: usize, rng: &mut impl Rng) -> Self {
        OneToOneParams {
            level,
            fuse: AffineParams::glorot(lidar_channels + level_channels, out, rng),
        }
    }
}

impl Params for OneToOneParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.fuse.named(&crate::diffcore::join(prefix, "fuse"))
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.fuse.named_mut(&crate::diffcore::join(prefix, "fuse"))
    }
}

/// Mean over valid views of the bilinear sample at each point's reference
/// location on `level`; zero for points no camera sees. `N x C_level`.
pub fn sample_reference_pixels(pyramids: &[FeaturePyramid], refs: &ReferencePointSet, level: usize) -> Result<Tensor> {
    let first = pyramids.first().ok_or(Error::dim("sample_reference_pixels", "at least one camera", 0))?;
    let map0 = first.levels.get(level).ok_or(Error::dim("sample_reference_pixels level", level + 1, first.levels.len()))?;
    let c = map0.shape()[2];
    let n = refs.n_points();
    let mut out = Tensor::zeros(&[n, c]);
    let mut buf = vec![0.0; c];
    for i in 0..n {
        let views = refs.valid_views(i);
        if views == 0 {
            continue;
        }
        let inv = 1.0 / views as f64;
        for (k, pyr) in pyramids.iter().enumerate() {
            if !refs.is_valid(k, i) {
                continue;
            }
            bilinear_sample_into(&pyr.levels[level], refs.coord(k, i), &mut buf);
            for (o, v) in out.row_mut(i).iter_mut().zip(&buf) {
                *o += v * inv;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OneToOneCache {
    input: Tensor,
    lidar_channels: usize,
}

/// Returns the fused features and the concatenated input `[f, image]`.
pub fn one_to_one_forward(
    points: &PointFeatureSet,
    pyramids: &[FeaturePyramid],
    refs: &ReferencePointSet,
    params: &OneToOneParams,
) -> Result<(Tensor, OneToOneCache)> {
    let image = sample_reference_pixels(pyramids, refs, params.level)?;
    let (n, cf, ci) = (points.len(), points.channels(), image.row_len());
    if cf + ci != params.fuse.in_dim() {
        return Err(Error::dim("one_to_one_forward input width", params.fuse.in_dim(), cf + ci));
    }
    let mut input = Tensor::zeros(&[n, cf + ci]);
    for i in 0..n {
        let row = input.row_mut(i);
        row[..cf].copy_from_slice(points.features.row(i));
        row[cf..].copy_from_slice(image.row(i));
    }
    let out = affine_forward(&input, &params.fuse)?;
    Ok((
        out,
        OneToOneCache {
            input,
            lidar_channels: cf,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct OneToOneGrads {
    pub features: Tensor,
    /// Gradient for the sampled level of each camera's pyramid.
    pub level_maps: Vec<Tensor>,
    pub params: OneToOneParams,
}

pub fn one_to_one_backward(
    cache: &OneToOneCache,
    pyramids: &[FeaturePyramid],
    refs: &ReferencePointSet,
    params: &OneToOneParams,
    grad_out: &Tensor,
) -> Result<OneToOneGrads> {
    let mut grads = params.zeroed();
    let g_in = affine_backward(&cache.input, &params.fuse, grad_out, &mut grads.fuse)?;
    let (n, cf) = (g_in.rows(), cache.lidar_channels);
    let ci = g_in.row_len() - cf;
    let mut features = Tensor::zeros(&[n, cf]);
    let mut level_maps: Vec<Tensor> = pyramids.iter().map(|p| Tensor::zeros_like(&p.levels[params.level])).collect();
    let mut g_img = vec![0.0; ci];
    for i in 0..n {
        let row = g_in.row(i);
        features.row_mut(i).copy_from_slice(&row[..cf]);
        let views = refs.valid_views(i);
        if views == 0 {
            continue;
        }
        for (g, x) in g_img.iter_mut().zip(&row[cf..]) {
            *g = x / views as f64;
        }
        for (k, pyr) in pyramids.iter().enumerate() {
            if refs.is_valid(k, i) {
                bilinear_sample_backward(&pyr.levels[params.level], refs.coord(k, i), &g_img, Some(&mut level_maps[k]));
            }
        }
    }
    Ok(OneToOneGrads {
        features,
        level_maps,
        params: grads,
    })
}
