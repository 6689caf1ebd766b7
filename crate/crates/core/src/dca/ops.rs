//! The individual stages of the operator, each with its backward pass.
//! Batched stages take one row per valid (point, camera) pair.

use crate::diffcore::{
    affine_backward, affine_forward, bilinear_sample_backward, bilinear_sample_into, layer_norm_backward,
    layer_norm_forward, mlp_backward, mlp_forward, softmax_backward, softmax_forward, LayerNormCache, MlpCache,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{DcaParams, QueryMode};
use super::types::{FeaturePyramid, PointFeatureSet};

/// Channel-unified inputs.
#[derive(Debug, Clone)]
pub struct UnifiedFeatures {
    /// `[camera][level]`, each `H_l x W_l x C`: the 1x1-convolved pyramid.
    pub maps: Vec<Vec<Tensor>>,
    /// N x C, `LN(MLP(f))`.
    pub lidar: Tensor,
}

#[derive(Debug, Clone)]
pub struct UnifyCache {
    mlp: MlpCache,
    ln: LayerNormCache,
}

impl UnifyCache {
    pub(crate) fn relu_margin(&self) -> f64 {
        self.mlp.relu_margin()
    }
}

fn as_pixels(map: &Tensor) -> Tensor {
    let s = map.shape();
    map.clone().reshape(vec![s[0] * s[1], s[2]]).expect("same element count")
}

pub fn unify_channels(
    pyramids: &[FeaturePyramid],
    points: &PointFeatureSet,
    params: &DcaParams,
) -> Result<(UnifiedFeatures, UnifyCache)> {
    let hyper = &params.hyper;
    if points.channels() != hyper.channels {
        return Err(Error::dim("unify_channels lidar width", hyper.channels, points.channels()));
    }
    let mut maps = Vec::with_capacity(pyramids.len());
    for pyr in pyramids {
        if pyr.levels.len() < hyper.levels {
            return Err(Error::dim("unify_channels levels", hyper.levels, pyr.levels.len()));
        }
        let mut per_level = Vec::with_capacity(hyper.levels);
        for (l, unify) in params.level_unify.iter().enumerate() {
            let raw = &pyr.levels[l];
            if raw.shape()[2] != unify.in_dim() {
                return Err(Error::dim("unify_channels level width", unify.in_dim(), raw.shape()[2]));
            }
            let out = affine_forward(&as_pixels(raw), unify)?;
            per_level.push(out.reshape(vec![raw.shape()[0], raw.shape()[1], hyper.channels])?);
        }
        maps.push(per_level);
    }
    let (h, mlp) = mlp_forward(&points.features, &params.lidar_mlp)?;
    let (lidar, ln) = layer_norm_forward(&h, &params.lidar_ln)?;
    Ok((UnifiedFeatures { maps, lidar }, UnifyCache { mlp, ln }))
}

/// Returns gradients for the raw pyramid maps (`[camera][level]`, only the
/// used levels) and for the raw point features.
pub fn unify_channels_backward(
    pyramids: &[FeaturePyramid],
    params: &DcaParams,
    cache: &UnifyCache,
    grad_maps: &[Vec<Tensor>],
    grad_lidar: &Tensor,
    grads: &mut DcaParams,
) -> Result<(Vec<Vec<Tensor>>, Tensor)> {
    let mut grad_raw = Vec::with_capacity(pyramids.len());
    for (pyr, gk) in pyramids.iter().zip(grad_maps) {
        let mut per_level = Vec::with_capacity(gk.len());
        for (l, g) in gk.iter().enumerate() {
            let raw = &pyr.levels[l];
            let gx = affine_backward(&as_pixels(raw), &params.level_unify[l], &as_pixels(g), &mut grads.level_unify[l])?;
            per_level.push(gx.reshape(raw.shape().to_vec())?);
        }
        grad_raw.push(per_level);
    }
    let gh = layer_norm_backward(&cache.ln, &params.lidar_ln, grad_lidar, &mut grads.lidar_ln)?;
    let gf = mlp_backward(&cache.mlp, &params.lidar_mlp, &gh, &mut grads.lidar_mlp)?;
    Ok((grad_raw, gf))
}

#[derive(Debug, Clone)]
pub struct QueryCache {
    levels: Vec<LayerNormCache>,
}

/// Build the query rows. With image enhancement each row is the unified
/// LiDAR feature followed by the mean over levels of the LayerNorm'd initial
/// image features; otherwise it is the LiDAR feature alone.
pub fn enhance_query(lidar_rows: &Tensor, level_samples: &[Tensor], params: &DcaParams) -> Result<(Tensor, QueryCache)> {
    let c = params.hyper.channels;
    lidar_rows.check_shape("enhance_query lidar", &[lidar_rows.rows(), c])?;
    if params.hyper.query == QueryMode::Lidar {
        return Ok((lidar_rows.clone(), QueryCache { levels: Vec::new() }));
    }
    let p = lidar_rows.rows();
    if level_samples.len() != params.hyper.levels {
        return Err(Error::dim("enhance_query levels", params.hyper.levels, level_samples.len()));
    }
    let inv_l = 1.0 / level_samples.len() as f64;
    let mut query = Tensor::zeros(&[p, 2 * c]);
    let mut caches = Vec::with_capacity(level_samples.len());
    for r in 0..p {
        query.row_mut(r)[..c].copy_from_slice(lidar_rows.row(r));
    }
    for (s, ln) in level_samples.iter().zip(&params.level_ln) {
        let (y, cache) = layer_norm_forward(s, ln)?;
        for r in 0..p {
            for (q, v) in query.row_mut(r)[c..].iter_mut().zip(y.row(r)) {
                *q += v * inv_l;
            }
        }
        caches.push(cache);
    }
    Ok((query, QueryCache { levels: caches }))
}

/// Returns (grad lidar rows, grad level samples).
pub fn enhance_query_backward(
    cache: &QueryCache,
    params: &DcaParams,
    grad_query: &Tensor,
    grads: &mut DcaParams,
) -> Result<(Tensor, Vec<Tensor>)> {
    let c = params.hyper.channels;
    let p = grad_query.rows();
    if params.hyper.query == QueryMode::Lidar {
        return Ok((grad_query.clone(), Vec::new()));
    }
    let mut g_lidar = Tensor::zeros(&[p, c]);
    let mut g_img = Tensor::zeros(&[p, c]);
    let inv_l = 1.0 / cache.levels.len() as f64;
    for r in 0..p {
        let row = grad_query.row(r);
        g_lidar.row_mut(r).copy_from_slice(&row[..c]);
        for (o, v) in g_img.row_mut(r).iter_mut().zip(&row[c..]) {
            *o = v * inv_l;
        }
    }
    let mut g_levels = Vec::with_capacity(cache.levels.len());
    for (l, lc) in cache.levels.iter().enumerate() {
        g_levels.push(layer_norm_backward(lc, &params.level_ln[l], &g_img, &mut grads.level_ln[l])?);
    }
    Ok((g_lidar, g_levels))
}

/// Offsets in normalized image units, `P x (2 * L*M*D)`, interleaved (du, dv).
/// With offset learning disabled the result is identically zero.
pub fn predict_offsets(query: &Tensor, params: &DcaParams) -> Result<(Tensor, Option<MlpCache>)> {
    let s = params.hyper.samples();
    query.check_shape("predict_offsets", &[query.rows(), params.hyper.query_width()])?;
    if !params.hyper.learn_offsets {
        return Ok((Tensor::zeros(&[query.rows(), 2 * s]), None));
    }
    let (out, cache) = mlp_forward(query, &params.offset_head)?;
    Ok((out, Some(cache)))
}

pub fn predict_offsets_backward(
    cache: Option<&MlpCache>,
    params: &DcaParams,
    grad_offsets: &Tensor,
    grads: &mut DcaParams,
) -> Result<Tensor> {
    match cache {
        Some(c) => mlp_backward(c, &params.offset_head, grad_offsets, &mut grads.offset_head),
        None => Ok(Tensor::zeros(&[grad_offsets.rows(), params.hyper.query_width()])),
    }
}

/// Softmax-normalized attention weights over all `L*M*D` samples jointly.
pub fn predict_weights(query: &Tensor, params: &DcaParams) -> Result<(Tensor, MlpCache)> {
    query.check_shape("predict_weights", &[query.rows(), params.hyper.query_width()])?;
    let (logits, cache) = mlp_forward(query, &params.weight_head)?;
    Ok((softmax_forward(&logits)?, cache))
}

pub fn predict_weights_backward(
    cache: &MlpCache,
    weights: &Tensor,
    params: &DcaParams,
    grad_weights: &Tensor,
    grads: &mut DcaParams,
) -> Result<Tensor> {
    let g_logits = softmax_backward(weights, grad_weights)?;
    mlp_backward(cache, &params.weight_head, &g_logits, &mut grads.weight_head)
}

/// Bilinear samples taken by [`attend_one_to_many`], `S x C`.
#[derive(Debug, Clone)]
pub struct AttendCache {
    samples: Vec<f64>,
}

#[inline]
fn sample_point(p_ref: [f64; 2], offsets: &[f64], j: usize) -> [f64; 2] {
    [p_ref[0] + offsets[2 * j], p_ref[1] + offsets[2 * j + 1]]
}

/// `sum_{l,m,d} w_lmd * bilinear(maps[l], p_ref + offset_lmd)` for one view.
/// Sample `j` belongs to level `j / samples_per_level`; the same normalized
/// point is used on every level.
pub fn attend_one_to_many(
    maps: &[Tensor],
    p_ref: [f64; 2],
    offsets: &[f64],
    weights: &[f64],
    samples_per_level: usize,
) -> (Vec<f64>, AttendCache) {
    let c = maps[0].shape()[2];
    let s = weights.len();
    debug_assert_eq!(offsets.len(), 2 * s);
    debug_assert_eq!(s, maps.len() * samples_per_level);
    let mut value = vec![0.0; c];
    let mut samples = vec![0.0; s * c];
    for (j, (w, sample)) in weights.iter().zip(samples.chunks_exact_mut(c)).enumerate() {
        let map = &maps[j / samples_per_level];
        bilinear_sample_into(map, sample_point(p_ref, offsets, j), sample);
        for (v, x) in value.iter_mut().zip(sample.iter()) {
            *v += w * x;
        }
    }
    (value, AttendCache { samples })
}

/// Accumulates into `grad_maps` (same layout as `maps`), `grad_offsets` and
/// `grad_weights`.
#[allow(clippy::too_many_arguments)]
pub fn attend_one_to_many_backward(
    maps: &[Tensor],
    p_ref: [f64; 2],
    offsets: &[f64],
    weights: &[f64],
    samples_per_level: usize,
    cache: &AttendCache,
    grad_value: &[f64],
    grad_maps: &mut [Tensor],
    grad_offsets: &mut [f64],
    grad_weights: &mut [f64],
) {
    let c = grad_value.len();
    let mut scaled = vec![0.0; c];
    for (j, w) in weights.iter().enumerate() {
        let sample = &cache.samples[j * c..(j + 1) * c];
        grad_weights[j] += sample.iter().zip(grad_value).map(|(a, b)| a * b).sum::<f64>();
        for (s, g) in scaled.iter_mut().zip(grad_value) {
            *s = w * g;
        }
        let l = j / samples_per_level;
        let g_uv = bilinear_sample_backward(&maps[l], sample_point(p_ref, offsets, j), &scaled, Some(&mut grad_maps[l]));
        grad_offsets[2 * j] += g_uv[0];
        grad_offsets[2 * j + 1] += g_uv[1];
    }
}

/// Mean over valid views; the zero vector when no view is valid.
pub fn mean_valid_views(values: &[Vec<f64>], valid: &[bool], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return out;
    }
    for (v, _) in values.iter().zip(valid).filter(|(_, &ok)| ok) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= count as f64);
    out
}
