//! Full forward and backward pass of the operator over a batch of points.

use crate::diffcore::{bilinear_sample_backward, bilinear_sample_into, ffn_backward, ffn_forward, FfnCache, MlpCache, Params};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraRig, ReferencePointSet};
use crate::tensor::Tensor;

use super::ops::{
    attend_one_to_many, attend_one_to_many_backward, enhance_query, enhance_query_backward, predict_offsets,
    predict_offsets_backward, predict_weights, predict_weights_backward, unify_channels, unify_channels_backward,
    AttendCache, QueryCache, UnifiedFeatures, UnifyCache,
};
use super::params::{DcaParams, QueryMode};
use super::types::{FeaturePyramid, OffsetField, PointFeatureSet};

/// Everything one forward pass reads: the points, one pyramid per camera and
/// the projected reference points.
#[derive(Debug, Clone)]
pub struct DcaInputs<'a> {
    pub points: &'a PointFeatureSet,
    pub pyramids: &'a [FeaturePyramid],
    pub refs: ReferencePointSet,
}

impl<'a> DcaInputs<'a> {
    /// Project the points through `rig` after checking that every pyramid
    /// matches its camera's image size.
    pub fn new(points: &'a PointFeatureSet, pyramids: &'a [FeaturePyramid], rig: &CameraRig) -> Result<Self> {
        if pyramids.len() != rig.len() {
            return Err(Error::dim("DcaInputs pyramids", rig.len(), pyramids.len()));
        }
        for (pyr, cam) in pyramids.iter().zip(&rig.cameras) {
            pyr.check_camera(cam)?;
        }
        let refs = project(rig, &points.coords)?;
        Ok(DcaInputs { points, pyramids, refs })
    }

    /// Use precomputed reference points.
    pub fn with_refs(points: &'a PointFeatureSet, pyramids: &'a [FeaturePyramid], refs: ReferencePointSet) -> Result<Self> {
        if refs.n_cameras() != pyramids.len() {
            return Err(Error::dim("DcaInputs refs cameras", pyramids.len(), refs.n_cameras()));
        }
        if refs.n_points() != points.len() {
            return Err(Error::dim("DcaInputs refs points", points.len(), refs.n_points()));
        }
        Ok(DcaInputs { points, pyramids, refs })
    }
}

#[derive(Debug, Clone)]
pub struct DcaOutput {
    /// N x C, `FFN(f + image_value)`.
    pub fused: Tensor,
    /// N x C, the view-averaged attended image feature.
    pub image_value: Tensor,
    pub field: OffsetField,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DcaCache {
    n_points: usize,
    pairs: Vec<(usize, usize)>,
    p_ref: Vec<[f64; 2]>,
    views: Vec<usize>,
    raw_levels: Vec<FeaturePyramid>,
    unified: UnifiedFeatures,
    unify: UnifyCache,
    query: QueryCache,
    offset_head: Option<MlpCache>,
    weight_head: MlpCache,
    offsets: Tensor,
    weights: Tensor,
    attend: Vec<AttendCache>,
    ffn: FfnCache,
}

/// Gradients of a scalar loss with respect to every input of the operator.
#[derive(Debug, Clone)]
pub struct DcaGrads {
    /// N x C
    pub features: Tensor,
    /// `[camera][level]`, for the levels the operator reads.
    pub pyramids: Vec<Vec<Tensor>>,
    pub params: DcaParams,
}

fn gather_rows(src: &Tensor, idx: impl Iterator<Item = usize>, len: usize) -> Tensor {
    let w = src.row_len();
    let mut out = Tensor::zeros(&[len, w]);
    for (r, i) in idx.enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}

impl DcaCache {
    /// Smallest |pre-activation| over every ReLU in the pass. Finite
    /// differences are only meaningful when this exceeds the step size by a
    /// comfortable factor.
    pub fn relu_margin(&self) -> f64 {
        let mut m = self.ffn.relu_margin().min(self.weight_head.relu_margin()).min(self.unify.relu_margin());
        if let Some(c) = &self.offset_head {
            m = m.min(c.relu_margin());
        }
        m
    }

    /// Smallest distance, in pixels of the level being read, from any
    /// bilinear sample location (reference points and offset samples) to a
    /// pixel-center grid line, where the interpolation weights have a kink.
    pub fn cell_margin(&self) -> f64 {
        let spl = self.offsets.row_len() / 2 / self.unified.maps.first().map_or(1, |m| m.len()).max(1);
        let mut margin = f64::INFINITY;
        let mut visit = |uv: [f64; 2], map: &Tensor| {
            let (h, w) = (map.shape()[0] as f64, map.shape()[1] as f64);
            for x in [uv[0] * w - 0.5, uv[1] * h - 0.5] {
                margin = margin.min((x - x.round()).abs());
            }
        };
        for (i, &(_, k)) in self.pairs.iter().enumerate() {
            let maps = &self.unified.maps[k];
            let row = self.offsets.row(i);
            for map in maps {
                visit(self.p_ref[i], map);
            }
            for j in 0..row.len() / 2 {
                visit([self.p_ref[i][0] + row[2 * j], self.p_ref[i][1] + row[2 * j + 1]], &maps[j / spl]);
            }
        }
        margin
    }
}

pub fn dca_forward(inputs: &DcaInputs<'_>, params: &DcaParams) -> Result<(DcaOutput, DcaCache)> {
    let hyper = &params.hyper;
    let c = hyper.channels;
    let n_points = inputs.points.len();
    let refs = &inputs.refs;
    let raw_levels: Vec<FeaturePyramid> = inputs
        .pyramids
        .iter()
        .map(|p| FeaturePyramid {
            levels: p.levels.iter().take(hyper.levels).cloned().collect(),
        })
        .collect();
    let (unified, unify) = unify_channels(&raw_levels, inputs.points, params)?;

    let mut pairs = Vec::new();
    let mut p_ref = Vec::new();
    let mut views = vec![0usize; n_points];
    for (n, count) in views.iter_mut().enumerate() {
        for k in 0..refs.n_cameras() {
            if refs.is_valid(k, n) {
                pairs.push((n, k));
                p_ref.push(refs.coord(k, n));
                *count += 1;
            }
        }
    }
    let n_pairs = pairs.len();

    let lidar_rows = gather_rows(&unified.lidar, pairs.iter().map(|p| p.0), n_pairs);
    let level_samples: Vec<Tensor> = if hyper.query == QueryMode::LidarAndImage {
        (0..hyper.levels)
            .map(|l| {
                let mut t = Tensor::zeros(&[n_pairs, c]);
                for (i, &(_, k)) in pairs.iter().enumerate() {
                    bilinear_sample_into(&unified.maps[k][l], p_ref[i], t.row_mut(i));
                }
                t
            })
            .collect()
    } else {
        Vec::new()
    };
    let (query, query_cache) = enhance_query(&lidar_rows, &level_samples, params)?;
    let (offsets, offset_head) = predict_offsets(&query, params)?;
    let (weights, weight_head) = predict_weights(&query, params)?;

    let spl = hyper.samples_per_level();
    let mut image_value = Tensor::zeros(&[n_points, c]);
    let mut attend = Vec::with_capacity(n_pairs);
    for (i, &(n, k)) in pairs.iter().enumerate() {
        let (value, cache) = attend_one_to_many(&unified.maps[k], p_ref[i], offsets.row(i), weights.row(i), spl);
        let inv = 1.0 / views[n] as f64;
        for (o, v) in image_value.row_mut(n).iter_mut().zip(&value) {
            *o += v * inv;
        }
        attend.push(cache);
    }

    let mut ffn_in = inputs.points.features.clone();
    ffn_in.add_assign(&image_value);
    let (fused, ffn) = ffn_forward(&ffn_in, &params.ffn)?;

    let s = hyper.samples();
    let field = OffsetField {
        pairs: pairs.clone(),
        offsets: offsets.clone().reshape(vec![n_pairs, s, 2])?,
        weights: weights.clone(),
    };
    let cache = DcaCache {
        n_points,
        pairs,
        p_ref,
        views,
        raw_levels,
        unified,
        unify,
        query: query_cache,
        offset_head,
        weight_head,
        offsets,
        weights,
        attend,
        ffn,
    };
    Ok((
        DcaOutput {
            fused,
            image_value,
            field,
        },
        cache,
    ))
}

pub fn dca_backward(cache: &DcaCache, params: &DcaParams, grad_fused: &Tensor) -> Result<DcaGrads> {
    let hyper = &params.hyper;
    let c = hyper.channels;
    grad_fused.check_shape("dca_backward grad", &[cache.n_points, c])?;
    let mut grads = params.zeroed();

    let g_in = ffn_backward(&cache.ffn, &params.ffn, grad_fused, &mut grads.ffn)?;

    let spl = hyper.samples_per_level();
    let n_pairs = cache.pairs.len();
    let mut g_maps: Vec<Vec<Tensor>> = cache.unified.maps.iter().map(|k| k.iter().map(Tensor::zeros_like).collect()).collect();
    let mut g_offsets = Tensor::zeros_like(&cache.offsets);
    let mut g_weights = Tensor::zeros_like(&cache.weights);
    let mut g_value = vec![0.0; c];
    for (i, &(n, k)) in cache.pairs.iter().enumerate() {
        let inv = 1.0 / cache.views[n] as f64;
        for (g, x) in g_value.iter_mut().zip(g_in.row(n)) {
            *g = x * inv;
        }
        attend_one_to_many_backward(
            &cache.unified.maps[k],
            cache.p_ref[i],
            cache.offsets.row(i),
            cache.weights.row(i),
            spl,
            &cache.attend[i],
            &g_value,
            &mut g_maps[k],
            g_offsets.row_mut(i),
            g_weights.row_mut(i),
        );
    }

    let mut g_query = predict_offsets_backward(cache.offset_head.as_ref(), params, &g_offsets, &mut grads)?;
    g_query.add_assign(&predict_weights_backward(&cache.weight_head, &cache.weights, params, &g_weights, &mut grads)?);
    let (g_lidar_rows, g_samples) = enhance_query_backward(&cache.query, params, &g_query, &mut grads)?;

    let mut g_lidar = Tensor::zeros(&[cache.n_points, c]);
    for (i, &(n, _)) in cache.pairs.iter().enumerate() {
        for (o, g) in g_lidar.row_mut(n).iter_mut().zip(g_lidar_rows.row(i)) {
            *o += g;
        }
    }
    for (l, gs) in g_samples.iter().enumerate() {
        for i in 0..n_pairs {
            let k = cache.pairs[i].1;
            bilinear_sample_backward(&cache.unified.maps[k][l], cache.p_ref[i], gs.row(i), Some(&mut g_maps[k][l]));
        }
    }

    let (pyramids, g_unified) = unify_channels_backward(&cache.raw_levels, params, &cache.unify, &g_maps, &g_lidar, &mut grads)?;
    let mut features = g_in;
    features.add_assign(&g_unified);
    Ok(DcaGrads {
        features,
        pyramids,
        params: grads,
    })
}

/// Stateful wrapper holding the parameters and the cache of the most recent
/// forward pass.
#[derive(Debug, Clone)]
pub struct DcaModule {
    pub params: DcaParams,
    cache: Option<DcaCache>,
}

impl DcaModule {
    pub fn new(params: DcaParams) -> Self {
        DcaModule { params, cache: None }
    }

    pub fn cache(&self) -> Option<&DcaCache> {
        self.cache.as_ref()
    }

    pub fn forward(&mut self, inputs: &DcaInputs<'_>) -> Result<DcaOutput> {
        let (out, cache) = dca_forward(inputs, &self.params)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Consumes the cache; a second call without a new forward is an error.
    pub fn backward(&mut self, grad_fused: &Tensor) -> Result<DcaGrads> {
        let cache = self.cache.take().ok_or(Error::State("backward called before forward"))?;
        dca_backward(&cache, &self.params, grad_fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dca::params::{DcaHyper, OffsetInit};
    use crate::diffcore::gradcheck::{check_params_grad, check_tensor_grad, GradCheckConfig};
    use crate::diffcore::{bilinear_sample, Params};
    use crate::geometry::Camera;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    /// Forward-looking camera at the origin, optical axis +z.
    fn rig(n: usize) -> CameraRig {
        let cams = (0..n)
            .map(|k| {
                Camera::pinhole(
                    32.0,
                    (32.0, 32.0),
                    Rotation3::identity(),
                    Vector3::new(0.1 * k as f64, 0.0, 0.0),
                    64,
                    64,
                )
            })
            .collect();
        CameraRig::new(cams).unwrap()
    }

    fn pyramids(rng: &mut ChaCha8Rng, k: usize, widths: &[usize]) -> Vec<FeaturePyramid> {
        (0..k)
            .map(|_| {
                FeaturePyramid::new(widths.iter().enumerate().map(|(l, &w)| random(rng, &[16 >> l, 16 >> l, w])).collect())
                    .unwrap()
            })
            .collect()
    }

    fn points(rng: &mut ChaCha8Rng, n: usize, c: usize) -> PointFeatureSet {
        let mut coords = Tensor::zeros(&[n, 3]);
        for r in 0..n {
            let row = coords.row_mut(r);
            row[0] = rng.random_range(-0.6..0.6);
            row[1] = rng.random_range(-0.6..0.6);
            row[2] = rng.random_range(1.5..3.0);
        }
        PointFeatureSet::new(random(rng, &[n, c]), coords).unwrap()
    }

    fn small_hyper(c: usize) -> DcaHyper {
        DcaHyper {
            levels: 2,
            directions: 2,
            points_per_direction: 2,
            head_hidden: 6,
            ffn_hidden: 6,
            ..DcaHyper::standard(c)
        }
    }

    /// Give the zero-initialized final head layers some weight so every
    /// parameter receives a nontrivial gradient.
    fn perturb_heads(p: &mut DcaParams, rng: &mut ChaCha8Rng) {
        for (_, t) in p.offset_head.last_mut().named_mut("").into_iter().chain(p.weight_head.last_mut().named_mut("")) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
    }

    fn loss(out: &DcaOutput, probe: &Tensor) -> f64 {
        out.fused.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::end_to_end();
        let mut checked = 0;
        for seed in 0..40 {
            if checked == 20 {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 3;
            let mut params = DcaParams::init(small_hyper(c), &[2, 3], (64, 64), &mut rng).unwrap();
            perturb_heads(&mut params, &mut rng);
            // a zero-bias lidar MLP can collapse a point to a constant row,
            // where LayerNorm is too curved for finite differences
            for (j, v) in params.lidar_mlp.layers[1].bias.data_mut().iter_mut().enumerate() {
                *v = j as f64 - 1.0 + rng.random_range(-0.1..0.1);
            }
            let pts = points(&mut rng, 3, c);
            let pyr = pyramids(&mut rng, 2, &[2, 3]);
            let rig = rig(2);
            let probe = random(&mut rng, &[3, c]);
            let run = |p: &DcaParams, pts: &PointFeatureSet, pyr: &[FeaturePyramid]| {
                let inputs = DcaInputs::new(pts, pyr, &rig).unwrap();
                loss(&dca_forward(&inputs, p).unwrap().0, &probe)
            };
            let inputs = DcaInputs::new(&pts, &pyr, &rig).unwrap();
            let (_, cache) = dca_forward(&inputs, &params).unwrap();
            // a ReLU sitting on its kink makes the difference quotient meaningless
            if cache.relu_margin() < 1e-3 {
                continue;
            }
            checked += 1;
            let g = dca_backward(&cache, &params, &probe).unwrap();
            for (name, o) in check_params_grad(&params, &g.params, &mut |p| run(p, &pts, &pyr), &cfg) {
                assert!(o.passed, "seed {seed} {name}: {o:?}");
            }
            let o = check_tensor_grad(
                &mut |t| {
                    let mut q = pts.clone();
                    q.features = t.clone();
                    run(&params, &q, &pyr)
                },
                &pts.features,
                &g.features,
                &cfg,
            );
            assert!(o.passed, "seed {seed} features: {o:?}");
            for k in 0..2 {
                for l in 0..2 {
                    let o = check_tensor_grad(
                        &mut |t| {
                            let mut q = pyr.clone();
                            q[k].levels[l] = t.clone();
                            run(&params, &pts, &q)
                        },
                        &pyr[k].levels[l],
                        &g.pyramids[k][l],
                        &cfg,
                    );
                    assert!(o.passed, "seed {seed} map {k}/{l}: {o:?}");
                }
            }
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn output_shapes_and_weight_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let mut params = DcaParams::init(DcaHyper::standard(c), &[3, 4, 5, 6], (64, 64), &mut rng).unwrap();
        perturb_heads(&mut params, &mut rng);
        let pts = points(&mut rng, 10, c);
        let pyr = pyramids(&mut rng, 2, &[3, 4, 5, 6]);
        let inputs = DcaInputs::new(&pts, &pyr, &rig(2)).unwrap();
        let (out, _) = dca_forward(&inputs, &params).unwrap();
        assert_eq!(out.fused.shape(), &[10, c]);
        assert_eq!(out.field.offsets.shape()[1..], [128, 2]);
        for i in 0..out.field.pairs.len() {
            let s: f64 = out.field.weights_of(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.field.weights_of(i).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn points_outside_every_view_pass_through_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 3;
        let params = DcaParams::init(small_hyper(c), &[3, 3], (64, 64), &mut rng).unwrap();
        let mut pts = points(&mut rng, 4, c);
        // behind the camera
        pts.coords.row_mut(2)[2] = -2.0;
        let pyr = pyramids(&mut rng, 2, &[3, 3]);
        let inputs = DcaInputs::new(&pts, &pyr, &rig(2)).unwrap();
        let (out, cache) = dca_forward(&inputs, &params).unwrap();
        assert!(out.image_value.row(2).iter().all(|&v| v == 0.0));
        assert!(out.field.pairs.iter().all(|&(n, _)| n != 2));
        let (alone, _) = ffn_forward(&pts.select(&[2]).features, &params.ffn).unwrap();
        assert_eq!(alone.row(0), out.fused.row(2));

        // the invisible point's gradient reaches only its own feature path
        let mut probe = Tensor::zeros(&[4, c]);
        probe.row_mut(2).fill(1.0);
        let g = dca_backward(&cache, &params, &probe).unwrap();
        assert!(g.pyramids.iter().flatten().all(|t| t.max_abs() == 0.0));
        assert!(g.params.offset_head.tensors().iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn invalid_reference_coordinates_are_never_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3;
        let mut params = DcaParams::init(small_hyper(c), &[3, 3], (64, 64), &mut rng).unwrap();
        perturb_heads(&mut params, &mut rng);
        let mut pts = points(&mut rng, 6, c);
        pts.coords.row_mut(0)[0] = 50.0;
        pts.coords.row_mut(1)[2] = -1.0;
        let pyr = pyramids(&mut rng, 3, &[3, 3]);
        let rig = rig(3);
        let clean = DcaInputs::new(&pts, &pyr, &rig).unwrap();
        let mut refs = clean.refs.clone();
        refs.poison_invalid(f64::NAN);
        let poisoned = DcaInputs::with_refs(&pts, &pyr, refs).unwrap();
        let (a, ca) = dca_forward(&clean, &params).unwrap();
        let (b, cb) = dca_forward(&poisoned, &params).unwrap();
        assert_eq!(a.fused, b.fused);
        assert!(b.fused.is_finite());
        let probe = random(&mut rng, &[6, c]);
        let ga = dca_backward(&ca, &params, &probe).unwrap();
        let gb = dca_backward(&cb, &params, &probe).unwrap();
        assert_eq!(ga.features, gb.features);
    }

    #[test]
    fn permuting_points_permutes_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 4;
        let mut params = DcaParams::init(small_hyper(c), &[4, 4], (64, 64), &mut rng).unwrap();
        perturb_heads(&mut params, &mut rng);
        let pts = points(&mut rng, 7, c);
        let pyr = pyramids(&mut rng, 2, &[4, 4]);
        let rig = rig(2);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let shuffled = pts.select(&perm);
        let (a, _) = dca_forward(&DcaInputs::new(&pts, &pyr, &rig).unwrap(), &params).unwrap();
        let (b, _) = dca_forward(&DcaInputs::new(&shuffled, &pyr, &rig).unwrap(), &params).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            for (x, y) in b.fused.row(r).iter().zip(a.fused.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicating_a_camera_does_not_change_the_view_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 3;
        let mut params = DcaParams::init(small_hyper(c), &[3, 3], (64, 64), &mut rng).unwrap();
        perturb_heads(&mut params, &mut rng);
        let pts = points(&mut rng, 5, c);
        let pyr = pyramids(&mut rng, 1, &[3, 3]);
        let one = rig(1);
        let two = CameraRig::new(vec![one.cameras[0].clone(), one.cameras[0].clone()]).unwrap();
        let pyr2 = vec![pyr[0].clone(), pyr[0].clone()];
        let (a, _) = dca_forward(&DcaInputs::new(&pts, &pyr, &one).unwrap(), &params).unwrap();
        let (b, _) = dca_forward(&DcaInputs::new(&pts, &pyr2, &two).unwrap(), &params).unwrap();
        assert!(a.fused.max_abs_diff(&b.fused) < 1e-12);
    }

    #[test]
    fn single_zero_offset_reads_the_reference_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = 4;
        let params = DcaParams::init(DcaHyper::single(c), &[c], (64, 64), &mut rng)
            .unwrap()
            .with_identity_unifiers()
            .unwrap();
        let pts = points(&mut rng, 6, c);
        let pyr = pyramids(&mut rng, 2, &[c]);
        let inputs = DcaInputs::new(&pts, &pyr, &rig(2)).unwrap();
        let (out, _) = dca_forward(&inputs, &params).unwrap();
        for n in 0..6 {
            let valid: Vec<usize> = (0..2).filter(|&k| inputs.refs.is_valid(k, n)).collect();
            let mut expect = vec![0.0; c];
            for &k in &valid {
                for (e, v) in expect.iter_mut().zip(bilinear_sample(&pyr[k].levels[0], inputs.refs.coord(k, n))) {
                    *e += v / valid.len() as f64;
                }
            }
            for (a, b) in out.image_value.row(n).iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn directional_init_spreads_samples_around_the_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let hyper = DcaHyper {
            offset_init: OffsetInit::Directional,
            ..DcaHyper::standard(4)
        };
        let params = DcaParams::init(hyper, &[4; 4], (64, 64), &mut rng).unwrap();
        let pts = points(&mut rng, 3, 4);
        let pyr = pyramids(&mut rng, 1, &[4; 4]);
        let (out, _) = dca_forward(&DcaInputs::new(&pts, &pyr, &rig(1)).unwrap(), &params).unwrap();
        let offs = out.field.offsets_of(0);
        // level 0, direction 0 (theta = 0), innermost point: one stride to the right
        assert!((offs[0] - 4.0 / 64.0).abs() < 1e-15 && offs[1].abs() < 1e-15);
        let mean_u: f64 = offs.chunks(2).map(|o| o[0]).sum::<f64>() / 128.0;
        assert!(mean_u.abs() < 1e-12);
    }

    #[test]
    fn module_requires_forward_before_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = DcaParams::init(small_hyper(3), &[3, 3], (64, 64), &mut rng).unwrap();
        let mut m = DcaModule::new(params);
        let probe = Tensor::zeros(&[2, 3]);
        assert!(matches!(m.backward(&probe), Err(Error::State(_))));
        let pts = points(&mut rng, 2, 3);
        let pyr = pyramids(&mut rng, 1, &[3, 3]);
        m.forward(&DcaInputs::new(&pts, &pyr, &rig(1)).unwrap()).unwrap();
        assert!(m.backward(&probe).is_ok());
        assert!(matches!(m.backward(&probe), Err(Error::State(_))));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts = points(&mut rng, 2, 3);
        let pyr = pyramids(&mut rng, 1, &[3, 3]);
        assert!(matches!(DcaInputs::new(&pts, &pyr, &rig(2)), Err(Error::Dimension { .. })));
        let bad = vec![FeaturePyramid::new(vec![Tensor::zeros(&[8, 8, 3])]).unwrap()];
        assert!(matches!(DcaInputs::new(&pts, &bad, &rig(1)), Err(Error::Dimension { .. })));
    }
}
