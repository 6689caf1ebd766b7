//! Property measurements shared by the integration tests and the acceptance
//! harness. Each returns the measured quantity so callers pick the tolerance.

#![allow(dead_code)]

use dcafuse::baseline::sample_reference_pixels;
use dcafuse::dca::{dca_forward, predict_weights, DcaHyper, DcaInputs, DcaParams, PointFeatureSet};
use dcafuse::geometry::{project, Camera, CameraRig, ReferencePointSet, STRIDES};
use dcafuse::rng::{split_seed, stream};
use dcafuse::synthscene::{generate_scene, LabeledScene, SceneConfig};
use dcafuse::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Small scenes that still exercise every camera and pyramid level.
pub fn small_scene(seed: u64) -> LabeledScene {
    generate_scene(&SceneConfig {
        seed,
        n_points: 48,
        image_px: 128,
        max_range_m: 6.0,
        ..SceneConfig::default()
    })
    .expect("small scene generates")
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

pub struct WeightStats {
    pub queries: usize,
    pub max_sum_error: f64,
    pub min_weight: f64,
}

/// Attention weights for `n_queries` random queries through a weight head
/// with large random final weights, so the logits span a wide range.
pub fn weight_normalization(n_queries: usize, seed: u64) -> WeightStats {
    let mut rng = stream(seed, "normalization");
    let c = 8;
    let mut params = DcaParams::init(DcaHyper::standard(c), &[c; 4], (256, 256), &mut rng).unwrap();
    let last = params.weight_head.last_mut();
    let shape = last.weight.shape().to_vec();
    last.weight = normal_tensor(&mut rng, &shape, 2.0);
    let query = normal_tensor(&mut rng, &[n_queries, params.hyper.query_width()], 3.0);
    let (w, _) = predict_weights(&query, &params).unwrap();
    let mut stats = WeightStats {
        queries: n_queries,
        max_sum_error: 0.0,
        min_weight: f64::INFINITY,
    };
    for i in 0..w.rows() {
        let row = w.row(i);
        stats.max_sum_error = stats.max_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
        stats.min_weight = stats.min_weight.min(row.iter().copied().fold(f64::INFINITY, f64::min));
    }
    stats
}

/// Largest relative difference, over every point of `n_scenes` scenes,
/// between the single zero-offset operator's image value and the one-to-one
/// baseline's sampled image half.
pub fn degeneracy_error(n_scenes: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..n_scenes {
        let scene = small_scene(split_seed(seed, &format!("degeneracy/{j}")));
        let c = scene.pyramids[0].levels[0].shape()[2];
        let mut rng = stream(seed, &format!("degeneracy/params/{j}"));
        let params = DcaParams::init(DcaHyper::single(c), &[c], (scene.config.image_px, scene.config.image_px), &mut rng)
            .unwrap()
            .with_identity_unifiers()
            .unwrap();
        let features = normal_tensor(&mut rng, &[scene.points.len(), c], 1.0);
        let points = PointFeatureSet::new(features, scene.points.coords.clone()).unwrap();
        let inputs = DcaInputs::new(&points, &scene.pyramids, &scene.rig).unwrap();
        let (out, _) = dca_forward(&inputs, &params).unwrap();
        let baseline = sample_reference_pixels(&scene.pyramids, &inputs.refs, 0).unwrap();
        for n in 0..points.len() {
            let (a, b) = (out.image_value.row(n), baseline.row(n));
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            worst = worst.max(if norm > 0.0 { diff / norm } else { diff });
        }
    }
    worst
}

fn scaled(rig: &CameraRig, s: f64) -> CameraRig {
    let cameras = rig
        .cameras
        .iter()
        .map(|cam| {
            let mut m = cam.matrix();
            for r in 0..2 {
                for c in 0..4 {
                    m[(r, c)] *= s;
                }
            }
            let w = (cam.width_px as f64 * s).round() as u32;
            let h = (cam.height_px as f64 * s).round() as u32;
            Camera::from_matrix(&m, w, h)
        })
        .collect();
    CameraRig { cameras }
}

fn coord_gap(a: &ReferencePointSet, b: &ReferencePointSet) -> f64 {
    let mut gap: f64 = 0.0;
    for k in 0..a.n_cameras() {
        for n in 0..a.n_points() {
            if a.is_valid(k, n) != b.is_valid(k, n) {
                return f64::INFINITY;
            }
            if a.is_valid(k, n) {
                let (p, q) = (a.coord(k, n), b.coord(k, n));
                gap = gap.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
            }
        }
    }
    gap
}

pub struct ScaleStats {
    /// Projecting with each level's own intrinsics and size.
    pub across_strides: f64,
    /// Doubling image size and intrinsics together.
    pub rescaled: f64,
}

/// Normalized reference coordinates compared across pyramid strides and
/// under a common x2 rescale, as the largest absolute difference.
pub fn scale_invariance(n_scenes: usize, seed: u64) -> ScaleStats {
    let mut stats = ScaleStats {
        across_strides: 0.0,
        rescaled: 0.0,
    };
    for j in 0..n_scenes {
        let scene = small_scene(split_seed(seed, &format!("scale/{j}")));
        let coords = &scene.points.coords;
        let base = project(&scene.rig, coords).unwrap();
        for s in STRIDES {
            let level = project(&scaled(&scene.rig, 1.0 / s as f64), coords).unwrap();
            stats.across_strides = stats.across_strides.max(coord_gap(&base, &level));
        }
        let twice = project(&scaled(&scene.rig, 2.0), coords).unwrap();
        stats.rescaled = stats.rescaled.max(coord_gap(&base, &twice));
    }
    stats
}
