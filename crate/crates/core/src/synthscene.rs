//! Procedural multi-view scenes.
//!
//! A ring of cameras looks down at a ground plane. A latent class field
//! tiles space as jittered 3D Voronoi cells with one class per cell; each
//! cell's interior, shrunk away from its faces by a margin, is an "object"
//! and the margin is background (blank by default, optionally tiled with
//! random-class clutter). LiDAR points lie on objects and carry only
//! geometric features, so the class is recoverable solely by reading the
//! images at the right place.
//!
//! The stored rig can carry a constant yaw error relative to the pose the
//! images were rendered from. The default of 2 degrees stands in for the
//! residual misalignment of real sensor suites, which is what makes learned
//! sampling offsets worth having even without injected disturbance.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dca::{FeaturePyramid, PointFeatureSet};
use crate::diffcore::bilinear_sample;
use crate::error::{Error, Result};
use crate::geometry::{project, Camera, CameraRig, STRIDES};
use crate::rng::stream;
use crate::tensor::{load_named, save_named, Tensor, TensorEntry};

/// Smooth nuisance channels appended after the class channels.
pub const DISTRACTOR_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_points: usize,
    pub n_classes: usize,
    pub n_cameras: usize,
    pub image_px: u32,
    /// Meters per Voronoi cell.
    pub texture_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Width of the point feature vector.
    pub lidar_channels: usize,
    /// Ground beyond this horizontal distance from the rig is not rendered
    /// and holds no points.
    pub max_range_m: f64,
    /// Background band between neighboring objects, as a fraction of
    /// `texture_scale`.
    pub gap_fraction: f64,
    /// The background band is tiled with square clutter cells of this size
    /// (fraction of `texture_scale`), each painted with a random class
    /// color. Zero leaves the background blank.
    pub clutter_fraction: f64,
    /// Yaw error, in degrees, shared by every camera's recorded extrinsics.
    /// Images are rendered from the true pose, so the stored rig is
    /// systematically misaligned with them by this much.
    pub calibration_bias_deg: f64,
}

fn default_lidar_channels() -> usize {
    8
}

fn default_max_range() -> f64 {
    12.0
}

fn default_gap() -> f64 {
    0.6
}

fn default_clutter() -> f64 {
    0.0
}

fn default_bias() -> f64 {
    2.0
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_points: 256,
            n_classes: 4,
            n_cameras: 4,
            image_px: 256,
            texture_scale: 1.5,
            noise_std: 0.05,
            seed: 0,
            lidar_channels: default_lidar_channels(),
            max_range_m: default_max_range(),
            gap_fraction: default_gap(),
            clutter_fraction: default_clutter(),
            calibration_bias_deg: default_bias(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("scene.n_points", self.n_points),
            ("scene.n_classes", self.n_classes),
            ("scene.n_cameras", self.n_cameras),
            ("scene.lidar_channels", self.lidar_channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.image_px == 0 || !self.image_px.is_multiple_of(32) {
            return Err(Error::config("scene.image_px", format!("must be a positive multiple of 32, got {}", self.image_px)));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return Err(Error::config("scene.texture_scale", "must be finite and > 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("scene.noise_std", "must be finite and >= 0"));
        }
        if !(self.max_range_m > MIN_RANGE_M && self.max_range_m.is_finite()) {
            return Err(Error::config("scene.max_range_m", format!("must be finite and > {MIN_RANGE_M}")));
        }
        if !(0.0..0.9).contains(&self.gap_fraction) {
            return Err(Error::config("scene.gap_fraction", "must lie in [0, 0.9)"));
        }
        if !(self.clutter_fraction == 0.0 || (0.01..=1.0).contains(&self.clutter_fraction)) {
            return Err(Error::config("scene.clutter_fraction", "must be 0 or lie in [0.01, 1]"));
        }
        if self.calibration_bias_deg.is_nan() || self.calibration_bias_deg.abs() > 10.0 {
            return Err(Error::config("scene.calibration_bias_deg", "must lie in [-10, 10]"));
        }
        Ok(())
    }

    /// Channels of pyramid level 0: one per class plus the distractors.
    pub fn image_channels(&self) -> usize {
        self.n_classes + DISTRACTOR_CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub config: SceneConfig,
    pub points: PointFeatureSet,
    pub labels: Vec<usize>,
    pub rig: CameraRig,
    pub pyramids: Vec<FeaturePyramid>,
}

const CAMERA_HEIGHT_M: f64 = 1.8;
const CAMERA_PITCH_DEG: f64 = 35.0;
const MIN_RANGE_M: f64 = 1.0;
/// Half-extent of the z layers of Voronoi sites around the ground plane, in
/// cells. Two layers on each side keep the nearest site inside the table.
const Z_LAYERS: i64 = 2;

/// Jittered-grid Voronoi sites with one class per site, and the clutter
/// grid painted on the background.
struct ClassField {
    scale: f64,
    gap: f64,
    min_cell: i64,
    span: i64,
    sites: Vec<Vector3<f64>>,
    classes: Vec<usize>,
    clutter_cell: f64,
    clutter_reach: i64,
    clutter: Vec<usize>,
}

impl ClassField {
    fn new(cfg: &SceneConfig, rng: &mut impl Rng) -> Self {
        let scale = cfg.texture_scale;
        let reach = (cfg.max_range_m / scale).ceil() as i64 + 3;
        let min_cell = -reach;
        let span = 2 * reach + 1;
        let layers = 2 * Z_LAYERS;
        let mut sites = Vec::with_capacity((span * span * layers) as usize);
        let mut classes = Vec::with_capacity(sites.capacity());
        for iz in -Z_LAYERS..Z_LAYERS {
            for iy in 0..span {
                for ix in 0..span {
                    let j: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                    sites.push(Vector3::new(
                        ((min_cell + ix) as f64 + j[0]) * scale,
                        ((min_cell + iy) as f64 + j[1]) * scale,
                        (iz as f64 + j[2]) * scale,
                    ));
                    classes.push(rng.random_range(0..cfg.n_classes));
                }
            }
        }
        let clutter_cell = cfg.clutter_fraction * scale;
        let (clutter_reach, clutter) = if clutter_cell > 0.0 {
            let reach = (cfg.max_range_m / clutter_cell).ceil() as i64 + 1;
            let side = (2 * reach) as usize;
            (reach, (0..side * side).map(|_| rng.random_range(0..cfg.n_classes)).collect())
        } else {
            (0, Vec::new())
        };
        ClassField {
            scale,
            gap: cfg.gap_fraction * scale,
            min_cell,
            span,
            sites,
            classes,
            clutter_cell,
            clutter_reach,
            clutter,
        }
    }

    /// Rendered color class at ground point `p`: the object class, the
    /// clutter class on background, or `None` for blank background.
    fn color_at(&self, p: &Vector3<f64>) -> Option<usize> {
        if let Some(c) = self.object_at(p) {
            return Some(c);
        }
        if self.clutter.is_empty() {
            return None;
        }
        let side = 2 * self.clutter_reach;
        let ix = (p.x / self.clutter_cell).floor() as i64 + self.clutter_reach;
        let iy = (p.y / self.clutter_cell).floor() as i64 + self.clutter_reach;
        ((0..side).contains(&ix) && (0..side).contains(&iy)).then(|| self.clutter[(iy * side + ix) as usize])
    }

    fn site_index(&self, ix: i64, iy: i64, iz: i64) -> Option<usize> {
        let (x, y, z) = (ix - self.min_cell, iy - self.min_cell, iz + Z_LAYERS);
        if x < 0 || y < 0 || x >= self.span || y >= self.span || !(0..2 * Z_LAYERS).contains(&z) {
            return None;
        }
        Some(((z * self.span + y) * self.span + x) as usize)
    }

    /// Class of the object containing `p`, or `None` on background.
    fn object_at(&self, p: &Vector3<f64>) -> Option<usize> {
        let cx = (p.x / self.scale).floor() as i64;
        let cy = (p.y / self.scale).floor() as i64;
        let cz = (p.z / self.scale).floor() as i64;
        let mut near: Vec<usize> = Vec::with_capacity(100);
        for iz in cz - 2..=cz + 2 {
            for iy in cy - 2..=cy + 2 {
                for ix in cx - 2..=cx + 2 {
                    if let Some(i) = self.site_index(ix, iy, iz) {
                        near.push(i);
                    }
                }
            }
        }
        let best = *near
            .iter()
            .min_by(|&&a, &&b| (self.sites[a] - p).norm_squared().total_cmp(&(self.sites[b] - p).norm_squared()))?;
        let s1 = self.sites[best];
        let d1 = (s1 - p).norm_squared();
        // distance from p to the bisector plane with every other site
        let margin = near
            .iter()
            .filter(|&&i| i != best)
            .map(|&i| ((self.sites[i] - p).norm_squared() - d1) / (2.0 * (self.sites[i] - s1).norm()))
            .fold(f64::INFINITY, f64::min);
        (margin >= 0.5 * self.gap).then_some(self.classes[best])
    }
}

struct RigGeometry {
    camera: Camera,
    k_inv: Matrix3<f64>,
    cam_to_world: Matrix3<f64>,
    center: Vector3<f64>,
}

fn build_rig(cfg: &SceneConfig, yaw_bias_deg: f64) -> Vec<RigGeometry> {
    let px = cfg.image_px as f64;
    // 90 degree horizontal field of view
    let focal = px / 2.0;
    let k = Matrix3::new(focal, 0.0, px / 2.0, 0.0, focal, px / 2.0, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().expect("pinhole intrinsics are invertible");
    let pitch = CAMERA_PITCH_DEG.to_radians();
    (0..cfg.n_cameras)
        .map(|i| {
            let yaw = std::f64::consts::TAU * i as f64 / cfg.n_cameras as f64 + yaw_bias_deg.to_radians();
            let forward = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
            let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
            let down = forward.cross(&right);
            let world_to_cam = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
            let rot = Rotation3::from_matrix_unchecked(world_to_cam);
            let center = Vector3::new(0.0, 0.0, CAMERA_HEIGHT_M);
            let camera = Camera::pinhole(focal, (px / 2.0, px / 2.0), rot, -(world_to_cam * center), cfg.image_px, cfg.image_px);
            RigGeometry {
                camera,
                k_inv,
                cam_to_world: world_to_cam.transpose(),
                center,
            }
        })
        .collect()
}

/// Ground point seen through full-resolution pixel coordinate `(u, v)`, if
/// the ray hits the ground within range.
fn ground_hit(g: &RigGeometry, u: f64, v: f64, max_range: f64) -> Option<Vector3<f64>> {
    let dir = g.cam_to_world * (g.k_inv * Vector3::new(u, v, 1.0));
    if dir.z >= -1e-9 {
        return None;
    }
    let t = -g.center.z / dir.z;
    let hit = g.center + dir * t;
    (hit.xy().norm() <= max_range).then_some(hit)
}

/// Noise-free color channels at stride 4, `H0 x W0 x n_classes`. Each cell
/// averages the 4x4 full-resolution pixels it covers.
fn render_classes(g: &RigGeometry, field: &ClassField, cfg: &SceneConfig) -> Tensor {
    let stride = STRIDES[0] as usize;
    let side = cfg.image_px as usize / stride;
    let nc = cfg.n_classes;
    let mut map = Tensor::zeros(&[side, side, nc]);
    let inv = 1.0 / (stride * stride) as f64;
    let data = map.data_mut();
    for r in 0..side {
        for c in 0..side {
            let cell = &mut data[(r * side + c) * nc..(r * side + c + 1) * nc];
            for sy in 0..stride {
                for sx in 0..stride {
                    let u = (c * stride + sx) as f64 + 0.5;
                    let v = (r * stride + sy) as f64 + 0.5;
                    if let Some(class) = ground_hit(g, u, v, cfg.max_range_m).and_then(|p| field.color_at(&p)) {
                        cell[class] += inv;
                    }
                }
            }
        }
    }
    map
}

/// Low-frequency sinusoid mixtures, one per distractor channel.
fn distractors(side: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..DISTRACTOR_CHANNELS)
        .map(|_| {
            let waves: Vec<[f64; 4]> = (0..3)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let cycles = rng.random_range(0.5..2.0);
                    let k = std::f64::consts::TAU * cycles / side as f64;
                    [k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.1..0.3)]
                })
                .collect();
            (0..side * side)
                .map(|i| {
                    let (r, c) = ((i / side) as f64, (i % side) as f64);
                    waves.iter().map(|w| w[3] * (w[0] * c + w[1] * r + w[2]).sin()).sum()
                })
                .collect()
        })
        .collect()
}

/// Geometric point features: position, range and bearing harmonics, padded
/// with zeros or truncated to `channels`, plus Gaussian noise.
fn lidar_features(p: &Vector3<f64>, max_range: f64, channels: usize, noise: &Normal<f64>, rng: &mut impl Rng) -> Vec<f64> {
    let range = p.xy().norm();
    let az = p.y.atan2(p.x);
    let base = [
        p.x / max_range,
        p.y / max_range,
        range / max_range,
        az.sin(),
        az.cos(),
        (2.0 * az).sin(),
        (2.0 * az).cos(),
        p.z,
    ];
    (0..channels)
        .map(|i| base.get(i).copied().unwrap_or(0.0) + noise.sample(rng))
        .collect()
}

/// 2x2 mean pooling of `level0` three times, giving strides 4, 8, 16, 32.
pub fn pool_pyramid(level0: &Tensor) -> Result<FeaturePyramid> {
    let s = level0.shape();
    if s.len() != 3 || !s[0].is_multiple_of(8) || !s[1].is_multiple_of(8) || s[0] == 0 || s[1] == 0 {
        return Err(Error::dim("pool_pyramid", "H x W x C with H, W positive multiples of 8", format!("{s:?}")));
    }
    let mut levels = vec![level0.clone()];
    for _ in 1..STRIDES.len() {
        let prev = levels.last().expect("at least level 0");
        let (h, w, c) = (prev.shape()[0] / 2, prev.shape()[1] / 2, prev.shape()[2]);
        let src = prev.data();
        let pw = 2 * w;
        let mut out = Tensor::zeros(&[h, w, c]);
        let dst = out.data_mut();
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let at = |rr: usize, cc: usize| src[(rr * pw + cc) * c + ch];
                    dst[(r * w + col) * c + ch] =
                        0.25 * (at(2 * r, 2 * col) + at(2 * r, 2 * col + 1) + at(2 * r + 1, 2 * col) + at(2 * r + 1, 2 * col + 1));
                }
            }
        }
        levels.push(out);
    }
    FeaturePyramid::new(levels)
}

/// Sampled class channels at `uv` pick out `label` unambiguously.
fn readable(clean: &Tensor, uv: [f64; 2], label: usize) -> bool {
    let v = bilinear_sample(clean, uv);
    v[label] >= 0.5 && v.iter().enumerate().all(|(i, &x)| i == label || x < v[label])
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<LabeledScene> {
    cfg.validate()?;
    let mut field_rng = stream(cfg.seed, "scene/field");
    let field = ClassField::new(cfg, &mut field_rng);
    let geoms = build_rig(cfg, 0.0);
    let true_rig = CameraRig::new(geoms.iter().map(|g| g.camera.clone()).collect())?;
    let rig = CameraRig::new(build_rig(cfg, cfg.calibration_bias_deg).into_iter().map(|g| g.camera).collect())?;
    let clean: Vec<Tensor> = geoms.iter().map(|g| render_classes(g, &field, cfg)).collect();

    let mut point_rng = stream(cfg.seed, "scene/points");
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("scene.noise_std", e.to_string()))?;
    let max_attempts = 400 * cfg.n_points;
    let (r0, r1) = (MIN_RANGE_M, cfg.max_range_m);
    let mut coords = Vec::with_capacity(cfg.n_points * 3);
    let mut labels = Vec::with_capacity(cfg.n_points);
    let mut attempts = 0;
    while labels.len() < cfg.n_points {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation {
                attempts: max_attempts,
                reason: format!("only {} of {} points landed on visible, readable objects", labels.len(), cfg.n_points),
            });
        }
        // uniform over the annulus area
        let r = (r0 * r0 + point_rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
        let phi = point_rng.random_range(0.0..std::f64::consts::TAU);
        let p = Vector3::new(r * phi.cos(), r * phi.sin(), 0.0);
        let Some(label) = field.object_at(&p) else {
            continue;
        };
        let point = Tensor::new(vec![1, 3], vec![p.x, p.y, p.z])?;
        let refs = project(&true_rig, &point)?;
        let views: Vec<usize> = (0..true_rig.len()).filter(|&k| refs.is_valid(k, 0)).collect();
        if views.is_empty() || !views.iter().all(|&k| readable(&clean[k], refs.coord(k, 0), label)) {
            continue;
        }
        // the recorded rig must still see the point somewhere
        if project(&rig, &point)?.valid_views(0) == 0 {
            continue;
        }
        coords.extend_from_slice(&[p.x, p.y, p.z]);
        labels.push(label);
    }

    let mut feat_rng = stream(cfg.seed, "scene/lidar");
    let mut features = Vec::with_capacity(cfg.n_points * cfg.lidar_channels);
    for p in coords.chunks_exact(3) {
        features.extend(lidar_features(&Vector3::new(p[0], p[1], p[2]), cfg.max_range_m, cfg.lidar_channels, &noise, &mut feat_rng));
    }
    let points = PointFeatureSet::new(
        Tensor::new(vec![cfg.n_points, cfg.lidar_channels], features)?,
        Tensor::new(vec![cfg.n_points, 3], coords)?,
    )?;

    let side = cfg.image_px as usize / STRIDES[0] as usize;
    let ch = cfg.image_channels();
    let mut image_rng = stream(cfg.seed, "scene/images");
    let mut pyramids = Vec::with_capacity(rig.len());
    for class_map in &clean {
        let extra = distractors(side, &mut image_rng);
        let mut level0 = Tensor::zeros(&[side, side, ch]);
        for (i, px) in level0.data_mut().chunks_exact_mut(ch).enumerate() {
            px[..cfg.n_classes].copy_from_slice(&class_map.data()[i * cfg.n_classes..(i + 1) * cfg.n_classes]);
            for (d, e) in extra.iter().enumerate() {
                px[cfg.n_classes + d] = e[i];
            }
            for v in px.iter_mut() {
                *v += noise.sample(&mut image_rng);
            }
        }
        pyramids.push(pool_pyramid(&level0)?);
    }

    Ok(LabeledScene {
        config: cfg.clone(),
        points,
        labels,
        rig,
        pyramids,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    config: SceneConfig,
    rig: String,
    tensors: Vec<TensorEntry>,
}

impl LabeledScene {
    /// Write `rig.json`, one tensor file per array and `manifest.json` into
    /// `dir`, which must exist.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("rig.json"), self.rig.to_json()?)?;
        let labels = Tensor::new(vec![self.labels.len()], self.labels.iter().map(|&l| l as f64).collect())?;
        let mut named: Vec<(String, &Tensor)> = vec![
            ("features".into(), &self.points.features),
            ("coords".into(), &self.points.coords),
            ("labels".into(), &labels),
        ];
        for (k, pyr) in self.pyramids.iter().enumerate() {
            for (l, map) in pyr.levels.iter().enumerate() {
                named.push((format!("pyramid.{k}.{l}"), map));
            }
        }
        let tensors = save_named(dir, &named)?;
        let manifest = SceneManifest {
            config: self.config.clone(),
            rig: "rig.json".into(),
            tensors,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Inverse of [`LabeledScene::save`]. Values pass through `f32`, so a
    /// loaded scene matches the original to single precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: SceneManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let rig = CameraRig::from_json(&fs::read_to_string(dir.join(&manifest.rig))?)?;
        let fmt = |reason: String| Error::Format {
            path: manifest_path.clone(),
            reason,
        };
        let get = |name: &str| load_named(dir, &manifest_path, &manifest.tensors, name);
        let points = PointFeatureSet::new(get("features")?, get("coords")?)?;
        let labels = get("labels")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < manifest.config.n_classes {
                    Ok(v as usize)
                } else {
                    Err(fmt(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pyramids = Vec::with_capacity(rig.len());
        for k in 0..rig.len() {
            let levels = (0..STRIDES.len()).map(|l| get(&format!("pyramid.{k}.{l}"))).collect::<Result<Vec<_>>>()?;
            pyramids.push(FeaturePyramid::new(levels)?);
        }
        Ok(LabeledScene {
            config: manifest.config,
            points,
            labels,
            rig,
            pyramids,
        })
    }
}
