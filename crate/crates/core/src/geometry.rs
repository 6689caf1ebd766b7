//! Camera calibration, projection of LiDAR points to normalized image
//! coordinates, and randomized extrinsic disturbance.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Points at or behind this depth (meters, homogeneous third coordinate) are
/// never valid.
pub const EPS_DEPTH: f64 = 1e-3;

/// Pyramid strides; image dimensions must be divisible by the largest.
pub const STRIDES: [u32; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major 3x4 operator acting on homogeneous world points (meters)
    /// and producing homogeneous pixel coordinates.
    #[serde(deserialize_with = "proj_from_json")]
    pub proj: [[f64; 4]; 3],
    pub width_px: u32,
    pub height_px: u32,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProjRepr {
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

fn proj_from_json<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[[f64; 4]; 3], D::Error> {
    let flat: Vec<f64> = match ProjRepr::deserialize(d)? {
        ProjRepr::Nested(rows) => rows.concat(),
        ProjRepr::Flat(v) => v,
    };
    if flat.len() != 12 {
        return Err(serde::de::Error::custom(format!(
            "proj must hold 12 numbers, found {}",
            flat.len()
        )));
    }
    let mut out = [[0.0; 4]; 3];
    for (i, v) in flat.into_iter().enumerate() {
        out[i / 4][i % 4] = v;
    }
    Ok(out)
}

impl Camera {
    /// Pinhole camera `K [R | t]` with `R`, `t` mapping world to camera frame
    /// (x right, y down, z forward).
    pub fn pinhole(
        focal_px: f64,
        principal: (f64, f64),
        world_to_cam: Rotation3<f64>,
        translation: Vector3<f64>,
        width_px: u32,
        height_px: u32,
    ) -> Self {
        let k = Matrix3::new(
            focal_px, 0.0, principal.0, //
            0.0, focal_px, principal.1, //
            0.0, 0.0, 1.0,
        );
        let mut ext = Matrix3x4::zeros();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(world_to_cam.matrix());
        ext.set_column(3, &translation);
        Camera::from_matrix(&(k * ext), width_px, height_px)
    }

    pub fn from_matrix(m: &Matrix3x4<f64>, width_px: u32, height_px: u32) -> Self {
        let mut proj = [[0.0; 4]; 3];
        for (r, row) in proj.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        Camera {
            proj,
            width_px,
            height_px,
        }
    }

    pub fn matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::from_fn(|r, c| self.proj[r][c])
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.width_px == 0 || !self.width_px.is_multiple_of(32) {
            return Err(Error::config(
                format!("cameras[{k}].width_px"),
                format!("must be a positive multiple of 32, got {}", self.width_px),
            ));
        }
        if self.height_px == 0 || !self.height_px.is_multiple_of(32) {
            return Err(Error::config(
                format!("cameras[{k}].height_px"),
                format!("must be a positive multiple of 32, got {}", self.height_px),
            ));
        }
        if self.proj.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("cameras[{k}].proj"), "has non-finite entries"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let rig = CameraRig { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::config("cameras", "must contain at least one camera"));
        }
        self.cameras.iter().enumerate().try_for_each(|(k, c)| c.validate(k))
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rig: CameraRig = serde_json::from_str(s)?;
        rig.validate()?;
        Ok(rig)
    }
}

/// Calibration-projected reference points, one entry per (camera, point).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePointSet {
    n_cameras: usize,
    n_points: usize,
    coords: Vec<[f64; 2]>,
    valid: Vec<bool>,
    depth: Vec<f64>,
}

impl ReferencePointSet {
    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn coord(&self, k: usize, n: usize) -> [f64; 2] {
        self.coords[k * self.n_points + n]
    }

    pub fn is_valid(&self, k: usize, n: usize) -> bool {
        self.valid[k * self.n_points + n]
    }

    pub fn depth(&self, k: usize, n: usize) -> f64 {
        self.depth[k * self.n_points + n]
    }

    pub fn valid_views(&self, n: usize) -> usize {
        (0..self.n_cameras).filter(|&k| self.is_valid(k, n)).count()
    }

    /// Overwrite the coordinates of every invalid entry. Downstream code never
    /// reads them, which tests check by poisoning with NaN.
    pub fn poison_invalid(&mut self, value: f64) {
        for (c, &v) in self.coords.iter_mut().zip(&self.valid) {
            if !v {
                *c = [value, value];
            }
        }
    }

    /// Keep only the listed points, in the given order.
    pub fn select(&self, points: &[usize]) -> ReferencePointSet {
        let mut out = ReferencePointSet {
            n_cameras: self.n_cameras,
            n_points: points.len(),
            coords: Vec::with_capacity(self.n_cameras * points.len()),
            valid: Vec::with_capacity(self.n_cameras * points.len()),
            depth: Vec::with_capacity(self.n_cameras * points.len()),
        };
        for k in 0..self.n_cameras {
            for &n in points {
                let i = k * self.n_points + n;
                out.coords.push(self.coords[i]);
                out.valid.push(self.valid[i]);
                out.depth.push(self.depth[i]);
            }
        }
        out
    }
}

/// Append a homogeneous 1 to each row of an `N x 3` tensor.
pub fn to_homogeneous(points: &Tensor) -> Result<Tensor> {
    if points.shape().len() != 2 || points.shape()[1] != 3 {
        return Err(Error::dim("to_homogeneous", "N x 3", format!("{:?}", points.shape())));
    }
    let n = points.rows();
    let mut data = Vec::with_capacity(n * 4);
    for i in 0..n {
        data.extend_from_slice(points.row(i));
        data.push(1.0);
    }
    Tensor::new(vec![n, 4], data)
}

pub fn project(rig: &CameraRig, points: &Tensor) -> Result<ReferencePointSet> {
    let homog = to_homogeneous(points)?;
    let n = homog.rows();
    let k_count = rig.len();
    let mut refs = ReferencePointSet {
        n_cameras: k_count,
        n_points: n,
        coords: vec![[0.0, 0.0]; k_count * n],
        valid: vec![false; k_count * n],
        depth: vec![0.0; k_count * n],
    };
    for (k, cam) in rig.cameras.iter().enumerate() {
        let m = cam.matrix();
        let (w, h) = (cam.width_px as f64, cam.height_px as f64);
        for i in 0..n {
            let u = m * Vector4::from_column_slice(homog.row(i));
            let slot = k * n + i;
            refs.depth[slot] = u.z;
            if u.z > EPS_DEPTH {
                let nx = u.x / u.z / w;
                let ny = u.y / u.z / h;
                if (0.0..=1.0).contains(&nx) && (0.0..=1.0).contains(&ny) {
                    refs.coords[slot] = [nx, ny];
                    refs.valid[slot] = true;
                }
            }
        }
    }
    Ok(refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub probability: f64,
    pub max_rot_deg: f64,
    pub max_trans_m: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DisturbanceConfig {
    /// 50% chance per camera, up to 2 degrees and 20 cm.
    fn default() -> Self {
        DisturbanceConfig {
            probability: 0.5,
            max_rot_deg: 2.0,
            max_trans_m: 0.2,
            seed: 0,
        }
    }
}

impl DisturbanceConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!("{field}.probability"), "must lie in [0, 1]"));
        }
        if !(self.max_rot_deg >= 0.0 && self.max_rot_deg.is_finite()) {
            return Err(Error::config(format!("{field}.max_rot_deg"), "must be finite and >= 0"));
        }
        if !(self.max_trans_m >= 0.0 && self.max_trans_m.is_finite()) {
            return Err(Error::config(format!("{field}.max_trans_m"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One sampled extrinsic perturbation, recorded for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub applied: bool,
    pub axis: Vector3<f64>,
    pub angle_rad: f64,
    pub translation: Vector3<f64>,
}

fn sample_perturbation(cfg: &DisturbanceConfig, rng: &mut impl Rng) -> Perturbation {
    // Every draw is consumed whether or not the camera is perturbed, so a
    // camera's stream position does not depend on earlier coin flips.
    let coin: f64 = rng.random();
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let axis = Vector3::new(r * phi.cos(), r * phi.sin(), z);
    let max_rot = cfg.max_rot_deg.to_radians();
    let angle_rad = if max_rot > 0.0 {
        rng.random_range(-max_rot..=max_rot)
    } else {
        let _: f64 = rng.random();
        0.0
    };
    let mut translation = Vector3::zeros();
    for i in 0..3 {
        translation[i] = if cfg.max_trans_m > 0.0 {
            rng.random_range(-cfg.max_trans_m..=cfg.max_trans_m)
        } else {
            let _: f64 = rng.random();
            0.0
        };
    }
    Perturbation {
        applied: coin < cfg.probability,
        axis,
        angle_rad,
        translation,
    }
}

/// Split the left 3x3 block of a projection into upper-triangular intrinsics
/// with positive diagonal and an orthonormal rotation.
pub fn rq_decompose(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut k = flip * r.transpose() * flip;
    let mut rot = flip * q.transpose();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            k.column_mut(i).neg_mut();
            rot.row_mut(i).neg_mut();
        }
    }
    (k, rot)
}

fn perturb_camera(cam: &Camera, p: &Perturbation) -> Camera {
    let m = cam.matrix();
    let left = m.fixed_view::<3, 3>(0, 0).into_owned();
    let (k, _) = rq_decompose(&left);
    let Some(k_inv) = k.try_inverse() else {
        return cam.clone();
    };
    let delta = Rotation3::from_axis_angle(&Unit::new_normalize(p.axis), p.angle_rad);
    // K [dR | dt] [R t; 0 1] = K dR K^-1 P + [0 | K dt]
    let mut out = k * delta.matrix() * k_inv * m;
    let shift = k * p.translation;
    for r in 0..3 {
        out[(r, 3)] += shift[r];
    }
    Camera::from_matrix(&out, cam.width_px, cam.height_px)
}

/// Independently perturb each camera's extrinsics with probability
/// `cfg.probability`. Returns the new rig and the sampled perturbations.
pub fn disturb_calibration_traced(
    rig: &CameraRig,
    cfg: &DisturbanceConfig,
    rng: &mut impl Rng,
) -> (CameraRig, Vec<Perturbation>) {
    let mut trace = Vec::with_capacity(rig.len());
    let cameras = rig
        .cameras
        .iter()
        .map(|cam| {
            let p = sample_perturbation(cfg, rng);
            trace.push(p);
            if p.applied {
                perturb_camera(cam, &p)
            } else {
                cam.clone()
            }
        })
        .collect();
    (CameraRig { cameras }, trace)
}

pub fn disturb_calibration(rig: &CameraRig, cfg: &DisturbanceConfig, rng: &mut impl Rng) -> CameraRig {
    disturb_calibration_traced(rig, cfg, rng).0
}

/// Same as [`disturb_calibration`] with the stream derived from `cfg.seed`.
pub fn disturb_calibration_seeded(rig: &CameraRig, cfg: &DisturbanceConfig) -> CameraRig {
    let mut rng = crate::rng::stream(cfg.seed, "disturbance");
    disturb_calibration(rig, cfg, &mut rng)
}
