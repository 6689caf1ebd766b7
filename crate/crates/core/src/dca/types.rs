use crate::error::{Error, Result};
use crate::geometry::{Camera, STRIDES};
use crate::tensor::Tensor;

/// Sparse LiDAR representation: one feature row and one 3D coordinate per
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureSet {
    /// N x C
    pub features: Tensor,
    /// N x 3, meters
    pub coords: Tensor,
}

impl PointFeatureSet {
    pub fn new(features: Tensor, coords: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim("PointFeatureSet", "N x C features", format!("{:?}", features.shape())));
        }
        coords.check_shape("PointFeatureSet coords", &[features.rows(), 3])?;
        if !features.is_finite() || !coords.is_finite() {
            return Err(Error::config("points", "features and coordinates must be finite"));
        }
        Ok(PointFeatureSet { features, coords })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> PointFeatureSet {
        let pick = |t: &Tensor| {
            let w = t.row_len();
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::new(vec![idx.len(), w], data).expect("selection keeps row width")
        };
        PointFeatureSet {
            features: pick(&self.features),
            coords: pick(&self.coords),
        }
    }
}

/// One camera's feature maps at strides 4, 8, 16 and 32, each `H_l x W_l x C_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() || levels.len() > STRIDES.len() {
            return Err(Error::dim("FeaturePyramid", "1..=4 levels", levels.len()));
        }
        if levels.iter().any(|l| l.shape().len() != 3) {
            return Err(Error::dim("FeaturePyramid", "H x W x C maps", "other rank"));
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.shape()[2]).collect()
    }

    /// Level `l` must be exactly the image size divided by its stride.
    pub fn check_camera(&self, cam: &Camera) -> Result<()> {
        for (l, map) in self.levels.iter().enumerate() {
            let s = STRIDES[l];
            let expected = [(cam.height_px / s) as usize, (cam.width_px / s) as usize];
            if map.shape()[..2] != expected {
                return Err(Error::dim(
                    "FeaturePyramid level size",
                    format!("{expected:?} at stride {s}"),
                    format!("{:?}", &map.shape()[..2]),
                ));
            }
        }
        Ok(())
    }
}

/// Predicted offsets (normalized image units) and attention weights for every
/// valid (point, camera) pair, in point-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub pairs: Vec<(usize, usize)>,
    /// P x (L*M*D) x 2
    pub offsets: Tensor,
    /// P x (L*M*D)
    pub weights: Tensor,
}

impl OffsetField {
    pub fn samples(&self) -> usize {
        self.weights.row_len()
    }

    pub fn find(&self, point: usize, camera: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (point, camera))
    }

    pub fn weights_of(&self, pair: usize) -> &[f64] {
        self.weights.row(pair)
    }

    pub fn offsets_of(&self, pair: usize) -> &[f64] {
        self.offsets.row(pair)
    }
}
