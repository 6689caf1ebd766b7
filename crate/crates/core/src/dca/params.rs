use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{join, AffineParams, FfnParams, LayerNormParams, MlpParams, Params};
use crate::error::{Error, Result};
use crate::geometry::STRIDES;
use crate::tensor::Tensor;

/// What the offset and weight heads see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// LiDAR feature concatenated with the image features at the reference
    /// point (dynamic query enhancement).
    LidarAndImage,
    /// LiDAR feature alone.
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetInit {
    /// M evenly spaced directions at radii 1..=D pixels of the stride-4 map.
    Directional,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcaHyper {
    /// Pyramid levels used, starting from stride 4.
    pub levels: usize,
    /// Sampling directions per level.
    pub directions: usize,
    /// Samples per direction.
    pub points_per_direction: usize,
    /// Unified channel width; also the width of the raw point features.
    pub channels: usize,
    pub query: QueryMode,
    /// When false the offsets are pinned at zero and the offset head is unused.
    pub learn_offsets: bool,
    pub offset_init: OffsetInit,
    pub head_hidden: usize,
    pub ffn_hidden: usize,
}

impl DcaHyper {
    /// L = 4 levels, M = 8 directions, D = 4 points per direction.
    pub fn standard(channels: usize) -> Self {
        DcaHyper {
            levels: 4,
            directions: 8,
            points_per_direction: 4,
            channels,
            query: QueryMode::LidarAndImage,
            learn_offsets: true,
            offset_init: OffsetInit::Directional,
            head_hidden: 2 * channels,
            ffn_hidden: 2 * channels,
        }
    }

    /// L = M = D = 1.
    pub fn single(channels: usize) -> Self {
        DcaHyper {
            levels: 1,
            directions: 1,
            points_per_direction: 1,
            offset_init: OffsetInit::Zero,
            ..DcaHyper::standard(channels)
        }
    }

    pub fn samples_per_level(&self) -> usize {
        self.directions * self.points_per_direction
    }

    pub fn samples(&self) -> usize {
        self.levels * self.samples_per_level()
    }

    pub fn query_width(&self) -> usize {
        match self.query {
            QueryMode::LidarAndImage => 2 * self.channels,
            QueryMode::Lidar => self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=STRIDES.len()).contains(&self.levels) {
            return Err(Error::config("hyper.levels", "must be in 1..=4"));
        }
        for (field, v) in [
            ("hyper.directions", self.directions),
            ("hyper.points_per_direction", self.points_per_direction),
            ("hyper.channels", self.channels),
            ("hyper.head_hidden", self.head_hidden),
            ("hyper.ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor of the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DcaParams {
    pub hyper: DcaHyper,
    pub lidar_mlp: MlpParams,
    pub lidar_ln: LayerNormParams,
    /// Per-level 1x1 convolution to `channels`.
    pub level_unify: Vec<AffineParams>,
    /// Per-level LayerNorm on the initial image features, shared by cameras.
    pub level_ln: Vec<LayerNormParams>,
    /// query -> L*M*D*2
    pub offset_head: MlpParams,
    /// query -> L*M*D
    pub weight_head: MlpParams,
    pub ffn: FfnParams,
}

impl DcaParams {
    /// Random initialization. `level_channels[l]` is the input width of
    /// pyramid level `l`; `image_px` is (width, height) in pixels, used to
    /// express the initial offset pattern in normalized units.
    pub fn init(hyper: DcaHyper, level_channels: &[usize], image_px: (u32, u32), rng: &mut impl Rng) -> Result<Self> {
        hyper.validate()?;
        if level_channels.len() < hyper.levels {
            return Err(Error::dim("DcaParams::init", format!("{} level widths", hyper.levels), level_channels.len()));
        }
        let c = hyper.channels;
        let q = hyper.query_width();
        let s = hyper.samples();
        let lidar_mlp = MlpParams::glorot(&[c, c, c], rng);
        let level_unify = level_channels[..hyper.levels]
            .iter()
            .map(|&cl| AffineParams::glorot(cl, c, rng))
            .collect();
        let mut offset_head = MlpParams::glorot(&[q, hyper.head_hidden, 2 * s], rng);
        let mut weight_head = MlpParams::glorot(&[q, hyper.head_hidden, s], rng);
        offset_head.last_mut().weight.fill(0.0);
        weight_head.last_mut().weight.fill(0.0);
        offset_head.last_mut().bias = initial_offsets(&hyper, image_px);
        let ffn = FfnParams::glorot(c, hyper.ffn_hidden, c, rng);
        Ok(DcaParams {
            hyper,
            lidar_mlp,
            lidar_ln: LayerNormParams::new(c),
            level_unify,
            level_ln: (0..hyper.levels).map(|_| LayerNormParams::new(c)).collect(),
            offset_head,
            weight_head,
            ffn,
        })
    }

    /// Identity unifiers and lidar MLP, zero heads, identity-free FFN left
    /// random. Requires every level width to equal `channels`.
    pub fn with_identity_unifiers(mut self) -> Result<Self> {
        let c = self.hyper.channels;
        for (l, u) in self.level_unify.iter_mut().enumerate() {
            if u.in_dim() != c {
                return Err(Error::dim("with_identity_unifiers", c, format!("level {l} width {}", u.in_dim())));
            }
            *u = AffineParams::identity(c);
        }
        for layer in &mut self.lidar_mlp.layers {
            *layer = AffineParams::identity(c);
        }
        Ok(self)
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.level_unify.iter().map(AffineParams::in_dim).collect()
    }
}

fn initial_offsets(hyper: &DcaHyper, image_px: (u32, u32)) -> Tensor {
    let (m_count, d_count) = (hyper.directions, hyper.points_per_direction);
    let mut bias = Tensor::zeros(&[2 * hyper.samples()]);
    if hyper.offset_init == OffsetInit::Zero {
        return bias;
    }
    let pixel = STRIDES[0] as f64;
    let b = bias.data_mut();
    for l in 0..hyper.levels {
        for m in 0..m_count {
            let theta = std::f64::consts::TAU * m as f64 / m_count as f64;
            for d in 0..d_count {
                let j = (l * m_count + m) * d_count + d;
                let r = (d + 1) as f64 * pixel;
                b[2 * j] = r * theta.cos() / image_px.0 as f64;
                b[2 * j + 1] = r * theta.sin() / image_px.1 as f64;
            }
        }
    }
    bias
}

impl Params for DcaParams {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.lidar_mlp.named(&join(prefix, "lidar_mlp"));
        v.extend(self.lidar_ln.named(&join(prefix, "lidar_ln")));
        for (l, u) in self.level_unify.iter().enumerate() {
            v.extend(u.named(&join(prefix, &format!("level_unify.{l}"))));
        }
        for (l, n) in self.level_ln.iter().enumerate() {
            v.extend(n.named(&join(prefix, &format!("level_ln.{l}"))));
        }
        v.extend(self.offset_head.named(&join(prefix, "offset_head")));
        v.extend(self.weight_head.named(&join(prefix, "weight_head")));
        v.extend(self.ffn.named(&join(prefix, "ffn")));
        v
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.lidar_mlp.named_mut(&join(prefix, "lidar_mlp"));
        v.extend(self.lidar_ln.named_mut(&join(prefix, "lidar_ln")));
        for (l, u) in self.level_unify.iter_mut().enumerate() {
            v.extend(u.named_mut(&join(prefix, &format!("level_unify.{l}"))));
        }
        for (l, n) in self.level_ln.iter_mut().enumerate() {
            v.extend(n.named_mut(&join(prefix, &format!("level_ln.{l}"))));
        }
        v.extend(self.offset_head.named_mut(&join(prefix, "offset_head")));
        v.extend(self.weight_head.named_mut(&join(prefix, "weight_head")));
        v.extend(self.ffn.named_mut(&join(prefix, "ffn")));
        v
    }
}
