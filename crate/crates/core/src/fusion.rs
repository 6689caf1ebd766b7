//! Fusion strategies behind one trait, registered by name.
//!
//! A strategy maps point features plus per-camera pyramids and reference
//! points to fused per-point features. The registry builds a fresh model for
//! a name chosen at runtime from configuration.

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{one_to_one_backward, one_to_one_forward, OneToOneCache, OneToOneParams};
use crate::dca::{dca_backward, dca_forward, DcaCache, DcaHyper, DcaInputs, DcaParams, FeaturePyramid, OffsetInit, PointFeatureSet, QueryMode};
use crate::diffcore::Params;
use crate::error::{Error, Result};
use crate::geometry::ReferencePointSet;
use crate::tensor::Tensor;

/// One forward batch: a subset of a scene's points with their reference
/// points and the scene's pyramids.
#[derive(Debug, Clone, Copy)]
pub struct FusionBatch<'a> {
    pub points: &'a PointFeatureSet,
    pub pyramids: &'a [FeaturePyramid],
    pub refs: &'a ReferencePointSet,
}

/// Shapes a strategy must adapt to, plus operator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionContext {
    pub lidar_channels: usize,
    pub level_channels: Vec<usize>,
    /// (width, height) in pixels.
    pub image_px: (u32, u32),
    #[serde(default)]
    pub model: ModelConfig,
}

/// Operator hyperparameters exposed in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub directions: usize,
    pub points_per_direction: usize,
    /// Hidden width of the offset and weight heads, as a multiple of C.
    pub head_hidden_factor: usize,
    /// Pyramid level read by the one-to-one baseline (0 is stride 4).
    pub baseline_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            directions: 8,
            points_per_direction: 4,
            head_hidden_factor: 2,
            baseline_level: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.levels) {
            return Err(Error::config("model.levels", "must be in 1..=4"));
        }
        if self.baseline_level > 3 {
            return Err(Error::config("model.baseline_level", "must be in 0..=3"));
        }
        for (f, v) in [
            ("model.directions", self.directions),
            ("model.points_per_direction", self.points_per_direction),
            ("model.head_hidden_factor", self.head_hidden_factor),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be >= 1"));
            }
        }
        Ok(())
    }
}

pub trait FusionModel: Debug + Send + Sync {
    /// Registry name of the strategy.
    fn kind(&self) -> &'static str;

    fn out_channels(&self) -> usize;

    /// Fused features, `N x out_channels`. Keeps what the next
    /// [`FusionModel::backward`] needs.
    fn forward(&mut self, batch: &FusionBatch<'_>) -> Result<Tensor>;

    /// Accumulate parameter gradients for the most recent forward.
    fn backward(&mut self, grad_out: &Tensor) -> Result<()>;

    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Parameters and their gradient buffers, in the same order.
    fn params_and_grads(&mut self) -> (Vec<&mut Tensor>, Vec<&Tensor>);

    fn zero_grad(&mut self);

    fn clone_box(&self) -> Box<dyn FusionModel>;
}

impl Clone for Box<dyn FusionModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Debug, Clone)]
struct DcaFusion {
    kind: &'static str,
    params: DcaParams,
    grads: DcaParams,
    cache: Option<DcaCache>,
}

impl FusionModel for DcaFusion {
    fn kind(&self) -> &'static str {
        self.kind
    }

    fn out_channels(&self) -> usize {
        self.params.hyper.channels
    }

    fn forward(&mut self, batch: &FusionBatch<'_>) -> Result<Tensor> {
        let inputs = DcaInputs::with_refs(batch.points, batch.pyramids, batch.refs.clone())?;
        let (out, cache) = dca_forward(&inputs, &self.params)?;
        self.cache = Some(cache);
        Ok(out.fused)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::State("DcaFusion"))?;
        let g = dca_backward(&cache, &self.params, grad_out)?;
        self.grads.accumulate(&g.params);
        Ok(())
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params.named("")
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.named_mut("")
    }

    fn params_and_grads(&mut self) -> (Vec<&mut Tensor>, Vec<&Tensor>) {
        (self.params.tensors_mut(), self.grads.tensors())
    }

    fn zero_grad(&mut self) {
        self.grads.zero();
    }

    fn clone_box(&self) -> Box<dyn FusionModel> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone)]
struct OneToOneFusion {
    params: OneToOneParams,
    grads: OneToOneParams,
    cache: Option<(OneToOneCache, Vec<FeaturePyramid>, ReferencePointSet)>,
}

impl FusionModel for OneToOneFusion {
    fn kind(&self) -> &'static str {
        ONE_TO_ONE
    }

    fn out_channels(&self) -> usize {
        self.params.fuse.out_dim()
    }

    fn forward(&mut self, batch: &FusionBatch<'_>) -> Result<Tensor> {
        let (out, cache) = one_to_one_forward(batch.points, batch.pyramids, batch.refs, &self.params)?;
        // backward only needs the sampled level
        let level = self.params.level;
        let sampled: Vec<FeaturePyramid> = batch
            .pyramids
            .iter()
            .map(|p| FeaturePyramid {
                levels: p.levels[..=level].to_vec(),
            })
            .collect();
        self.cache = Some((cache, sampled, batch.refs.clone()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<()> {
        let (cache, pyramids, refs) = self.cache.take().ok_or(Error::State("OneToOneFusion"))?;
        let g = one_to_one_backward(&cache, &pyramids, &refs, &self.params, grad_out)?;
        self.grads.accumulate(&g.params);
        Ok(())
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params.named("")
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params.named_mut("")
    }

    fn params_and_grads(&mut self) -> (Vec<&mut Tensor>, Vec<&Tensor>) {
        (self.params.tensors_mut(), self.grads.tensors())
    }

    fn zero_grad(&mut self) {
        self.grads.zero();
    }

    fn clone_box(&self) -> Box<dyn FusionModel> {
        Box::new(self.clone())
    }
}

pub const ONE_TO_ONE: &str = "one_to_one";
pub const DCA_NO_DQE: &str = "dca_no_dqe";
pub const DCA_WITH_DQE: &str = "dca_with_dqe";
pub const SINGLE_OFFSET_LEARNED: &str = "single_offset_learned";
pub const SINGLE_OFFSET_FIXED: &str = "single_offset_fixed";

pub type FusionBuilder = fn(&FusionContext, &mut ChaCha8Rng) -> Result<Box<dyn FusionModel>>;

struct Entry {
    description: &'static str,
    build: FusionBuilder,
}

/// Name-indexed fusion strategies.
pub struct FusionRegistry {
    entries: BTreeMap<&'static str, Entry>,
}

impl FusionRegistry {
    pub fn empty() -> Self {
        FusionRegistry { entries: BTreeMap::new() }
    }

    /// The one-to-one baseline and the four operator configurations.
    pub fn standard() -> Self {
        let mut r = FusionRegistry::empty();
        r.register(ONE_TO_ONE, "single pixel under the projection, concatenated and mixed linearly", build_one_to_one);
        r.register(DCA_NO_DQE, "learned offsets across levels, query from the point feature only", |ctx, rng| {
            build_dca(DCA_NO_DQE, ctx, rng, |h| DcaHyper { query: QueryMode::Lidar, ..h })
        });
        r.register(DCA_WITH_DQE, "learned offsets across levels, query from point and image features", |ctx, rng| {
            build_dca(DCA_WITH_DQE, ctx, rng, |h| h)
        });
        r.register(SINGLE_OFFSET_LEARNED, "one learned offset on the finest level", |ctx, rng| {
            build_dca(SINGLE_OFFSET_LEARNED, ctx, rng, single)
        });
        r.register(SINGLE_OFFSET_FIXED, "one sample at the projection on the finest level", |ctx, rng| {
            build_dca(SINGLE_OFFSET_FIXED, ctx, rng, |h| DcaHyper {
                learn_offsets: false,
                ..single(h)
            })
        });
        r
    }

    pub fn register(&mut self, name: &'static str, description: &'static str, build: FusionBuilder) {
        self.entries.insert(name, Entry { description, build });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|(k, e)| (*k, e.description)).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Name check without building; used to validate configurations.
    pub fn check(&self, name: &str) -> Result<()> {
        if self.contains(name) {
            Ok(())
        } else {
            Err(Error::Unknown {
                kind: "fusion",
                name: name.to_string(),
                known: self.names().join(", "),
            })
        }
    }

    pub fn build(&self, name: &str, ctx: &FusionContext, rng: &mut ChaCha8Rng) -> Result<Box<dyn FusionModel>> {
        self.check(name)?;
        ctx.model.validate()?;
        (self.entries[name].build)(ctx, rng)
    }
}

fn build_one_to_one(ctx: &FusionContext, rng: &mut ChaCha8Rng) -> Result<Box<dyn FusionModel>> {
    let level = ctx.model.baseline_level;
    let width = *ctx
        .level_channels
        .get(level)
        .ok_or_else(|| Error::config("model.baseline_level", format!("pyramid has {} levels", ctx.level_channels.len())))?;
    let c = ctx.lidar_channels;
    let params = OneToOneParams::init(c, width, c, level, rng);
    Ok(Box::new(OneToOneFusion {
        grads: params.zeroed(),
        params,
        cache: None,
    }))
}

fn single(h: DcaHyper) -> DcaHyper {
    DcaHyper {
        offset_init: OffsetInit::Zero,
        ..DcaHyper::single(h.channels)
    }
}

fn build_dca(
    kind: &'static str,
    ctx: &FusionContext,
    rng: &mut ChaCha8Rng,
    adjust: impl FnOnce(DcaHyper) -> DcaHyper,
) -> Result<Box<dyn FusionModel>> {
    let c = ctx.lidar_channels;
    let m = &ctx.model;
    let base = DcaHyper {
        levels: m.levels,
        directions: m.directions,
        points_per_direction: m.points_per_direction,
        head_hidden: m.head_hidden_factor * c,
        ..DcaHyper::standard(c)
    };
    let params = DcaParams::init(adjust(base), &ctx.level_channels, ctx.image_px, rng)?;
    Ok(Box::new(DcaFusion {
        kind,
        grads: params.zeroed(),
        params,
        cache: None,
    }))
}
