//! The dynamic cross attention operator.
//!
//! For every LiDAR point and every camera that sees it, a query built from
//! the point feature and the image features at its projected reference point
//! predicts `L * M * D` sampling offsets and softmax weights. The image value
//! for the view is the weighted sum of bilinear samples at those offsets over
//! the first `L` pyramid levels; views are averaged and the result is added to
//! the raw point feature before a feed-forward block.

mod module;
mod ops;
mod params;
mod types;

pub use module::{dca_backward, dca_forward, DcaCache, DcaGrads, DcaInputs, DcaModule, DcaOutput};
pub use ops::{
    attend_one_to_many, attend_one_to_many_backward, enhance_query, enhance_query_backward, mean_valid_views,
    predict_offsets, predict_offsets_backward, predict_weights, predict_weights_backward, unify_channels,
    unify_channels_backward, AttendCache, QueryCache, UnifiedFeatures, UnifyCache,
};
pub use params::{DcaHyper, DcaParams, OffsetInit, QueryMode};
pub use types::{FeaturePyramid, OffsetField, PointFeatureSet};
