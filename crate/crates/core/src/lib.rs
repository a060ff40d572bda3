//! Salience-biased focal-loss training for a one-stage anchor detector.
//!
//! Each training image is weighted by how busy it looks to a frozen feature
//! extractor; cluttered images get a larger share of the classification loss.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod salience;

pub use anchors::{
    assign_targets, generate_anchors, AnchorConfig, AnchorLabel, AnchorSet, AssignmentMap, MatchThresholds,
};
pub use data::{AnnotatedImage, Annotation, Dataset, ImageChip, ImageSource, RgbPixels};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalResult, Interpolation};
pub use geometry::{iou, nms, BBox, BoxDelta, Detection};
pub use losses::{FocalConfig, ImageWeight, LossBreakdown, LossConfig};
pub use model::{Checkpoint, Detector, DetectorConfig, PredictConfig, TrainConfig, Trainer};
pub use salience::{ConvExtractor, FrozenExtractor, SalienceStats, TapId, WeightMode};
