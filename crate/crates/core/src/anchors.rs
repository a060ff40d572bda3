//! Dense anchor grids and IoU-based target assignment.
//!
//! Anchor order inside a level is row-major over grid cells; within a cell,
//! anchors run ratio-major then multiplier, so the anchor index of
//! `(row, col, ratio_idx, mult_idx)` is
//! `((row * grid_w + col) * n_ratios + ratio_idx) * n_mults + mult_idx`.
//! Detector heads emit their per-cell channels in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox, BoxDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Width:height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Size multipliers applied to each level's base size.
    pub scale_multipliers: Vec<f64>,
    pub base_sizes: Vec<f64>,
    pub strides: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            aspect_ratios: vec![1.0 / 3.0, 1.0, 3.0],
            scale_multipliers: vec![2.0, 2f64.sqrt(), 0.3],
            base_sizes: vec![32.0, 64.0],
            strides: vec![8.0, 16.0],
        }
    }
}

impl AnchorConfig {
    /// The five-level P3-P7 layout used by full-size detectors.
    pub fn full_pyramid() -> Self {
        AnchorConfig {
            base_sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            strides: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            ..AnchorConfig::default()
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() * self.scale_multipliers.len()
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.aspect_ratios) {
            return Err(Error::invalid("aspect_ratios", "must be non-empty and positive"));
        }
        if !positive(&self.scale_multipliers) {
            return Err(Error::invalid("scale_multipliers", "must be non-empty and positive"));
        }
        if !positive(&self.base_sizes) || !positive(&self.strides) {
            return Err(Error::invalid("base_sizes/strides", "must be non-empty and positive"));
        }
        if self.base_sizes.len() != self.strides.len() {
            return Err(Error::invalid(
                "base_sizes/strides",
                format!(
                    "one entry per level required ({} base sizes, {} strides)",
                    self.base_sizes.len(),
                    self.strides.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Anchors of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub stride: f64,
    pub base_size: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub boxes: Vec<BBox>,
}

/// All anchors for one image size, grouped by level.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
    pub anchors_per_cell: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level by level.
    pub fn iter(&self) -> impl Iterator<Item = &BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter())
    }

    /// Level index of every anchor, aligned with [`AnchorSet::iter`].
    pub fn level_of_each(&self) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.boxes.len()))
            .collect()
    }
}

/// Tiles anchors over an `image_w x image_h` image.
///
/// Grid dimensions are `ceil(dim / stride)`. An anchor with ratio `r` and
/// multiplier `m` at base size `b` has area `(b*m)^2` and `w/h = r`.
pub fn generate_anchors(image_w: usize, image_h: usize, cfg: &AnchorConfig) -> Result<AnchorSet> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid(
            "image size",
            format!("{image_w}x{image_h} must be positive"),
        ));
    }
    cfg.validate()?;

    let mut shapes = Vec::with_capacity(cfg.anchors_per_cell());
    let levels = cfg
        .strides
        .iter()
        .zip(&cfg.base_sizes)
        .map(|(&stride, &base)| {
            shapes.clear();
            for &r in &cfg.aspect_ratios {
                for &m in &cfg.scale_multipliers {
                    let side = base * m;
                    let sr = r.sqrt();
                    shapes.push((side * sr, side / sr));
                }
            }
            let grid_w = (image_w as f64 / stride).ceil() as usize;
            let grid_h = (image_h as f64 / stride).ceil() as usize;
            let mut boxes = Vec::with_capacity(grid_w * grid_h * shapes.len());
            for row in 0..grid_h {
                let cy = (row as f64 + 0.5) * stride;
                for col in 0..grid_w {
                    let cx = (col as f64 + 0.5) * stride;
                    boxes.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
                }
            }
            AnchorLevel {
                stride,
                base_size: base,
                grid_w,
                grid_h,
                boxes,
            }
        })
        .collect();
    Ok(AnchorSet {
        levels,
        anchors_per_cell: cfg.anchors_per_cell(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { class_id: usize, gt_index: usize },
    Negative,
    Ignore,
}

/// Per-anchor labels plus regression targets for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    pub labels: Vec<AnchorLabel>,
    /// `Some` exactly for positive anchors.
    pub targets: Vec<Option<BoxDelta>>,
}

impl AssignmentMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            positive: 0.5,
            negative: 0.4,
        }
    }
}

/// Labels every anchor against the ground truth.
///
/// Max IoU `>= positive` makes an anchor positive for its best ground truth,
/// `< negative` makes it background, anything in between is ignored. Each
/// ground truth then claims its best overlapping anchor outright; when two
/// ground truths want the same anchor the later one takes its next best
/// unclaimed anchor instead.
pub fn assign_targets(
    anchors: &AnchorSet,
    gts: &[(BBox, usize)],
    thresholds: MatchThresholds,
) -> Result<AssignmentMap> {
    let MatchThresholds { positive, negative } = thresholds;
    if !(0.0 <= negative && negative <= positive && positive <= 1.0) {
        return Err(Error::invalid(
            "thresholds",
            format!("need 0 <= neg ({negative}) <= pos ({positive}) <= 1"),
        ));
    }
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(AssignmentMap {
            labels: vec![AnchorLabel::Negative; n],
            targets: vec![None; n],
        });
    }
    for (b, _) in gts {
        b.validate()?;
    }

    let boxes: Vec<&BBox> = anchors.iter().collect();
    let mut best_gt = vec![(0usize, 0.0f64); n];
    // Candidate anchors per gt, best first.
    let mut per_gt: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gts.len()];
    for (ai, a) in boxes.iter().enumerate() {
        for (gi, (g, _)) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best_gt[ai].1 {
                best_gt[ai] = (gi, v);
            }
            if v > 0.0 {
                per_gt[gi].push((ai, v));
            }
        }
    }

    let mut labels: Vec<AnchorLabel> = best_gt
        .iter()
        .map(|&(gi, v)| {
            if v >= positive {
                AnchorLabel::Positive {
                    class_id: gts[gi].1,
                    gt_index: gi,
                }
            } else if v < negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    let mut claimed = vec![false; n];
    for (gi, cands) in per_gt.iter_mut().enumerate() {
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(&(ai, _)) = cands.iter().find(|(ai, _)| !claimed[*ai]) {
            claimed[ai] = true;
            labels[ai] = AnchorLabel::Positive {
                class_id: gts[gi].1,
                gt_index: gi,
            };
        }
    }

    let targets = labels
        .iter()
        .zip(&boxes)
        .map(|(l, a)| match l {
            AnchorLabel::Positive { gt_index, .. } => encode_deltas(a, &gts[*gt_index].0).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AssignmentMap { labels, targets })
}
