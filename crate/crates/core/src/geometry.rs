//! Axis-aligned box arithmetic.
//!
//! Boxes are half-open continuous rectangles: width is `x_max - x_min`, with
//! no `+1` pixel correction anywhere in the crate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(self.invalid("non-finite coordinate"));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(self.invalid("min corner exceeds max corner"));
        }
        Ok(())
    }

    fn invalid(&self, reason: &'static str) -> Error {
        Error::InvalidBox {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
            reason,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Overlapping region, or `None` when the boxes share no area.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (b.x_max > b.x_min && b.y_max > b.y_min).then_some(b)
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A scored, labelled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        Detection { bbox, score, class_id }
    }
}

/// Anchor-relative regression offsets: center shift in anchor units, log size ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        BoxDelta { tx, ty, tw, th }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union. Returns 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy hard non-maximum suppression, applied per class.
///
/// Higher scores win; equal scores are resolved in favour of the earlier
/// input. A detection is dropped when its IoU with an already kept detection
/// of the same class is strictly greater than `iou_threshold`. The result is
/// sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(
            "iou_threshold",
            format!("{iou_threshold} is outside [0, 1]"),
        ));
    }
    let order = score_order(dets);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let cand = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    Ok(kept)
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Regression target that moves `anchor` onto `target`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::invalid(
            "anchor",
            format!("anchor must have positive size, got {wa}x{ha}"),
        ));
    }
    target.validate()?;
    let (wt, ht) = (target.width(), target.height());
    if !(wt > 0.0 && ht > 0.0) {
        return Err(Error::invalid(
            "target",
            format!("target must have positive size, got {wt}x{ht}"),
        ));
    }
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    Ok(BoxDelta {
        tx: (cxt - cxa) / wa,
        ty: (cyt - cya) / ha,
        tw: (wt / wa).ln(),
        th: (ht / ha).ln(),
    })
}

/// Inverse of [`encode_deltas`]. When `extent` is given as `(width, height)`
/// the decoded box is clipped to it.
pub fn decode_deltas(anchor: &BBox, delta: &BoxDelta, extent: Option<(f64, f64)>) -> Result<BBox> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::invalid(
            "anchor",
            format!("anchor must have positive size, got {wa}x{ha}"),
        ));
    }
    if !delta.is_finite() {
        return Err(Error::invalid("delta", format!("non-finite delta {delta:?}")));
    }
    let (cxa, cya) = anchor.center();
    let b = BBox::from_center(
        cxa + delta.tx * wa,
        cya + delta.ty * ha,
        wa * delta.tw.exp(),
        ha * delta.th.exp(),
    );
    if !b.width().is_finite() || !b.height().is_finite() {
        return Err(Error::invalid("delta", format!("delta {delta:?} overflows")));
    }
    Ok(match extent {
        Some((w, h)) => b.clip(w, h),
        None => b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(0., 0., 1., 1.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
        let v = iou(&bx(0., 0., 2., 2.), &bx(1., 0., 3., 2.));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_boxes_is_zero() {
        let p = bx(1., 1., 1., 1.);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &bx(0., 0., 2., 2.)), 0.0);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(2., 0., 1., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = Detection::new(bx(0., 0., 10., 10.), 0.9, 0);
        assert_eq!(nms(&[a], 0.3).unwrap(), vec![a]);

        let b = Detection::new(bx(0., 0., 10., 10.), 0.8, 0);
        assert_eq!(nms(&[b, a], 0.3).unwrap(), vec![a]);

        let far = Detection::new(bx(50., 50., 60., 60.), 0.95, 0);
        assert_eq!(nms(&[a, far], 0.3).unwrap(), vec![far, a]);

        assert!(nms(&[], 0.3).unwrap().is_empty());
    }

    #[test]
    fn nms_is_per_class() {
        let a = Detection::new(bx(0., 0., 10., 10.), 0.9, 0);
        let b = Detection::new(bx(0., 0., 10., 10.), 0.8, 1);
        assert_eq!(nms(&[a, b], 0.3).unwrap().len(), 2);
    }

    #[test]
    fn nms_ties_prefer_earlier_input() {
        let a = Detection::new(bx(0., 0., 10., 10.), 0.5, 0);
        let b = Detection::new(bx(1., 0., 11., 10.), 0.5, 0);
        assert_eq!(nms(&[a, b], 0.3).unwrap(), vec![a]);
        assert_eq!(nms(&[b, a], 0.3).unwrap(), vec![b]);
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert!(nms(&[], 1.5).is_err());
    }

    #[test]
    fn delta_examples() {
        let b = bx(3., 4., 10., 12.);
        assert_eq!(encode_deltas(&b, &b).unwrap(), BoxDelta::ZERO);

        let d = encode_deltas(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)).unwrap();
        assert_eq!(d, BoxDelta::new(0.5, 0.5, 0.0, 0.0));

        let back = decode_deltas(&bx(0., 0., 2., 2.), &d, None).unwrap();
        assert_eq!(back, bx(1., 1., 3., 3.));

        assert_eq!(decode_deltas(&b, &BoxDelta::ZERO, None).unwrap(), b);

        let ln2 = 2f64.ln();
        let grown = decode_deltas(&bx(0., 0., 1., 1.), &BoxDelta::new(0., 0., ln2, ln2), None).unwrap();
        assert!((grown.width() - 2.0).abs() < 1e-12);
        assert!((grown.height() - 2.0).abs() < 1e-12);
        assert_eq!(grown.center(), (0.5, 0.5));
    }

    #[test]
    fn delta_errors() {
        let a = bx(0., 0., 2., 2.);
        assert!(encode_deltas(&a, &bx(1., 1., 1., 3.)).is_err());
        assert!(encode_deltas(&bx(0., 0., 0., 2.), &a).is_err());
        assert!(decode_deltas(&a, &BoxDelta::new(f64::NAN, 0., 0., 0.), None).is_err());
        assert!(decode_deltas(&a, &BoxDelta::new(0., 0., f64::INFINITY, 0.), None).is_err());
    }

    #[test]
    fn decode_clips_only_with_extent() {
        let a = bx(90., 90., 110., 110.);
        assert_eq!(decode_deltas(&a, &BoxDelta::ZERO, None).unwrap(), a);
        assert_eq!(
            decode_deltas(&a, &BoxDelta::ZERO, Some((100., 100.))).unwrap(),
            bx(90., 90., 100., 100.)
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_center(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn delta_roundtrip(a in arb_box(), t in arb_box()) {
            let d = encode_deltas(&a, &t).unwrap();
            let back = decode_deltas(&a, &d, None).unwrap();
            for (x, y) in back.to_array().iter().zip(t.to_array()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
