//! VOC-style average precision, mAP, and precision/recall/F1.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.0.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// Ground-truth box for single-class matching. Difficult boxes neither count
/// toward recall nor penalize detections that land on them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub difficult: bool,
}

impl From<BBox> for GtBox {
    fn from(bbox: BBox) -> Self {
        GtBox { bbox, difficult: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// AP with the curve it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub ap: f64,
    /// Non-difficult ground truths.
    pub num_gt: usize,
    /// True when there was neither ground truth nor detection, so AP 0 is a convention.
    pub undefined: bool,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

fn check_threshold(iou_threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(
            "iou_threshold",
            format!("{iou_threshold} not in [0, 1]"),
        ));
    }
    Ok(())
}

/// Greedy matching of one image's detections (indices into `dets`, already in
/// rank order) against its ground truths.
fn match_image(dets: &[&Detection], gts: &[GtBox], iou_threshold: f64) -> Vec<Outcome> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] && !g.difficult {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_threshold => {
                    if gts[j].difficult {
                        Outcome::Ignored
                    } else {
                        taken[j] = true;
                        Outcome::Tp
                    }
                }
                _ => Outcome::Fp,
            }
        })
        .collect()
}

fn rank(dets: &[(usize, &Detection)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .1
            .score
            .partial_cmp(&dets[a].1.score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Pools detections from several images, ranks them globally by score, and
/// matches each against the ground truth of its own image.
fn pooled_curve(images: &[(Vec<&Detection>, Vec<GtBox>)], iou_threshold: f64, interp: Interpolation) -> ApCurve {
    let flat: Vec<(usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| d.iter().map(move |d| (i, *d)))
        .collect();
    let order = rank(&flat);
    let mut per_image: Vec<Vec<&Detection>> = vec![Vec::new(); images.len()];
    let mut slot = vec![0usize; flat.len()];
    for &k in &order {
        let (i, d) = flat[k];
        slot[k] = per_image[i].len();
        per_image[i].push(d);
    }
    let outcomes: Vec<Vec<Outcome>> = per_image
        .iter()
        .zip(images)
        .map(|(d, (_, g))| match_image(d, g, iou_threshold))
        .collect();

    let num_gt = images
        .iter()
        .map(|(_, g)| g.iter().filter(|g| !g.difficult).count())
        .sum::<usize>();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for &k in &order {
        match outcomes[flat[k].0][slot[k]] {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push(PrPoint {
            score: flat[k].1.score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    let ap = if num_gt == 0 { 0.0 } else { area(&points, interp) };
    ApCurve {
        ap,
        num_gt,
        undefined: num_gt == 0 && points.is_empty(),
        points,
    }
}

fn area(points: &[PrPoint], interp: Interpolation) -> f64 {
    match interp {
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    points
                        .iter()
                        .filter(|p| p.recall >= r)
                        .map(|p| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        Interpolation::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev = 0.0;
            let mut sum = 0.0;
            for (p, e) in points.iter().zip(&envelope) {
                sum += (p.recall - prev) * e;
                prev = p.recall;
            }
            sum
        }
    }
}

/// Single-class, single-image AP with 11-point interpolation.
/// Empty ground truth gives 0.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Result<f64> {
    let gts: Vec<GtBox> = gts.iter().copied().map(GtBox::from).collect();
    Ok(ap_curve(dets, &gts, iou_threshold, Interpolation::ElevenPoint)?.ap)
}

pub fn ap_curve(dets: &[Detection], gts: &[GtBox], iou_threshold: f64, interp: Interpolation) -> Result<ApCurve> {
    check_threshold(iou_threshold)?;
    Ok(pooled_curve(
        &[(dets.iter().collect(), gts.to_vec())],
        iou_threshold,
        interp,
    ))
}

/// Unweighted mean of the given per-class APs.
pub fn mean_average_precision<K>(per_class: &BTreeMap<K, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("per_class", "no classes to average"));
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrecisionRecall {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrecisionRecall {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn prf_counts(
    images: &[(Vec<&Detection>, Vec<GtBox>)],
    iou_threshold: f64,
    score_threshold: f64,
) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut gt) = (0, 0, 0);
    for (dets, gts) in images {
        let mut kept: Vec<&Detection> = dets.iter().copied().filter(|d| d.score >= score_threshold).collect();
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        for o in match_image(&kept, gts, iou_threshold) {
            match o {
                Outcome::Tp => tp += 1,
                Outcome::Fp => fp += 1,
                Outcome::Ignored => {}
            }
        }
        gt += gts.iter().filter(|g| !g.difficult).count();
    }
    (tp, fp, gt - tp)
}

/// Counts at a fixed operating point: detections scoring below
/// `score_threshold` are dropped before matching.
pub fn precision_recall_f1(
    dets: &[Detection],
    gts: &[GtBox],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<PrecisionRecall> {
    check_threshold(iou_threshold)?;
    let (tp, fp, fn_) = prf_counts(&[(dets.iter().collect(), gts.to_vec())], iou_threshold, score_threshold);
    Ok(PrecisionRecall::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Operating point for precision/recall/F1.
    pub score_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.5,
            interpolation: Interpolation::ElevenPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub ap: f64,
    #[serde(flatten)]
    pub counts: PrecisionRecall,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub interpolation: Interpolation,
    /// Mean AP over classes with at least one non-difficult ground truth.
    pub map: f64,
    pub num_images: usize,
    pub classes: Vec<ClassEval>,
    /// Pooled over all classes.
    #[serde(flatten)]
    pub overall: PrecisionRecall,
}

impl EvalResult {
    /// Report without the raw curves.
    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(classes) = v.get_mut("classes").and_then(|c| c.as_array_mut()) {
            for c in classes {
                if let Some(o) = c.as_object_mut() {
                    o.remove("curve");
                }
            }
        }
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    pub fn pr_curve_csv(&self) -> String {
        let mut s = String::from("class,score,precision,recall\n");
        for c in &self.classes {
            for p in &c.curve {
                let _ = writeln!(s, "{},{},{},{}", c.name, p.score, p.precision, p.recall);
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| class | gt | AP | P | R | F1 |\n|---|---:|---:|---:|---:|---:|\n");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                c.name, c.num_gt, c.ap, c.counts.precision, c.counts.recall, c.counts.f1
            );
        }
        let _ = writeln!(s, "\nmAP@{}: {:.4}", self.iou_threshold, self.map);
        s
    }
}

/// Dataset-level evaluation. `images` pairs each image's detections with its
/// annotations; AP ranks detections of a class across all images.
pub fn evaluate(
    images: &[(Vec<Detection>, Vec<Annotation>)],
    classes: &[String],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    check_threshold(cfg.iou_threshold)?;
    for (dets, anns) in images {
        let bad = dets
            .iter()
            .map(|d| d.class_id)
            .chain(anns.iter().map(|a| a.class_id))
            .find(|&c| c >= classes.len());
        if let Some(c) = bad {
            return Err(Error::invalid("class_id", format!("{c} >= {} classes", classes.len())));
        }
    }
    let mut per_class = Vec::new();
    let mut aps = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (k, name) in classes.iter().enumerate() {
        let split: Vec<(Vec<&Detection>, Vec<GtBox>)> = images
            .iter()
            .map(|(dets, anns)| {
                (
                    dets.iter().filter(|d| d.class_id == k).collect(),
                    anns.iter()
                        .filter(|a| a.class_id == k)
                        .map(|a| GtBox {
                            bbox: a.bbox,
                            difficult: a.difficult,
                        })
                        .collect(),
                )
            })
            .collect();
        let curve = pooled_curve(&split, cfg.iou_threshold, cfg.interpolation);
        let (t, f, n) = prf_counts(&split, cfg.iou_threshold, cfg.score_threshold);
        tp += t;
        fp += f;
        fn_ += n;
        if curve.num_gt > 0 {
            aps.insert(k, curve.ap);
        }
        per_class.push(ClassEval {
            class_id: k,
            name: name.clone(),
            num_gt: curve.num_gt,
            ap: curve.ap,
            counts: PrecisionRecall::from_counts(t, f, n),
            curve: curve.points,
        });
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        mean_average_precision(&aps)?
    };
    Ok(EvalResult {
        iou_threshold: cfg.iou_threshold,
        score_threshold: cfg.score_threshold,
        interpolation: cfg.interpolation,
        map,
        num_images: images.len(),
        classes: per_class,
        overall: PrecisionRecall::from_counts(tp, fp, fn_),
    })
}
