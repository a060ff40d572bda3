//! Classification and regression losses, and the salience-weighted combiner.
//!
//! Classification is one-vs-all binary per class. Probabilities are clamped
//! to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, AssignmentMap};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    /// Foreground weight; background anchors get `1 - alpha`. `None` weighs
    /// both labels by 1.
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", format!("{} must be >= 0", self.gamma)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid("alpha", format!("{a} is outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn label_weight(&self, positive: bool) -> f64 {
        match (self.alpha, positive) {
            (None, _) => 1.0,
            (Some(a), true) => a,
            (Some(a), false) => 1.0 - a,
        }
    }
}

fn check_label(y: u8) -> Result<bool> {
    match y {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::invalid("y", format!("label {y} is not 0 or 1"))),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Probability assigned to the true label.
fn p_true(p: f64, positive: bool) -> f64 {
    if positive {
        p
    } else {
        1.0 - p
    }
}

/// Binary cross entropy `-ln(p_t)`.
pub fn cross_entropy(p: f64, y: u8) -> Result<f64> {
    let positive = check_label(y)?;
    if p.is_nan() {
        return Err(Error::invalid("p", "NaN probability"));
    }
    Ok(-p_true(clamp_prob(p), positive).ln())
}

/// `w_y * (1 - p_t)^gamma * CE(p, y)`.
pub fn focal_loss(p: f64, y: u8, cfg: &FocalConfig) -> Result<f64> {
    cfg.validate()?;
    let positive = check_label(y)?;
    let ce = cross_entropy(p, y)?;
    let pt = p_true(clamp_prob(p), positive);
    Ok(cfg.label_weight(positive) * (1.0 - pt).powf(cfg.gamma) * ce)
}

/// Focal loss of `sigmoid(logit)` and its derivative with respect to `logit`.
pub fn focal_loss_with_grad(logit: f64, y: u8, cfg: &FocalConfig) -> Result<(f64, f64)> {
    let p = sigmoid(logit);
    let loss = focal_loss(p, y, cfg)?;
    Ok((loss, focal_grad_unchecked(p, y == 1, cfg)))
}

fn focal_grad_unchecked(p: f64, positive: bool, cfg: &FocalConfig) -> f64 {
    let p = clamp_prob(p);
    let q = 1.0 - p;
    let w = cfg.label_weight(positive);
    let g = cfg.gamma;
    if positive {
        w * q.powf(g) * (g * p * p.ln() - q)
    } else {
        w * p.powf(g) * (p - g * q * q.ln())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed Huber-style loss over the four delta components.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> Result<f64> {
    check_l1_inputs(pred, target, beta)?;
    Ok(pred
        .as_array()
        .iter()
        .zip(target.as_array())
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum())
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> Result<[f64; 4]> {
    check_l1_inputs(pred, target, beta)?;
    let p = pred.as_array();
    let t = target.as_array();
    Ok(std::array::from_fn(|i| {
        let d = p[i] - t[i];
        if d.abs() < beta {
            d / beta
        } else {
            d.signum()
        }
    }))
}

fn check_l1_inputs(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("{beta} must be positive")));
    }
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::invalid("delta", "non-finite regression input"));
    }
    Ok(())
}

/// Scales a classification loss by the image's salience weight.
pub fn salience_biased_loss(classification_loss: f64, s_prime: f64) -> Result<f64> {
    if !(s_prime >= 0.0) {
        return Err(Error::invalid("s_prime", format!("{s_prime} must be >= 0")));
    }
    if !(classification_loss >= 0.0) {
        return Err(Error::invalid(
            "classification_loss",
            format!("{classification_loss} must be >= 0"),
        ));
    }
    Ok(s_prime * classification_loss)
}

/// Salience of one image: the raw mean activation and the weight derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageWeight {
    pub raw: f64,
    pub weight: f64,
}

impl ImageWeight {
    /// Weight 1, as used when salience weighting is switched off.
    pub const UNIT: ImageWeight = ImageWeight { raw: 0.0, weight: 1.0 };
}

/// Per-image audit record of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub raw_salience: f64,
    pub weight: f64,
    pub focal_sum: f64,
    pub l1_sum: f64,
    pub num_pos: usize,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(w: ImageWeight, focal_sum: f64, l1_sum: f64, num_pos: usize) -> Self {
        let norm = num_pos.max(1) as f64;
        LossBreakdown {
            raw_salience: w.raw,
            weight: w.weight,
            focal_sum,
            l1_sum,
            num_pos,
            total: w.weight * (focal_sum / norm) + l1_sum / norm,
        }
    }
}

/// Regression and loss-shape settings shared by both loss entry points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal: FocalConfig,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal: FocalConfig::default(),
            smooth_l1_beta: 1.0,
        }
    }
}

fn check_alignment(assignments: &AssignmentMap, class_len: usize, num_classes: usize, box_len: usize) -> Result<()> {
    let n = assignments.len();
    if num_classes == 0 {
        return Err(Error::invalid("num_classes", "must be positive"));
    }
    if class_len != n * num_classes {
        return Err(Error::LengthMismatch {
            what: "class predictions",
            expected: n * num_classes,
            actual: class_len,
        });
    }
    if box_len != n {
        return Err(Error::LengthMismatch {
            what: "box predictions",
            expected: n,
            actual: box_len,
        });
    }
    Ok(())
}

fn target_label(label: &AnchorLabel, k: usize) -> Option<u8> {
    match label {
        AnchorLabel::Ignore => None,
        AnchorLabel::Negative => Some(0),
        AnchorLabel::Positive { class_id, .. } => Some(u8::from(*class_id == k)),
    }
}

/// Loss of one image from per-anchor class probabilities.
///
/// `class_probs` is anchor-major: entry `a * num_classes + k`. Ignored
/// anchors contribute to neither term; regression covers positives only.
/// Both sums are normalized by `max(num_pos, 1)` and the weight multiplies
/// the classification term alone.
pub fn total_loss(
    assignments: &AssignmentMap,
    class_probs: &[f64],
    num_classes: usize,
    box_preds: &[BoxDelta],
    weight: ImageWeight,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_alignment(assignments, class_probs.len(), num_classes, box_preds.len())?;
    salience_biased_loss(0.0, weight.weight)?;
    cfg.focal.validate()?;

    let mut focal_sum = 0.0;
    let mut l1_sum = 0.0;
    for (a, label) in assignments.labels.iter().enumerate() {
        for k in 0..num_classes {
            if let Some(y) = target_label(label, k) {
                focal_sum += focal_loss(class_probs[a * num_classes + k], y, &cfg.focal)?;
            }
        }
        if let Some(t) = &assignments.targets[a] {
            l1_sum += smooth_l1(&box_preds[a], t, cfg.smooth_l1_beta)?;
        }
    }
    Ok(LossBreakdown::assemble(
        weight,
        focal_sum,
        l1_sum,
        assignments.num_positive(),
    ))
}

/// Gradients of [`LossBreakdown::total`] with respect to the raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// Same layout as the class logits.
    pub class_logits: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

/// Same quantity as [`total_loss`], taking class logits and also returning
/// the gradient of the total with respect to every head output.
pub fn total_loss_with_grad(
    assignments: &AssignmentMap,
    class_logits: &[f64],
    num_classes: usize,
    box_preds: &[BoxDelta],
    weight: ImageWeight,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    check_alignment(assignments, class_logits.len(), num_classes, box_preds.len())?;
    salience_biased_loss(0.0, weight.weight)?;
    cfg.focal.validate()?;

    let num_pos = assignments.num_positive();
    let norm = num_pos.max(1) as f64;
    let cls_scale = weight.weight / norm;

    let mut grads = LossGradients {
        class_logits: vec![0.0; class_logits.len()],
        boxes: vec![[0.0; 4]; box_preds.len()],
    };
    let mut focal_sum = 0.0;
    let mut l1_sum = 0.0;
    for (a, label) in assignments.labels.iter().enumerate() {
        for k in 0..num_classes {
            if let Some(y) = target_label(label, k) {
                let i = a * num_classes + k;
                let (l, g) = focal_loss_with_grad(class_logits[i], y, &cfg.focal)?;
                focal_sum += l;
                grads.class_logits[i] = cls_scale * g;
            }
        }
        if let Some(t) = &assignments.targets[a] {
            l1_sum += smooth_l1(&box_preds[a], t, cfg.smooth_l1_beta)?;
            let g = smooth_l1_grad(&box_preds[a], t, cfg.smooth_l1_beta)?;
            grads.boxes[a] = g.map(|v| v / norm);
        }
    }
    Ok((LossBreakdown::assemble(weight, focal_sum, l1_sum, num_pos), grads))
}
