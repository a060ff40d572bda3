use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Conv2d, ConvGrad, Tensor3};
use crate::anchors::{generate_anchors, AnchorConfig, AnchorSet, AssignmentMap};
use crate::data::ImageChip;
use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, nms, score_order, BoxDelta, Detection};
use crate::losses::{sigmoid, total_loss_with_grad, ImageWeight, LossBreakdown, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub num_classes: usize,
    /// Output channels of the stride-2 backbone stages; stage `i` has stride `2^(i+1)`.
    pub stage_channels: Vec<usize>,
    /// Pyramid and head width.
    pub head_channels: usize,
    /// Initial foreground probability of every class output.
    pub prior: f64,
    pub anchors: AnchorConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 512,
            num_classes: 3,
            stage_channels: vec![16, 32, 32, 64],
            head_channels: 32,
            prior: 0.01,
            anchors: AnchorConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let stages = self.stage_channels.len();
        let levels = self.anchors.num_levels();
        if self.num_classes == 0 || self.head_channels == 0 {
            return Err(Error::invalid(
                "detector",
                "num_classes and head_channels must be positive",
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::invalid("stage_channels", "channels must be positive"));
        }
        if levels > stages {
            return Err(Error::invalid(
                "anchors.strides",
                format!("{levels} pyramid levels but only {stages} backbone stages"),
            ));
        }
        for (l, &s) in self.anchors.strides.iter().enumerate() {
            let expected = (1usize << (stages - levels + l + 1)) as f64;
            if s != expected {
                return Err(Error::invalid(
                    "anchors.strides",
                    format!("level {l} must have stride {expected} to match the backbone, got {s}"),
                ));
            }
        }
        let largest = 1usize << stages;
        if self.input_size == 0 || !self.input_size.is_multiple_of(largest) {
            return Err(Error::invalid(
                "input_size",
                format!("{} must be a positive multiple of {largest}", self.input_size),
            ));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::invalid("prior", format!("{} is outside (0, 1)", self.prior)));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.anchors.num_levels()
    }
}

/// Raw head outputs for one image, in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `anchor * num_classes + class`.
    pub class_logits: Vec<f32>,
    pub box_deltas: Vec<[f32; 4]>,
}

impl HeadOutput {
    pub fn class_probs(&self) -> Vec<f64> {
        self.class_logits.iter().map(|&x| sigmoid(f64::from(x))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            score_threshold: 0.05,
            nms_threshold: 0.3,
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// Small one-stage detector: strided conv backbone, top-down pyramid over the
/// last stages, and class/box heads shared across pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: DetectorConfig,
    stages: Vec<Conv2d>,
    laterals: Vec<Conv2d>,
    cls_hidden: Conv2d,
    cls_out: Conv2d,
    box_hidden: Conv2d,
    box_out: Conv2d,
    anchors: AnchorSet,
}

/// Gradients for every convolution, in [`Detector::named_convs`] order.
pub type DetectorGrads = Vec<ConvGrad>;

struct LevelCache {
    cls_hidden_cols: Vec<f32>,
    cls_hidden: Tensor3,
    cls_out_cols: Vec<f32>,
    box_hidden_cols: Vec<f32>,
    box_hidden: Tensor3,
    box_out_cols: Vec<f32>,
}

struct ForwardCache {
    input: Tensor3,
    stage_cols: Vec<Vec<f32>>,
    stage_out: Vec<Tensor3>,
    pyramid: Vec<Tensor3>,
    levels: Vec<LevelCache>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let stages = cfg
            .stage_channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::he_uniform(&mut rng, in_c, c, 3, 2);
                in_c = c;
                conv
            })
            .collect::<Vec<_>>();
        let f = cfg.head_channels;
        let first_level = stages.len() - cfg.num_levels();
        let laterals = cfg.stage_channels[first_level..]
            .iter()
            .map(|&c| Conv2d::he_uniform(&mut rng, c, f, 1, 1))
            .collect();
        let a = cfg.anchors.anchors_per_cell();
        // Output layers start near zero; std 0.01 as in RetinaNet, as a uniform bound.
        let small = 0.01 * 3f32.sqrt();
        let cls_hidden = Conv2d::he_uniform(&mut rng, f, f, 3, 1);
        let mut cls_out = Conv2d::uniform(&mut rng, f, a * cfg.num_classes, 3, 1, small);
        let prior_bias = -((1.0 - cfg.prior) / cfg.prior).ln() as f32;
        cls_out.bias.fill(prior_bias);
        let box_hidden = Conv2d::he_uniform(&mut rng, f, f, 3, 1);
        let box_out = Conv2d::uniform(&mut rng, f, a * 4, 3, 1, small);
        let anchors = generate_anchors(cfg.input_size, cfg.input_size, &cfg.anchors)?;
        Ok(Detector {
            cfg,
            stages,
            laterals,
            cls_hidden,
            cls_out,
            box_hidden,
            box_out,
            anchors,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn num_parameters(&self) -> usize {
        self.named_convs()
            .iter()
            .map(|(_, c)| c.weight.len() + c.bias.len())
            .sum()
    }

    pub fn named_convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out: Vec<(String, &Conv2d)> = Vec::new();
        for (i, c) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}"), c));
        }
        for (i, c) in self.laterals.iter().enumerate() {
            out.push((format!("pyramid.lateral{i}"), c));
        }
        out.push(("cls_head.hidden".into(), &self.cls_hidden));
        out.push(("cls_head.out".into(), &self.cls_out));
        out.push(("box_head.hidden".into(), &self.box_hidden));
        out.push(("box_head.out".into(), &self.box_out));
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out: Vec<&mut Conv2d> = Vec::new();
        out.extend(self.stages.iter_mut());
        out.extend(self.laterals.iter_mut());
        out.push(&mut self.cls_hidden);
        out.push(&mut self.cls_out);
        out.push(&mut self.box_hidden);
        out.push(&mut self.box_out);
        out
    }

    pub fn zero_grads(&self) -> DetectorGrads {
        self.named_convs()
            .iter()
            .map(|(_, c)| ConvGrad::zeros_like(c))
            .collect()
    }

    fn check_input(&self, chip: &ImageChip) -> Result<()> {
        let n = self.cfg.input_size;
        if chip.width != n || chip.height != n {
            return Err(Error::invalid(
                "image",
                format!("expected {n}x{n} input, got {}x{}", chip.width, chip.height),
            ));
        }
        Ok(())
    }

    fn run(&self, chip: &ImageChip, keep: bool) -> Result<(HeadOutput, Option<ForwardCache>)> {
        self.check_input(chip)?;
        let input = Tensor3::from_vec(3, chip.height, chip.width, chip.to_planar());

        let mut stage_cols = Vec::with_capacity(self.stages.len());
        let mut stage_out: Vec<Tensor3> = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let x = stage_out.last().unwrap_or(&input);
            let (mut y, cols) = conv.forward_cached(x);
            y.relu_inplace();
            stage_cols.push(cols);
            stage_out.push(y);
        }

        let first = self.stages.len() - self.laterals.len();
        let mut pyramid: Vec<Tensor3> = vec![Tensor3::zeros(0, 0, 0); self.laterals.len()];
        for l in (0..self.laterals.len()).rev() {
            let mut p = self.laterals[l].forward(&stage_out[first + l]);
            if l + 1 < self.laterals.len() {
                p.add_assign(&pyramid[l + 1].upsample2(p.h, p.w));
            }
            pyramid[l] = p;
        }

        let a = self.cfg.anchors.anchors_per_cell();
        let k = self.cfg.num_classes;
        let total = self.anchors.len();
        let mut out = HeadOutput {
            class_logits: Vec::with_capacity(total * k),
            box_deltas: Vec::with_capacity(total),
        };
        let mut levels = Vec::with_capacity(pyramid.len());
        for p in &pyramid {
            let (mut ch, ch_cols) = self.cls_hidden.forward_cached(p);
            ch.relu_inplace();
            let (cls, cls_cols) = self.cls_out.forward_cached(&ch);
            let (mut bh, bh_cols) = self.box_hidden.forward_cached(p);
            bh.relu_inplace();
            let (bx, bx_cols) = self.box_out.forward_cached(&bh);

            let plane = p.plane();
            for cell in 0..plane {
                for ai in 0..a {
                    for ki in 0..k {
                        out.class_logits.push(cls.data[(ai * k + ki) * plane + cell]);
                    }
                    out.box_deltas
                        .push(std::array::from_fn(|c| bx.data[(ai * 4 + c) * plane + cell]));
                }
            }
            if keep {
                levels.push(LevelCache {
                    cls_hidden_cols: ch_cols,
                    cls_hidden: ch,
                    cls_out_cols: cls_cols,
                    box_hidden_cols: bh_cols,
                    box_hidden: bh,
                    box_out_cols: bx_cols,
                });
            }
        }
        debug_assert_eq!(out.box_deltas.len(), total);

        let cache = keep.then_some(ForwardCache {
            input,
            stage_cols,
            stage_out,
            pyramid,
            levels,
        });
        Ok((out, cache))
    }

    /// Head outputs for each image, aligned with [`Detector::anchors`].
    pub fn forward(&self, images: &[ImageChip]) -> Result<Vec<HeadOutput>> {
        images.iter().map(|c| self.run(c, false).map(|r| r.0)).collect()
    }

    /// Loss of one image and the gradient of its total with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        chip: &ImageChip,
        assignment: &AssignmentMap,
        weight: ImageWeight,
        loss_cfg: &LossConfig,
    ) -> Result<(LossBreakdown, DetectorGrads)> {
        let (out, cache) = self.run(chip, true)?;
        let cache = cache.expect("cache requested");
        let logits: Vec<f64> = out.class_logits.iter().map(|&v| f64::from(v)).collect();
        let deltas: Vec<BoxDelta> = out
            .box_deltas
            .iter()
            .map(|d| BoxDelta::from_array(d.map(f64::from)))
            .collect();
        let (breakdown, g) =
            total_loss_with_grad(assignment, &logits, self.cfg.num_classes, &deltas, weight, loss_cfg)?;

        let mut grads = self.zero_grads();
        let n_stages = self.stages.len();
        let n_levels = self.laterals.len();
        let (gi_ch, gi_co, gi_bh, gi_bo) = (
            n_stages + n_levels,
            n_stages + n_levels + 1,
            n_stages + n_levels + 2,
            n_stages + n_levels + 3,
        );
        let a = self.cfg.anchors.anchors_per_cell();
        let k = self.cfg.num_classes;

        // Heads, level by level, producing the gradient at each pyramid output.
        let mut d_pyramid = Vec::with_capacity(n_levels);
        let mut anchor_base = 0;
        for (l, p) in cache.pyramid.iter().enumerate() {
            let lc = &cache.levels[l];
            let plane = p.plane();
            let mut d_cls = Tensor3::zeros(a * k, p.h, p.w);
            let mut d_box = Tensor3::zeros(a * 4, p.h, p.w);
            for cell in 0..plane {
                for ai in 0..a {
                    let anchor = anchor_base + cell * a + ai;
                    for ki in 0..k {
                        d_cls.data[(ai * k + ki) * plane + cell] = g.class_logits[anchor * k + ki] as f32;
                    }
                    for c in 0..4 {
                        d_box.data[(ai * 4 + c) * plane + cell] = g.boxes[anchor][c] as f32;
                    }
                }
            }
            anchor_base += plane * a;

            let mut d_ch = self
                .cls_out
                .backward(&lc.cls_hidden, &lc.cls_out_cols, &d_cls, &mut grads[gi_co], true)
                .expect("input grad");
            d_ch.relu_backward_inplace(&lc.cls_hidden);
            let mut dp = self
                .cls_hidden
                .backward(p, &lc.cls_hidden_cols, &d_ch, &mut grads[gi_ch], true)
                .expect("input grad");

            let mut d_bh = self
                .box_out
                .backward(&lc.box_hidden, &lc.box_out_cols, &d_box, &mut grads[gi_bo], true)
                .expect("input grad");
            d_bh.relu_backward_inplace(&lc.box_hidden);
            let dp_box = self
                .box_hidden
                .backward(p, &lc.box_hidden_cols, &d_bh, &mut grads[gi_bh], true)
                .expect("input grad");
            dp.add_assign(&dp_box);
            d_pyramid.push(dp);
        }

        // Top-down pathway, finest level first: P_l feeds P_{l-1} through the upsample.
        let first = n_stages - n_levels;
        let mut d_stage: Vec<Option<Tensor3>> = vec![None; n_stages];
        for l in 0..n_levels {
            if l + 1 < n_levels {
                let (h, w) = (cache.pyramid[l + 1].h, cache.pyramid[l + 1].w);
                let up = d_pyramid[l].upsample2_backward(h, w);
                d_pyramid[l + 1].add_assign(&up);
            }
            let s = first + l;
            let d = self.laterals[l]
                .backward(&cache.stage_out[s], &[], &d_pyramid[l], &mut grads[n_stages + l], true)
                .expect("input grad");
            d_stage[s] = Some(d);
        }

        // Backbone, deepest stage first.
        for s in (0..n_stages).rev() {
            let Some(mut d) = d_stage[s].take() else {
                continue;
            };
            d.relu_backward_inplace(&cache.stage_out[s]);
            let x = if s == 0 { &cache.input } else { &cache.stage_out[s - 1] };
            let dx = self.stages[s].backward(x, &cache.stage_cols[s], &d, &mut grads[s], s > 0);
            if let Some(dx) = dx {
                match &mut d_stage[s - 1] {
                    Some(acc) => acc.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                }
            }
        }
        Ok((breakdown, grads))
    }

    /// Detections for one image: keep scores strictly above the threshold,
    /// decode, per-class NMS, clip to the image.
    pub fn predict(&self, chip: &ImageChip, cfg: &PredictConfig) -> Result<Vec<Detection>> {
        if !(0.0..=1.0).contains(&cfg.score_threshold) {
            return Err(Error::invalid(
                "score_threshold",
                format!("{} is outside [0, 1]", cfg.score_threshold),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.nms_threshold) {
            return Err(Error::invalid(
                "nms_threshold",
                format!("{} is outside [0, 1]", cfg.nms_threshold),
            ));
        }
        let (out, _) = self.run(chip, false)?;
        let k = self.cfg.num_classes;
        let extent = (chip.width as f64, chip.height as f64);
        let mut candidates = Vec::new();
        for (anchor_idx, anchor) in self.anchors.iter().enumerate() {
            for class_id in 0..k {
                let score = sigmoid(f64::from(out.class_logits[anchor_idx * k + class_id]));
                if score > cfg.score_threshold {
                    let delta = BoxDelta::from_array(out.box_deltas[anchor_idx].map(f64::from));
                    // Clamp log-size offsets so a wild regression cannot overflow.
                    let delta = BoxDelta {
                        tw: delta.tw.min(4.0),
                        th: delta.th.min(4.0),
                        ..delta
                    };
                    let bbox = decode_deltas(anchor, &delta, Some(extent))?;
                    if bbox.area() > 0.0 {
                        candidates.push(Detection::new(bbox, score, class_id));
                    }
                }
            }
        }
        let order = score_order(&candidates);
        let top: Vec<Detection> = order
            .into_iter()
            .take(cfg.pre_nms_top_k)
            .map(|i| candidates[i])
            .collect();
        let mut kept = nms(&top, cfg.nms_threshold)?;
        kept.truncate(cfg.max_detections);
        Ok(kept)
    }
}
