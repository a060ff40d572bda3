use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::detector::{Detector, DetectorConfig};
use super::nn::{AdamConfig, AdamState};
use crate::anchors::{assign_targets, AssignmentMap, MatchThresholds};
use crate::data::{chip_image, Annotation, Dataset, ImageChip};
use crate::error::{Error, Result};
use crate::losses::{ImageWeight, LossBreakdown, LossConfig};
use crate::salience::{estimate_salience, image_weight, FrozenExtractor, SalienceStats, TapId, WeightMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The learning rate is divided by 10 every this many steps.
    pub decay_interval: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub tap: TapId,
    pub new_min: f64,
    pub new_max: f64,
    /// Off means every image weighs 1 (plain focal loss).
    pub sbl_enabled: bool,
    /// Min-max normalize salience into `[new_min, new_max]`; otherwise the raw
    /// mean activation is the weight.
    pub normalize: bool,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub matching: MatchThresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay_interval: 800,
            iterations: 2000,
            batch_size: 2,
            seed: 0,
            tap: TapId::C2,
            new_min: 0.5,
            new_max: 1.0,
            sbl_enabled: true,
            normalize: true,
            grad_clip: 10.0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            matching: MatchThresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.decay_interval == 0 {
            return Err(Error::invalid("decay_interval", "must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip", "must be positive"));
        }
        self.loss.focal.validate()?;
        if self.sbl_enabled && self.normalize && !(self.new_min > 0.0 && self.new_min <= self.new_max) {
            return Err(Error::invalid(
                "band",
                format!("need 0 < new_min ({}) <= new_max ({})", self.new_min, self.new_max),
            ));
        }
        Ok(())
    }

    pub fn weight_mode(&self) -> WeightMode {
        match (self.sbl_enabled, self.normalize) {
            (false, _) => WeightMode::Off,
            (true, false) => WeightMode::Raw,
            (true, true) => WeightMode::Normalized {
                new_min: self.new_min,
                new_max: self.new_max,
            },
        }
    }
}

/// Step schedule: the rate is divided by 10 each time `step` crosses a
/// multiple of `decay_interval`.
pub fn learning_rate_at(cfg: &TrainConfig, step: u64) -> f64 {
    let mut lr = cfg.learning_rate;
    for _ in 0..step / cfg.decay_interval {
        lr /= 10.0;
    }
    lr
}

/// Splits every image into detector-sized inputs. Images already at the
/// input size pass through whole; larger ones are tiled with a quarter-chip overlap.
pub fn training_chips(dataset: &Dataset, input_size: usize) -> Result<Vec<(ImageChip, Vec<Annotation>)>> {
    let per_image = dataset
        .images
        .par_iter()
        .map(|img| {
            let px = img.load_pixels()?;
            if px.width == input_size && px.height == input_size {
                Ok(vec![(px.to_chip(&img.id), img.objects.clone())])
            } else {
                let mut chips = chip_image(img, &px, input_size, input_size / 4)?;
                for (c, _) in &mut chips {
                    c.source_id = format!("{}@{},{}", img.id, c.offset.0, c.offset.1);
                }
                Ok(chips)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// One training input with its precomputed targets and loss weight.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub chip: ImageChip,
    pub assignment: AssignmentMap,
    pub weight: ImageWeight,
}

/// Builds training samples: anchor targets for every chip and, when salience
/// weighting is on, each chip's raw salience and derived weight.
///
/// Weighting requires statistics computed for this exact corpus and
/// extractor; anything else is refused with [`Error::StaleStats`].
pub fn prepare_samples(
    chips: Vec<(ImageChip, Vec<Annotation>)>,
    detector: &Detector,
    cfg: &TrainConfig,
    salience: Option<(&SalienceStats, &dyn FrozenExtractor, &str)>,
) -> Result<Vec<TrainSample>> {
    let mode = cfg.weight_mode();
    let weighting = match (mode, salience) {
        (WeightMode::Off, _) => None,
        (_, None) => {
            return Err(Error::StaleStats(
                "salience weighting is enabled but no statistics were supplied".into(),
            ))
        }
        (_, Some((stats, extractor, corpus_hash))) => {
            stats.check_fresh(corpus_hash, &extractor.fingerprint())?;
            if stats.num_images != chips.len() {
                return Err(Error::StaleStats(format!(
                    "statistics cover {} images, corpus has {}",
                    stats.num_images,
                    chips.len()
                )));
            }
            stats.tap(cfg.tap)?;
            Some((stats, extractor))
        }
    };
    chips
        .into_par_iter()
        .map(|(chip, objects)| {
            let gts: Vec<_> = objects.iter().map(|o| (o.bbox, o.class_id)).collect();
            let assignment = assign_targets(detector.anchors(), &gts, cfg.matching)?;
            let weight = match weighting {
                None => ImageWeight::UNIT,
                Some((stats, extractor)) => {
                    let raw = estimate_salience(&chip, extractor, cfg.tap)?;
                    image_weight(raw, stats, cfg.tap, mode)?
                }
            };
            Ok(TrainSample {
                chip,
                assignment,
                weight,
            })
        })
        .collect()
}

/// Loss record of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean of the per-image totals.
    pub batch_loss: f64,
    pub grad_norm: f64,
    pub images: Vec<ImageLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss {
    pub image_id: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Owns the detector and optimizer state; the only writer of parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    detector: Detector,
    adam: AdamState,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(detector_cfg: DetectorConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::new(detector_cfg, cfg.seed)?;
        Ok(Self::from_parts(detector, None, cfg, 0))
    }

    pub fn from_parts(detector: Detector, adam: Option<AdamState>, cfg: TrainConfig, step: u64) -> Self {
        let adam = adam.unwrap_or_else(|| {
            AdamState::new(
                detector
                    .named_convs()
                    .iter()
                    .flat_map(|(_, c)| [c.weight.len(), c.bias.len()]),
            )
        });
        Trainer {
            detector,
            adam,
            cfg,
            step,
        }
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn into_detector(self) -> Detector {
        self.detector
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of optimizer updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        learning_rate_at(&self.cfg, self.step)
    }

    /// Forward and backward on every image of the batch, then one Adam update
    /// on the batch-mean gradient.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let det = &self.detector;
        let loss_cfg = self.cfg.loss;
        let results = batch
            .par_iter()
            .map(|s| det.loss_and_grads(&s.chip, &s.assignment, s.weight, &loss_cfg))
            .collect::<Result<Vec<_>>>()?;

        let mut grads = det.zero_grads();
        for (_, g) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi);
            }
        }
        let inv = 1.0 / batch.len() as f32;
        let mut sq = 0.0f64;
        for g in &mut grads {
            for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                *v *= inv;
                sq += f64::from(*v) * f64::from(*v);
            }
        }
        let norm = sq.sqrt();
        if norm > self.cfg.grad_clip {
            let s = (self.cfg.grad_clip / norm) as f32;
            for g in &mut grads {
                g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
            }
        }

        let lr = self.learning_rate();
        let grad_refs: Vec<&[f32]> = grads
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect();
        let mut params: Vec<&mut [f32]> = self
            .detector
            .convs_mut()
            .into_iter()
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
            .collect();
        self.adam.step(&self.cfg.adam, lr, &mut params, &grad_refs);

        let images: Vec<ImageLoss> = batch
            .iter()
            .zip(&results)
            .map(|(s, (loss, _))| ImageLoss {
                image_id: s.chip.source_id.clone(),
                loss: *loss,
            })
            .collect();
        let batch_loss = images.iter().map(|i| i.loss.total).sum::<f64>() / images.len() as f64;
        let record = StepRecord {
            step: self.step,
            lr,
            batch_loss,
            grad_norm: norm,
            images,
        };
        self.step += 1;
        Ok(record)
    }

    /// Sample indices for the batch at `step`. Each epoch is a fresh seeded
    /// permutation, so the schedule depends only on (seed, step, corpus size).
    pub fn batch_indices(&self, step: u64, num_samples: usize) -> Vec<usize> {
        let b = self.cfg.batch_size as u64;
        let n = num_samples as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (step * b..step * b + b)
            .map(|i| {
                let epoch = i / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..num_samples).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                    rng.set_stream(epoch);
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("permutation").1[(i % n) as usize]
            })
            .collect()
    }

    /// Runs until `cfg.iterations` steps have been taken. The callback sees
    /// each step's record and the trainer after the update.
    pub fn fit<F>(&mut self, samples: &[TrainSample], mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepRecord, &Trainer) -> Result<()>,
    {
        if samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        while self.step < self.cfg.iterations {
            let idx = self.batch_indices(self.step, samples.len());
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let record = self.train_step(&batch)?;
            on_step(&record, self)?;
        }
        Ok(())
    }
}
