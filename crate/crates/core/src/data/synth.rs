//! Seeded synthetic aerial-style scenes.
//!
//! Objects are saturated, crisp shapes drawn last, so their pixel extents
//! equal their boxes exactly. The complexity knob `λ` controls everything
//! behind them: the number of low-saturation distractor shapes and the
//! amplitude of per-pixel texture noise. `λ = 0` gives a uniform background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Annotation, Dataset, ImageSource, RgbPixels};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const SYNTH_CLASSES: [&str; 3] = ["square", "disc", "bar"];

/// Distractors per 128x128 pixels at `λ = 1`.
const CLUTTER_DENSITY: f64 = 60.0;
/// Peak texture noise amplitude at `λ = 1`.
const NOISE_AMPLITUDE: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Longest object side, in pixels.
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Per-image `λ` is drawn uniformly from `[complexity_min, complexity_max]`.
    pub complexity_min: f64,
    pub complexity_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 200,
            image_size: 128,
            objects_min: 1,
            objects_max: 4,
            object_size_min: 16,
            object_size_max: 36,
            complexity_min: 0.0,
            complexity_max: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        if self.object_size_min < 6 || self.object_size_min > self.object_size_max {
            return Err(Error::invalid(
                "object_size",
                format!(
                    "need 6 <= min ({}) <= max ({})",
                    self.object_size_min, self.object_size_max
                ),
            ));
        }
        if self.object_size_max > self.image_size {
            return Err(Error::invalid(
                "object_size_max",
                format!(
                    "objects of {} px do not fit in a {} px image",
                    self.object_size_max, self.image_size
                ),
            ));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::invalid("objects", "objects_min exceeds objects_max"));
        }
        let unit = 0.0..=1.0;
        if !(unit.contains(&self.complexity_min)
            && unit.contains(&self.complexity_max)
            && self.complexity_min <= self.complexity_max)
        {
            return Err(Error::invalid(
                "complexity",
                "need 0 <= complexity_min <= complexity_max <= 1",
            ));
        }
        Ok(())
    }
}

pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let images = (0..cfg.num_images)
        .into_par_iter()
        .map(|i| render_scene(cfg, i))
        .collect();
    Ok(Dataset {
        classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        images,
    })
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f32; 3]) {
        let n = self.size as i64;
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                self.px[(y * n + x) as usize] = c;
            }
        }
    }

    /// Ellipse inscribed in the pixel rectangle `[x0, x1) x [y0, y1)`, sampled at pixel centres.
    fn fill_ellipse(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f32; 3]) {
        let (cx, cy) = (0.5 * (x0 + x1) as f64, 0.5 * (y0 + y1) as f64);
        let (rx, ry) = (0.5 * (x1 - x0) as f64, 0.5 * (y1 - y0) as f64);
        let n = self.size as i64;
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.px[(y * n + x) as usize] = c;
                }
            }
        }
    }

    fn into_pixels(self) -> RgbPixels {
        let mut out = RgbPixels::new(self.size, self.size);
        for (dst, c) in out.data.chunks_exact_mut(3).zip(&self.px) {
            for (d, v) in dst.iter_mut().zip(c) {
                *d = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|v| v + rng.random_range(-spread..=spread))
}

fn render_scene(cfg: &SynthConfig, index: usize) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let n = cfg.image_size;
    let lambda = if cfg.complexity_max > cfg.complexity_min {
        rng.random_range(cfg.complexity_min..=cfg.complexity_max)
    } else {
        cfg.complexity_min
    };

    let g = rng.random_range(0.35f32..0.6);
    let bg = jitter(&mut rng, [g; 3], 0.03);
    let mut canvas = Canvas {
        size: n,
        px: vec![bg; n * n],
    };

    let clutter = (lambda * CLUTTER_DENSITY * (n * n) as f64 / (128.0 * 128.0)).round() as usize;
    for _ in 0..clutter {
        let level = rng.random_range(0.1f32..0.9);
        let color = jitter(&mut rng, [level; 3], 0.05);
        let x = rng.random_range(0..n as i64);
        let y = rng.random_range(0..n as i64);
        match rng.random_range(0..3) {
            0 => {
                let w = rng.random_range(2..14);
                let h = rng.random_range(2..14);
                canvas.fill_rect(x, y, x + w, y + h, color);
            }
            1 => {
                let len = rng.random_range(8..40);
                let thick = rng.random_range(1..3);
                if rng.random_bool(0.5) {
                    canvas.fill_rect(x, y, x + len, y + thick, color);
                } else {
                    canvas.fill_rect(x, y, x + thick, y + len, color);
                }
            }
            _ => {
                let r = rng.random_range(2..8);
                canvas.fill_ellipse(x - r, y - r, x + r, y + r, color);
            }
        }
    }

    let amp = NOISE_AMPLITUDE * lambda as f32;
    if amp > 0.0 {
        for p in &mut canvas.px {
            let d = rng.random_range(-amp..=amp);
            for v in p.iter_mut() {
                *v += d;
            }
        }
    }

    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..SYNTH_CLASSES.len());
        let side = rng.random_range(cfg.object_size_min..=cfg.object_size_max);
        let (w, h) = match class_id {
            2 => {
                let short = (side as f64 / 3.0).round().max(4.0) as usize;
                if rng.random_bool(0.5) {
                    (side, short)
                } else {
                    (short, side)
                }
            }
            _ => (side, side),
        };
        // Rejection-sample a spot that keeps a 2 px gap to earlier objects.
        for _ in 0..50 {
            let x0 = rng.random_range(0..=n - w) as f64;
            let y0 = rng.random_range(0..=n - h) as f64;
            let bbox = BBox {
                x_min: x0,
                y_min: y0,
                x_max: x0 + w as f64,
                y_max: y0 + h as f64,
            };
            let padded = BBox {
                x_min: x0 - 2.0,
                y_min: y0 - 2.0,
                x_max: bbox.x_max + 2.0,
                y_max: bbox.y_max + 2.0,
            };
            if objects.iter().all(|o| o.bbox.intersection(&padded) == 0.0) {
                objects.push(Annotation {
                    bbox,
                    class_id,
                    difficult: false,
                });
                break;
            }
        }
    }
    for o in &objects {
        let [x0, y0, x1, y1] = o.bbox.to_array().map(|v| v as i64);
        match o.class_id {
            0 => {
                let c = jitter(&mut rng, [0.9, 0.15, 0.15], 0.05);
                canvas.fill_rect(x0, y0, x1, y1, c);
            }
            1 => {
                let c = jitter(&mut rng, [0.15, 0.85, 0.2], 0.05);
                canvas.fill_ellipse(x0, y0, x1, y1, c);
            }
            _ => {
                let c = jitter(&mut rng, [0.15, 0.25, 0.9], 0.05);
                canvas.fill_rect(x0, y0, x1, y1, c);
            }
        }
    }

    AnnotatedImage {
        id: format!("{index:06}"),
        width: n,
        height: n,
        source: ImageSource::Pixels(canvas.into_pixels()),
        objects,
        complexity: Some(lambda),
    }
}
